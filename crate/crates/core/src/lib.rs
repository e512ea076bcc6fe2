//! Per-cycle traffic flow control over a Cell Transmission Model network.
//!
//! The library models an urban road network as directed cells joined at
//! intersections, assembles one constrained quadratic program per signal
//! cycle, and solves it two ways: a centralized dual gradient-projection
//! iteration, and a distributed protocol where each cell is an agent that
//! talks only to its graph neighbors and shortcuts its inner Jacobi loops
//! with minimum-time final-value computation.
//!
//! Core numerics are generic over the scalar type; `f64` aliases are
//! provided at the crate root for everyday use.

pub mod centralized;
pub mod ctm;
pub mod distributed;
pub mod final_value;
pub mod harness;
pub mod network;
pub mod oracle;
pub mod qp;
pub mod scalar;
pub mod wire;

pub use scalar::Scalar;

/// Default scalar type for the concrete aliases below.
pub type F = f64;

pub type DVector = nalgebra::DVector<F>;
pub type DMatrix = nalgebra::DMatrix<F>;

pub type CellParams = ctm::CellParams<F>;
pub type CycleInputs = ctm::CycleInputs<F>;
pub type ProblemData = ctm::ProblemData<F>;
pub type AssembledMatrices = qp::AssembledMatrices<F>;
pub type SolveReport = centralized::SolveReport<F>;
pub type SolveOptions = centralized::SolveOptions<F>;
