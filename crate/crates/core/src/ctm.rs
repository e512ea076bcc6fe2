//! Cell Transmission Model dynamics and per-cycle assembly of the constraint
//! constants used by the flow optimization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{CellId, Network, NodeId};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum CtmError {
    #[error("volume must be nonnegative, got {0}")]
    NegativeVolume(f64),
    #[error("cell index {cell}: resulting volume {value} is negative")]
    NegativeResultingVolume { cell: usize, value: f64 },
    #[error("cell index {cell}: upper volume bound {value} is negative (guaranteed overflow)")]
    InfeasibleBounds { cell: usize, value: f64 },
    #[error("vector length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid cycle inputs: {0}")]
    InvalidInputs(String),
}

/// Piecewise-linear demand/supply pair (trapezoidal fundamental diagram):
/// `d(rho) = min(v_f * rho, d_max)`, `s(rho) = min(s_max, w_b * (rho_cg - rho))`
/// clamped at zero.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DemandSupplySpec<T> {
    pub v_f: T,
    pub d_max: T,
    pub s_max: T,
    pub w_b: T,
}

impl<T: Scalar> DemandSupplySpec<T> {
    /// Spec with `s(rho_cr) = d(rho_cr)` by construction: both branches meet
    /// at the critical volume.
    pub fn balanced(rho_cr: T, rho_cg: T, v_f: T) -> Self {
        let cap = v_f * rho_cr;
        DemandSupplySpec {
            v_f,
            d_max: cap,
            s_max: cap,
            w_b: cap / (rho_cg - rho_cr),
        }
    }
}

/// Physical and cost parameters of one road cell.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CellParams<T> {
    /// Congestion volume: supply is zero at and above it.
    pub rho_cg: T,
    /// Critical volume: supply equals demand there.
    pub rho_cr: T,
    /// Average service time for one vehicle to clear the sink intersection.
    pub omega: T,
    pub demand_supply: DemandSupplySpec<T>,
    pub a: T,
    pub b: T,
    pub c: T,
    pub w: T,
}

impl<T: Scalar> CellParams<T> {
    /// Defaults for the urban benchmark scenarios: congestion volume 300,
    /// critical volume 120, two-second service time, unit free-flow rate.
    /// Source cells weigh volume slightly higher; destination cells weigh
    /// outflow heavier.
    pub fn urban_defaults(is_source: bool, is_destination: bool) -> Self {
        let rho_cg = lit(300.0);
        let rho_cr = lit(120.0);
        CellParams {
            rho_cg,
            rho_cr,
            omega: lit(2.0),
            demand_supply: DemandSupplySpec::balanced(rho_cr, rho_cg, T::one()),
            a: if is_source { lit(0.55) } else { lit(0.5) },
            b: T::zero(),
            c: T::zero(),
            w: if is_destination { lit(-20.0) } else { lit(-10.0) },
        }
    }

    /// Upper bound on the downstream flow leaving the cell at volume `rho`.
    pub fn demand(&self, rho: T) -> Result<T, CtmError> {
        if rho < T::zero() {
            return Err(CtmError::NegativeVolume(crate::scalar::to_f64(rho)));
        }
        let ds = &self.demand_supply;
        Ok(if ds.v_f * rho < ds.d_max { ds.v_f * rho } else { ds.d_max })
    }

    /// Upper bound on the upstream flow entering the cell at volume `rho`.
    pub fn supply(&self, rho: T) -> Result<T, CtmError> {
        if rho < T::zero() {
            return Err(CtmError::NegativeVolume(crate::scalar::to_f64(rho)));
        }
        let ds = &self.demand_supply;
        let headroom = ds.w_b * (self.rho_cg - rho);
        let s = if ds.s_max < headroom { ds.s_max } else { headroom };
        Ok(if s > T::zero() { s } else { T::zero() })
    }
}

/// State and exogenous data at the start of one cycle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CycleInputs<T> {
    /// Volume per cell at cycle start.
    pub rho: Vec<T>,
    /// Nominal exogenous inflow per cell (zero off source cells).
    pub mu_nominal: Vec<T>,
    pub mu_lower: Vec<T>,
    pub mu_upper: Vec<T>,
    /// Common cycle duration (seconds).
    pub cycle_time: T,
}

impl<T: Scalar> CycleInputs<T> {
    /// All-zero inflows at the given volumes.
    pub fn quiescent(rho: Vec<T>, cycle_time: T) -> Self {
        let n = rho.len();
        CycleInputs {
            rho,
            mu_nominal: vec![T::zero(); n],
            mu_lower: vec![T::zero(); n],
            mu_upper: vec![T::zero(); n],
            cycle_time,
        }
    }
}

/// Constants of one cycle's flow optimization, per cell.
#[derive(Debug, Clone)]
pub struct ProblemData<T> {
    /// `x0 = rho + mu_nominal`.
    pub x0: DVector<T>,
    /// Lower volume slack `rho + mu_lower`.
    pub x_lower: DVector<T>,
    /// Upper volume headroom `rho_cg - rho - mu_upper`.
    pub x_upper: DVector<T>,
    /// Flow cap `min(demand(rho), T / v)`.
    pub f_upper: DVector<T>,
    /// Supply cap `s(rho)`.
    pub s_upper: DVector<T>,
    /// Per-vehicle green time `max_j r*_ij * omega_i`.
    pub v: DVector<T>,
    pub cycle_time: T,
}

impl<T: Scalar> ProblemData<T> {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// One conservation step: `rho' = rho + mu - G_realized^T f`.
pub fn step_dynamics<T: Scalar>(
    net: &Network,
    rho: &DVector<T>,
    flow: &DVector<T>,
    realized_r: &DMatrix<T>,
    realized_mu: &DVector<T>,
) -> Result<DVector<T>, CtmError> {
    let n = net.len();
    for (len, name) in [(rho.len(), "rho"), (flow.len(), "flow"), (realized_mu.len(), "mu")] {
        if len != n {
            return Err(CtmError::InvalidInputs(format!(
                "{name} has length {len}, network has {n} cells"
            )));
        }
    }
    let g = DMatrix::identity(n, n) - realized_r;
    let next = rho + realized_mu - g.transpose() * flow;
    for i in 0..n {
        if next[i] < -T::default_epsilon().sqrt() {
            return Err(CtmError::NegativeResultingVolume {
                cell: i,
                value: crate::scalar::to_f64(next[i]),
            });
        }
    }
    Ok(next)
}

/// Evaluate all per-cycle constants from the network, parameters and inputs.
pub fn assemble_problem<T: Scalar>(
    net: &Network,
    params: &[CellParams<T>],
    inputs: &CycleInputs<T>,
) -> Result<ProblemData<T>, CtmError> {
    let n = net.len();
    if params.len() != n {
        return Err(CtmError::LengthMismatch { expected: n, got: params.len() });
    }
    for v in [&inputs.rho, &inputs.mu_nominal, &inputs.mu_lower, &inputs.mu_upper] {
        if v.len() != n {
            return Err(CtmError::LengthMismatch { expected: n, got: v.len() });
        }
    }
    for i in 0..n {
        if inputs.rho[i] < T::zero() || inputs.rho[i] > params[i].rho_cg {
            return Err(CtmError::InvalidInputs(format!(
                "cell index {i}: volume outside [0, rho_cg]"
            )));
        }
        if inputs.mu_lower[i] > inputs.mu_nominal[i] || inputs.mu_nominal[i] > inputs.mu_upper[i] {
            return Err(CtmError::InvalidInputs(format!(
                "cell index {i}: inflow bounds not ordered"
            )));
        }
        if net.source(CellId(i)) != NodeId::Exterior && inputs.mu_upper[i] != T::zero() {
            return Err(CtmError::InvalidInputs(format!(
                "cell index {i}: exogenous inflow on a non-source cell"
            )));
        }
    }

    let mut x0 = DVector::zeros(n);
    let mut x_lower = DVector::zeros(n);
    let mut x_upper = DVector::zeros(n);
    let mut f_upper = DVector::zeros(n);
    let mut s_upper = DVector::zeros(n);
    let mut v = DVector::zeros(n);

    for i in 0..n {
        let p = &params[i];
        let rho = inputs.rho[i];
        x0[i] = rho + inputs.mu_nominal[i];
        x_lower[i] = rho + inputs.mu_lower[i];
        x_upper[i] = p.rho_cg - rho - inputs.mu_upper[i];
        if x_upper[i] < T::zero() {
            return Err(CtmError::InfeasibleBounds {
                cell: i,
                value: crate::scalar::to_f64(x_upper[i]),
            });
        }
        // Destination cells have no downstream ratios; their exit is still
        // service-time limited.
        let max_ratio = net
            .downstream(CellId(i))
            .map(|j| net.ratio_nominal(CellId(i), j))
            .fold(f64::NEG_INFINITY, f64::max);
        v[i] = if max_ratio.is_finite() {
            lit::<T>(max_ratio) * p.omega
        } else {
            p.omega
        };
        let service_cap = inputs.cycle_time / v[i];
        let d = p.demand(rho)?;
        f_upper[i] = if d < service_cap { d } else { service_cap };
        s_upper[i] = p.supply(rho)?;
    }

    Ok(ProblemData {
        x0,
        x_lower,
        x_upper,
        f_upper,
        s_upper,
        v,
        cycle_time: inputs.cycle_time,
    })
}
