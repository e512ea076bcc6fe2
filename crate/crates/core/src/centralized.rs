//! Centralized dual gradient projection for the per-cycle program.
//!
//! Iterates `f(k+1) = P eta(k) + p`,
//! `eta(k+1) = max{0, eta(k) + eps (Q f(k+1) + q)}` from `eta(0) = 0` until
//! successive multiplier vectors stop moving.

use nalgebra::DVector;
use thiserror::Error;

use crate::ctm::{CellParams, ProblemData};
use crate::network::Network;
use crate::qp::{build_matrices, kkt_residuals, AssembledMatrices, KktReport, QpError};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("dual iteration did not converge within {0} iterations")]
    MaxIterExceeded(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions<T> {
    /// Fraction of the theoretical step-size bound `2/(varrho*delta)`.
    pub step_safety: T,
    /// Absolute part of the stopping threshold on `||eta(k+1)-eta(k)||`.
    pub delta_tol: T,
    pub max_iter: usize,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        SolveOptions {
            step_safety: lit(0.9),
            delta_tol: lit(1e-14),
            max_iter: 50_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport<T> {
    pub f_opt: DVector<T>,
    pub x_opt: DVector<T>,
    pub zeta_opt: DVector<T>,
    pub eta_final: DVector<T>,
    pub iterations: usize,
    pub final_step_norm: T,
    pub epsilon: T,
    pub kkt: KktReport<T>,
}

/// Step size `safety * 2 / (varrho * delta)`; any value strictly inside the
/// bound keeps the projected ascent convergent.
pub fn step_size<T: Scalar>(am: &AssembledMatrices<T>, safety: T) -> Result<T, QpError> {
    let denom = am.varrho * am.delta;
    if !(denom > T::zero()) || !denom.is_finite() {
        return Err(QpError::DegenerateNorms);
    }
    Ok(safety * lit::<T>(2.0) / denom)
}

/// Gradient of the dual function at `eta`.
pub fn dual_gradient<T: Scalar>(am: &AssembledMatrices<T>, eta: &DVector<T>) -> DVector<T> {
    &am.q_mat * am.f_star(eta) + &am.q_vec
}

/// Run projected dual ascent on pre-assembled matrices.
pub fn solve_assembled<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
    am: &AssembledMatrices<T>,
    opts: &SolveOptions<T>,
) -> Result<SolveReport<T>, SolveError> {
    let eps = step_size(am, opts.step_safety)?;
    let rows = am.q_mat.nrows();
    let tol = opts.delta_tol * (T::one() + am.q_vec.norm());

    let mut eta = DVector::<T>::zeros(rows);
    let mut iterations = 0;
    let mut step_norm = tol + T::one();
    while iterations < opts.max_iter {
        let f = am.f_star(&eta);
        let grad = &am.q_mat * &f + &am.q_vec;
        let mut next = &eta + grad * eps;
        for v in next.iter_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        step_norm = (&next - &eta).norm();
        eta = next;
        iterations += 1;
        if step_norm < tol {
            break;
        }
    }
    if step_norm >= tol {
        return Err(SolveError::MaxIterExceeded(opts.max_iter));
    }

    let f = am.f_star(&eta);
    let zeta = am.zeta_star(&eta);
    let x = am.x_star(&zeta);
    let kkt = kkt_residuals(net, pd, params, &x, &f, &zeta, &eta);
    Ok(SolveReport {
        f_opt: f,
        x_opt: x,
        zeta_opt: zeta,
        eta_final: eta,
        iterations,
        final_step_norm: step_norm,
        epsilon: eps,
        kkt,
    })
}

/// Assemble matrices and solve one cycle's program.
pub fn solve<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
    opts: &SolveOptions<T>,
) -> Result<SolveReport<T>, SolveError> {
    let am = build_matrices(net, pd, params)?;
    solve_assembled(net, pd, params, &am, opts)
}
