//! Per-cycle quadratic program: Lagrangian matrix assembly, objective and
//! KKT residual evaluation.
//!
//! The decision variables are the downstream flows `f`; volumes follow from
//! the conservation equality `x = x0 - G^T f`. For a fixed inequality
//! multiplier vector `eta`, the inner minimizer is affine:
//! `f*(eta) = P eta + p`, and the dual gradient is `Q f* + q`.
//!
//! Multipliers are blocked per cell in the fixed order
//! (lambda, theta, alpha, beta, nu, gamma).

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::ctm::{CellParams, ProblemData};
use crate::network::{CellId, Network, NodeId};
use crate::scalar::{lit, Scalar};

pub const MULTS_PER_CELL: usize = 6;
pub const LAMBDA: usize = 0;
pub const THETA: usize = 1;
pub const ALPHA: usize = 2;
pub const BETA: usize = 3;
pub const NU: usize = 4;
pub const GAMMA: usize = 5;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("vector length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("conservation matrix G is singular")]
    SingularG,
    #[error("problem is infeasible")]
    Infeasible,
    #[error("step-size norms degenerate (constraint-free problem)")]
    DegenerateNorms,
    #[error("oracle backend failed: {0}")]
    OracleFailure(String),
}

/// Inequality multipliers `eta` (6 per cell) plus equality multipliers
/// `zeta` (1 per cell).
#[derive(Debug, Clone)]
pub struct DualState<T> {
    pub eta: DVector<T>,
    pub zeta: DVector<T>,
}

impl<T: Scalar> DualState<T> {
    pub fn zeros(n: usize) -> Self {
        DualState {
            eta: DVector::zeros(MULTS_PER_CELL * n),
            zeta: DVector::zeros(n),
        }
    }

    /// Component `kind` of cell `i`'s multiplier block.
    pub fn eta_component(&self, i: usize, kind: usize) -> T {
        self.eta[MULTS_PER_CELL * i + kind]
    }
}

/// All constant matrices of one cycle's dual iteration.
#[derive(Debug, Clone)]
pub struct AssembledMatrices<T> {
    pub g: DMatrix<T>,
    pub g_inv: DMatrix<T>,
    /// `h(eta) = H eta + w`; `H = Q^T`.
    pub h: DMatrix<T>,
    /// `f*(eta) = P eta + p`.
    pub p_mat: DMatrix<T>,
    pub p_vec: DVector<T>,
    /// Dual gradient `Q f* + q`.
    pub q_mat: DMatrix<T>,
    pub q_vec: DVector<T>,
    /// Frobenius norm of `P` (upper bound on the induced 2-norm).
    pub delta: T,
    /// Frobenius norm of `Q`.
    pub varrho: T,
    a: DVector<T>,
    b: DVector<T>,
    w: DVector<T>,
}

impl<T: Scalar> AssembledMatrices<T> {
    pub fn num_cells(&self) -> usize {
        self.g.nrows()
    }

    pub fn f_star(&self, eta: &DVector<T>) -> DVector<T> {
        &self.p_mat * eta + &self.p_vec
    }

    pub fn zeta_star(&self, eta: &DVector<T>) -> DVector<T> {
        &self.g_inv * (&self.h * eta + &self.w)
    }

    pub fn x_star(&self, zeta: &DVector<T>) -> DVector<T> {
        DVector::from_fn(zeta.len(), |i, _| {
            (zeta[i] - self.b[i]) / (lit::<T>(2.0) * self.a[i])
        })
    }

    /// Dump a matrix in a dense row-major textual form for debugging.
    pub fn dump_matrix(m: &DMatrix<T>) -> String {
        let mut out = String::new();
        for i in 0..m.nrows() {
            let row: Vec<String> = (0..m.ncols())
                .map(|j| format!("{:?}", crate::scalar::to_f64(m[(i, j)])))
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Assemble `G`, `H`, `P`, `p`, `Q`, `q` and the step-size norms.
pub fn build_matrices<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
) -> Result<AssembledMatrices<T>, QpError> {
    let n = net.len();
    if pd.len() != n || params.len() != n {
        return Err(QpError::LengthMismatch { expected: n, got: pd.len().min(params.len()) });
    }
    let (_, _, _, g) = net.turning_matrices::<T>();
    let g_inv = g.clone().try_inverse().ok_or(QpError::SingularG)?;

    let rows = MULTS_PER_CELL * n;
    let mut q_mat = DMatrix::<T>::zeros(rows, n);
    let mut q_vec = DVector::<T>::zeros(rows);
    for i in 0..n {
        let cell = CellId(i);
        let base = MULTS_PER_CELL * i;
        // lambda: f_i - sum r_lower_ji f_j <= x_lower_i
        q_mat[(base + LAMBDA, i)] = T::one();
        for j in net.upstream(cell) {
            q_mat[(base + LAMBDA, j.0)] -= lit::<T>(net.ratio_lower(j, cell));
        }
        q_vec[base + LAMBDA] = -pd.x_lower[i];
        // theta: -f_i + sum r_upper_ji f_j <= x_upper_i
        q_mat[(base + THETA, i)] = -T::one();
        for j in net.upstream(cell) {
            q_mat[(base + THETA, j.0)] += lit::<T>(net.ratio_upper(j, cell));
        }
        q_vec[base + THETA] = -pd.x_upper[i];
        // alpha: -f_i <= 0
        q_mat[(base + ALPHA, i)] = -T::one();
        // beta: f_i <= f_upper_i
        q_mat[(base + BETA, i)] = T::one();
        q_vec[base + BETA] = -pd.f_upper[i];
        // nu: sum r_upper_ji f_j <= s_upper_i
        for j in net.upstream(cell) {
            q_mat[(base + NU, j.0)] += lit::<T>(net.ratio_upper(j, cell));
        }
        q_vec[base + NU] = -pd.s_upper[i];
        // gamma: sum_{j in I(i)} v_j f_j <= T; destination cells carry no
        // traffic-light constraint.
        if net.sink(cell) != NodeId::Exterior {
            for j in net.same_sink(cell) {
                q_mat[(base + GAMMA, j.0)] += pd.v[j.0];
            }
            q_vec[base + GAMMA] = -pd.cycle_time;
        }
    }

    let h = q_mat.transpose();
    let a = DVector::from_fn(n, |i, _| params[i].a);
    let b = DVector::from_fn(n, |i, _| params[i].b);
    let w = DVector::from_fn(n, |i, _| params[i].w);

    let g_inv_t = g_inv.transpose();
    let half = lit::<T>(0.5);
    let a_inv = DMatrix::from_diagonal(&a.map(|ai| T::one() / ai));
    // P = -0.5 G^-T A^-1 G^-1 H, p = G^-T x0 + 0.5 G^-T A^-1 b - 0.5 G^-T A^-1 G^-1 w
    let core = &g_inv_t * &a_inv;
    let p_mat = -(&core * &g_inv * &h) * half;
    let p_vec = &g_inv_t * &pd.x0 + (&core * &b) * half - (&core * (&g_inv * &w)) * half;

    let delta = p_mat.iter().map(|x| *x * *x).fold(T::zero(), |s, x| s + x).sqrt();
    let varrho = q_mat.iter().map(|x| *x * *x).fold(T::zero(), |s, x| s + x).sqrt();

    Ok(AssembledMatrices {
        g,
        g_inv,
        h,
        p_mat,
        p_vec,
        q_mat,
        q_vec,
        delta,
        varrho,
        a,
        b,
        w,
    })
}

/// Cycle cost `sum_i a_i x_i^2 + b_i x_i + c_i + w_i f_i`.
pub fn objective<T: Scalar>(
    params: &[CellParams<T>],
    x: &DVector<T>,
    f: &DVector<T>,
) -> Result<T, QpError> {
    let n = params.len();
    if x.len() != n || f.len() != n {
        return Err(QpError::LengthMismatch { expected: n, got: x.len().min(f.len()) });
    }
    let mut total = T::zero();
    for i in 0..n {
        let p = &params[i];
        total += p.a * x[i] * x[i] + p.b * x[i] + p.c + p.w * f[i];
    }
    Ok(total)
}

/// One residual per KKT block; all below tolerance iff the point is optimal.
#[derive(Debug, Clone, Copy)]
pub struct KktReport<T> {
    pub stationarity_x: T,
    pub stationarity_f: T,
    pub primal_eq: T,
    pub primal_ineq_max_violation: T,
    pub dual_min: T,
    pub complementarity_max: T,
}

impl<T: Scalar> KktReport<T> {
    pub fn max_abs(&self) -> T {
        let mut m = self.stationarity_x;
        for v in [
            self.stationarity_f,
            self.primal_eq,
            self.primal_ineq_max_violation,
            -self.dual_min,
            self.complementarity_max,
        ] {
            if v > m {
                m = v;
            }
        }
        if m > T::zero() {
            m
        } else {
            T::zero()
        }
    }
}

/// Values of the six inequality-constraint blocks at `f`, in multiplier
/// order; nonpositive entries are satisfied constraints.
pub fn constraint_values<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    f: &DVector<T>,
) -> DVector<T> {
    let n = net.len();
    let mut g = DVector::zeros(MULTS_PER_CELL * n);
    for i in 0..n {
        let cell = CellId(i);
        let base = MULTS_PER_CELL * i;
        let inflow_lower: T = net
            .upstream(cell)
            .map(|j| lit::<T>(net.ratio_lower(j, cell)) * f[j.0])
            .fold(T::zero(), |s, v| s + v);
        let inflow_upper: T = net
            .upstream(cell)
            .map(|j| lit::<T>(net.ratio_upper(j, cell)) * f[j.0])
            .fold(T::zero(), |s, v| s + v);
        g[base + LAMBDA] = f[i] - inflow_lower - pd.x_lower[i];
        g[base + THETA] = -f[i] + inflow_upper - pd.x_upper[i];
        g[base + ALPHA] = -f[i];
        g[base + BETA] = f[i] - pd.f_upper[i];
        g[base + NU] = inflow_upper - pd.s_upper[i];
        if net.sink(cell) != NodeId::Exterior {
            let green: T = net
                .same_sink(cell)
                .map(|j| pd.v[j.0] * f[j.0])
                .fold(T::zero(), |s, v| s + v);
            g[base + GAMMA] = green - pd.cycle_time;
        }
    }
    g
}

/// The flow-stationarity vector `dL/df` evaluated componentwise from the
/// per-cell formula (no assembled matrices involved).
pub fn flow_stationarity<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
    zeta: &DVector<T>,
    eta: &DVector<T>,
) -> DVector<T> {
    let n = net.len();
    DVector::from_fn(n, |i, _| {
        let cell = CellId(i);
        let mut hi = params[i].w;
        hi += eta[MULTS_PER_CELL * i + LAMBDA] - eta[MULTS_PER_CELL * i + THETA]
            - eta[MULTS_PER_CELL * i + ALPHA]
            + eta[MULTS_PER_CELL * i + BETA];
        for j in net.downstream(cell) {
            hi -= lit::<T>(net.ratio_lower(cell, j)) * eta[MULTS_PER_CELL * j.0 + LAMBDA];
            hi += lit::<T>(net.ratio_upper(cell, j))
                * (eta[MULTS_PER_CELL * j.0 + THETA] + eta[MULTS_PER_CELL * j.0 + NU]);
        }
        // exact Lagrangian derivative of the traffic-light terms: v_i times
        // the gamma multipliers of every cell sharing the sink
        if net.sink(cell) != NodeId::Exterior {
            let gamma_sum: T = net
                .same_sink(cell)
                .map(|j| eta[MULTS_PER_CELL * j.0 + GAMMA])
                .fold(T::zero(), |s, v| s + v);
            hi += pd.v[i] * gamma_sum;
        }
        let ratio_zeta: T = net
            .downstream(cell)
            .map(|j| lit::<T>(net.ratio_nominal(cell, j)) * zeta[j.0])
            .fold(T::zero(), |s, v| s + v);
        -zeta[i] + ratio_zeta + hi
    })
}

/// Evaluate every KKT block at a candidate primal/dual point.
pub fn kkt_residuals<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
    x: &DVector<T>,
    f: &DVector<T>,
    zeta: &DVector<T>,
    eta: &DVector<T>,
) -> KktReport<T> {
    let n = net.len();
    let two = lit::<T>(2.0);

    let stationarity_x = (0..n)
        .map(|i| (two * params[i].a * x[i] + params[i].b - zeta[i]).abs())
        .fold(T::zero(), T::max);

    let stationarity_f = flow_stationarity(net, pd, params, zeta, eta)
        .iter()
        .map(|v| v.abs())
        .fold(T::zero(), T::max);

    let primal_eq = (0..n)
        .map(|i| {
            let cell = CellId(i);
            let inflow: T = net
                .upstream(cell)
                .map(|j| lit::<T>(net.ratio_nominal(j, cell)) * f[j.0])
                .fold(T::zero(), |s, v| s + v);
            (pd.x0[i] + inflow - f[i] - x[i]).abs()
        })
        .fold(T::zero(), T::max);

    let g = constraint_values(net, pd, f);
    let primal_ineq_max_violation = g.iter().copied().fold(T::zero(), T::max);
    let dual_min = eta.iter().copied().reduce(T::min).unwrap_or_else(T::zero);
    let complementarity_max = eta
        .iter()
        .zip(g.iter())
        .map(|(e, gi)| (*e * *gi).abs())
        .fold(T::zero(), T::max);

    KktReport {
        stationarity_x,
        stationarity_f,
        primal_eq,
        primal_ineq_max_violation,
        dual_min,
        complementarity_max,
    }
}

/// Lagrangian value at an arbitrary point; with the inner minimizer
/// substituted this is the dual function.
pub fn lagrangian<T: Scalar>(
    net: &Network,
    pd: &ProblemData<T>,
    params: &[CellParams<T>],
    x: &DVector<T>,
    f: &DVector<T>,
    zeta: &DVector<T>,
    eta: &DVector<T>,
) -> T {
    let n = net.len();
    let mut value = objective(params, x, f).expect("consistent lengths");
    for i in 0..n {
        let cell = CellId(i);
        let inflow: T = net
            .upstream(cell)
            .map(|j| lit::<T>(net.ratio_nominal(j, cell)) * f[j.0])
            .fold(T::zero(), |s, v| s + v);
        value += zeta[i] * (pd.x0[i] + inflow - f[i] - x[i]);
    }
    value + eta.dot(&constraint_values(net, pd, f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::{assemble_problem, CycleInputs};
    use crate::network::{CellDesc, Network, NetworkDescription, TurnDesc};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_cell() -> (Network, Vec<CellParams<f64>>, ProblemData<f64>) {
        let net = Network::build(&NetworkDescription {
            cells: vec![CellDesc { id: 1, source: "O".into(), sink: "O".into(), turns: vec![] }],
        })
        .unwrap();
        let mut p = CellParams::<f64>::urban_defaults(false, false);
        p.a = 0.5;
        p.b = 0.0;
        p.w = -10.0;
        let inputs = CycleInputs::quiescent(vec![20.0], 30.0);
        let pd = assemble_problem(&net, &[p], &inputs).unwrap();
        (net, vec![p], pd)
    }

    pub(crate) fn tandem_instance() -> (Network, Vec<CellParams<f64>>, ProblemData<f64>) {
        let net = Network::build(&NetworkDescription {
            cells: vec![
                CellDesc {
                    id: 1,
                    source: "O".into(),
                    sink: "I1".into(),
                    turns: vec![TurnDesc { to: 2, r_nominal: 1.0, r_lower: 0.95, r_upper: 1.0 }],
                },
                CellDesc { id: 2, source: "I1".into(), sink: "O".into(), turns: vec![] },
            ],
        })
        .unwrap();
        let params: Vec<CellParams<f64>> = vec![
            CellParams::urban_defaults(true, false),
            CellParams::urban_defaults(false, true),
        ];
        let mut inputs = CycleInputs::quiescent(vec![40.0, 25.0], 90.0);
        inputs.mu_nominal[0] = 10.0;
        inputs.mu_lower[0] = 9.0;
        inputs.mu_upper[0] = 11.0;
        let pd = assemble_problem(&net, &params, &inputs).unwrap();
        (net, params, pd)
    }

    #[test]
    fn single_cell_assembly() {
        let (net, params, pd) = single_cell();
        let am = build_matrices(&net, &pd, &params).unwrap();
        assert_eq!(am.g, DMatrix::from_element(1, 1, 1.0));
        // h column signs follow the multiplier order
        let h_expected = [1.0, -1.0, -1.0, 1.0, 0.0, 0.0];
        for (k, &e) in h_expected.iter().enumerate() {
            assert_relative_eq!(am.h[(0, k)], e);
        }
        assert_relative_eq!(am.p_vec[0], 30.0, max_relative = 1e-12);
        // eta = 0 gives the unconstrained minimizer p
        let f = am.f_star(&DVector::zeros(6));
        assert_relative_eq!(f[0], 30.0, max_relative = 1e-12);
    }

    #[test]
    fn q_is_h_transpose() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        assert_eq!(am.q_mat, am.h.transpose());
    }

    #[test]
    fn p_matches_per_eta_linear_solve() {
        // solve the stationarity system independently for random eta and
        // compare to the affine form
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let eta = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 3.0);
            // G zeta = H eta + w ; x = (zeta - b)/(2a) ; G^T f = x0 - x
            let h = &am.h * &eta + DVector::from_vec(vec![params[0].w, params[1].w]);
            let zeta = am.g.clone().lu().solve(&h).unwrap();
            let x = DVector::from_fn(2, |i, _| (zeta[i] - params[i].b) / (2.0 * params[i].a));
            let f = am.g.transpose().lu().solve(&(&pd.x0 - &x)).unwrap();
            let f_form = am.f_star(&eta);
            assert_relative_eq!(f, f_form, epsilon = 1e-10);
        }
    }

    #[test]
    fn stationarity_zero_at_inner_minimizer() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let eta = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 2.0);
            let zeta = am.zeta_star(&eta);
            let x = am.x_star(&zeta);
            let f = am.f_star(&eta);
            let r = kkt_residuals(&net, &pd, &params, &x, &f, &zeta, &eta);
            assert!(r.stationarity_x < 1e-10, "stationarity_x = {}", r.stationarity_x);
            assert!(r.stationarity_f < 1e-10, "stationarity_f = {}", r.stationarity_f);
            assert!(r.primal_eq < 1e-10, "primal_eq = {}", r.primal_eq);
        }
    }

    #[test]
    fn lipschitz_bound_on_f_star() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let e1 = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 5.0);
            let e2 = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 5.0);
            let lhs = (am.f_star(&e1) - am.f_star(&e2)).norm();
            let rhs = am.delta * (&e1 - &e2).norm();
            assert!(lhs <= rhs + 1e-12);
        }
    }

    #[test]
    fn dual_function_concave_along_segments() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let psi = |eta: &DVector<f64>| {
            let zeta = am.zeta_star(eta);
            let x = am.x_star(&zeta);
            let f = am.f_star(eta);
            lagrangian(&net, &pd, &params, &x, &f, &zeta, eta)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let e1 = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 4.0);
            let e2 = DVector::from_fn(12, |_, _| rng.gen::<f64>() * 4.0);
            let mid = (&e1 + &e2) * 0.5;
            assert!(psi(&mid) >= 0.5 * (psi(&e1) + psi(&e2)) - 1e-9);
        }
    }

    #[test]
    fn objective_values() {
        let params = vec![CellParams::<f64> {
            rho_cg: 300.0,
            rho_cr: 120.0,
            omega: 2.0,
            demand_supply: crate::ctm::DemandSupplySpec::balanced(120.0, 300.0, 1.0),
            a: 1.0,
            b: 2.0,
            c: 3.0,
            w: 4.0,
        }];
        let x = DVector::from_vec(vec![5.0]);
        let f = DVector::from_vec(vec![6.0]);
        assert_relative_eq!(objective(&params, &x, &f).unwrap(), 62.0);
        let zero = DVector::from_vec(vec![0.0]);
        assert_relative_eq!(objective(&params, &zero, &zero).unwrap(), 3.0);
        assert!(matches!(
            objective(&params, &DVector::zeros(2), &zero),
            Err(QpError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn quadratic_in_f_expansion_agrees() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![params[0].a, params[1].a]));
        let b = DVector::from_vec(vec![params[0].b, params[1].b]);
        let w = DVector::from_vec(vec![params[0].w, params[1].w]);
        let c_sum: f64 = params.iter().map(|p| p.c).sum();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let f = DVector::from_fn(2, |_, _| rng.gen::<f64>() * 10.0);
            let x = &pd.x0 - am.g.transpose() * &f;
            let direct = objective(&params, &x, &f).unwrap();
            let gagt = &am.g * &a * am.g.transpose();
            let lin = (-(&a * &pd.x0).transpose() * am.g.transpose() * 2.0
                - b.transpose() * am.g.transpose()
                + w.transpose())
            .transpose();
            let expanded = (f.transpose() * &gagt * &f)[(0, 0)]
                + lin.dot(&f)
                + (pd.x0.transpose() * &a * &pd.x0)[(0, 0)]
                + b.dot(&pd.x0)
                + c_sum;
            assert_relative_eq!(direct, expanded, epsilon = 1e-9);
        }
    }

    #[test]
    fn kkt_flags_bad_points() {
        let (net, params, pd) = tandem_instance();
        let am = build_matrices(&net, &pd, &params).unwrap();
        let eta = DVector::zeros(12);
        let zeta = am.zeta_star(&eta);
        let x = am.x_star(&zeta);
        // feasible but not stationary in f
        let f = DVector::from_vec(vec![1.0, 1.0]);
        let r = kkt_residuals(&net, &pd, &params, &x, &f, &zeta, &eta);
        assert!(r.stationarity_f > 0.0 || r.primal_eq > 0.0);
        // negative multiplier entry is reported
        let mut eta_bad = eta;
        eta_bad[0] = -0.5;
        let r = kkt_residuals(&net, &pd, &params, &x, &f, &zeta, &eta_bad);
        assert!(r.dual_min < 0.0);
    }
}
