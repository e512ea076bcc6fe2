//! Independent reference solver for the per-cycle program, backed by an
//! interior-point conic solver. Used to cross-check the dual
//! gradient-projection implementations; never called on the control path.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus,
};
use nalgebra::{DMatrix, DVector};

use crate::ctm::{CellParams, ProblemData};
use crate::network::Network;
use crate::qp::{build_matrices, QpError};

/// Primal and dual variables of a reference solve.
#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub x: DVector<f64>,
    pub f: DVector<f64>,
    pub zeta: DVector<f64>,
    pub eta: DVector<f64>,
    pub objective: f64,
}

fn to_csc(m: &DMatrix<f64>) -> CscMatrix<f64> {
    let mut colptr = Vec::with_capacity(m.ncols() + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    colptr.push(0);
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            let v = m[(r, c)];
            if v != 0.0 {
                rowval.push(r);
                nzval.push(v);
            }
        }
        colptr.push(nzval.len());
    }
    CscMatrix::new(m.nrows(), m.ncols(), colptr, rowval, nzval)
}

/// Solve the cycle program to high accuracy, returning flows, volumes and
/// both multiplier families.
pub fn oracle_solve_full(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
) -> Result<OracleSolution, QpError> {
    let n = net.len();
    let am = build_matrices(net, pd, params)?;

    // eliminate x = x0 - G^T f: minimize f^T (G A G^T) f + l^T f over
    // Q f + q <= 0
    let a_diag = DVector::from_fn(n, |i, _| params[i].a);
    let a_mat = DMatrix::from_diagonal(&a_diag);
    let b = DVector::from_fn(n, |i, _| params[i].b);
    let w = DVector::from_fn(n, |i, _| params[i].w);

    let p_hess = (&am.g * &a_mat * am.g.transpose()) * 2.0;
    let lin = -(&am.g * &a_mat * &pd.x0) * 2.0 - &am.g * &b + &w;

    let p_csc = to_csc(&p_hess);
    let a_csc = to_csc(&am.q_mat);
    let rhs: Vec<f64> = am.q_vec.iter().map(|v| -v).collect();
    let cones = [NonnegativeConeT(am.q_mat.nrows())];

    let settings = DefaultSettings {
        verbose: false,
        tol_gap_abs: 1e-11,
        tol_gap_rel: 1e-11,
        tol_feas: 1e-11,
        tol_ktratio: 1e-7,
        max_iter: 200,
        ..DefaultSettings::default()
    };

    let mut solver = DefaultSolver::new(
        &p_csc,
        lin.as_slice(),
        &a_csc,
        &rhs,
        &cones,
        settings,
    );
    solver.solve();

    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => {}
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(QpError::Infeasible)
        }
        other => return Err(QpError::OracleFailure(format!("{:?}", other))),
    }

    let f = DVector::from_column_slice(&solver.solution.x);
    let eta = DVector::from_column_slice(&solver.solution.z);
    let x = &pd.x0 - am.g.transpose() * &f;
    let zeta = DVector::from_fn(n, |i, _| 2.0 * params[i].a * x[i] + params[i].b);
    let objective = crate::qp::objective(params, &x, &f)?;

    Ok(OracleSolution { x, f, zeta, eta, objective })
}

/// Reference optimal flows only.
pub fn oracle_solve(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
) -> Result<DVector<f64>, QpError> {
    oracle_solve_full(net, pd, params).map(|s| s.f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctm::{assemble_problem, CycleInputs};
    use crate::network::{fig1_network, CellDesc, Network, NetworkDescription, TurnDesc};
    use crate::qp::{constraint_values, kkt_residuals};
    use approx::assert_relative_eq;

    /// Brute-force solve for tiny instances: enumerate active sets of the
    /// box constraints on f after sampling a fine grid, then polish with a
    /// projected coordinate search. Deliberately naive and independent.
    fn grid_refine_solve(
        net: &Network,
        pd: &ProblemData<f64>,
        params: &[CellParams<f64>],
    ) -> DVector<f64> {
        let n = net.len();
        let am = build_matrices(net, pd, params).unwrap();
        let feasible = |f: &DVector<f64>| {
            constraint_values(net, pd, f).iter().all(|&g| g <= 1e-9)
        };
        let cost = |f: &DVector<f64>| {
            let x = &pd.x0 - am.g.transpose() * f;
            crate::qp::objective(params, &x, f).unwrap()
        };
        let mut best = DVector::<f64>::zeros(n);
        assert!(feasible(&best), "zero flow must be feasible");
        let mut best_cost = cost(&best);
        // coordinate descent with shrinking step
        let mut step = pd.f_upper.max() / 2.0;
        while step > 1e-10 {
            let mut improved = true;
            while improved {
                improved = false;
                for i in 0..n {
                    for dir in [-1.0, 1.0] {
                        let mut cand = best.clone();
                        cand[i] += dir * step;
                        if cand[i] < -1e-12 {
                            continue;
                        }
                        if feasible(&cand) {
                            let c = cost(&cand);
                            if c < best_cost - 1e-14 {
                                best = cand;
                                best_cost = c;
                                improved = true;
                            }
                        }
                    }
                }
            }
            step *= 0.5;
        }
        best
    }

    fn tandem() -> (Network, Vec<CellParams<f64>>, ProblemData<f64>) {
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
        let params = vec![
            CellParams::urban_defaults(true, false),
            CellParams::urban_defaults(false, true),
        ];
        let mut inputs = CycleInputs::quiescent(vec![150.0, 90.0], 90.0);
        inputs.mu_nominal[0] = 12.0;
        inputs.mu_lower[0] = 10.0;
        inputs.mu_upper[0] = 14.0;
        let pd = assemble_problem(&net, &params, &inputs).unwrap();
        (net, params, pd)
    }

    #[test]
    fn oracle_satisfies_kkt_on_tandem() {
        let (net, params, pd) = tandem();
        let sol = oracle_solve_full(&net, &pd, &params).unwrap();
        let r = kkt_residuals(&net, &pd, &params, &sol.x, &sol.f, &sol.zeta, &sol.eta);
        assert!(r.max_abs() < 1e-6, "kkt residual {:?}", r);
    }

    #[test]
    fn oracle_matches_naive_search_on_tandem() {
        let (net, params, pd) = tandem();
        let sol = oracle_solve_full(&net, &pd, &params).unwrap();
        let naive = grid_refine_solve(&net, &pd, &params);
        assert_relative_eq!(sol.f, naive, epsilon = 1e-5);
    }

    #[test]
    fn oracle_satisfies_kkt_on_intersection_network() {
        let net = fig1_network(0.05);
        let n = net.len();
        let params: Vec<CellParams<f64>> = (0..n)
            .map(|i| {
                let cell = crate::network::CellId(i);
                CellParams::urban_defaults(
                    net.source(cell) == crate::network::NodeId::Exterior,
                    net.sink(cell) == crate::network::NodeId::Exterior,
                )
            })
            .collect();
        let mut inputs = CycleInputs::quiescent(vec![100.0; n], 90.0);
        for i in 0..n {
            if net.source(crate::network::CellId(i)) == crate::network::NodeId::Exterior {
                inputs.mu_nominal[i] = 8.0;
                inputs.mu_lower[i] = 7.0;
                inputs.mu_upper[i] = 9.0;
            }
        }
        let pd = assemble_problem(&net, &params, &inputs).unwrap();
        let sol = oracle_solve_full(&net, &pd, &params).unwrap();
        let r = kkt_residuals(&net, &pd, &params, &sol.x, &sol.f, &sol.zeta, &sol.eta);
        assert!(r.max_abs() < 1e-6, "kkt residual {:?}", r);
        // constraints hold
        let g = constraint_values(&net, &pd, &sol.f);
        assert!(g.iter().all(|&v| v <= 1e-7));
    }

    #[test]
    fn infeasible_instance_is_reported() {
        let (net, params, mut pd) = tandem();
        // force an empty feasible set: require positive flow out of cell 1
        // (lambda bound negative) while capping it at zero
        pd.x_lower[0] = -5.0;
        pd.f_upper[0] = 0.0;
        match oracle_solve(&net, &pd, &params) {
            Err(QpError::Infeasible) => {}
            other => panic!("expected infeasibility, got {:?}", other.map(|f| f[0])),
        }
    }
}
