//! Multi-cycle simulation driver: demand sampling, controller dispatch,
//! realized dynamics, metrics, the fixed-time baseline and the sweep-count
//! comparison experiment.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::centralized::{self, SolveError, SolveOptions};
use crate::ctm::{assemble_problem, step_dynamics, CellParams, CtmError, CycleInputs, ProblemData};
use crate::distributed::{distributed_solve, DistributedError, ProtocolConfig};
use crate::final_value::HankelDetector;
use crate::network::{CellId, Network, NetworkError, NodeId};
use crate::qp::{build_matrices, QpError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Ctm(#[from] CtmError),
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Distributed(#[from] DistributedError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Controller {
    Fixed,
    Centralized,
    Distributed,
}

impl std::str::FromStr for Controller {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fixed" => Ok(Controller::Fixed),
            "centralized" => Ok(Controller::Centralized),
            "distributed" => Ok(Controller::Distributed),
            other => Err(format!("unknown controller '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub cycles: usize,
    /// Signal cycle length in seconds.
    pub cycle_time: f64,
    /// Demand level: source inflow is `q_in * (1 + 0.1 * U[0,1])`.
    pub q_in: f64,
    pub seed: u64,
    /// Relative half-width of turning-ratio uncertainty.
    pub delta_r: f64,
    pub controller: Controller,
    pub step_safety: f64,
    pub delta_tol: f64,
    /// Vehicles entering per source approach and cycle per unit of `q_in`.
    /// Calibrated so the nominal demand level sits near the equal-split
    /// service rate of one signal phase: differences between control
    /// strategies vanish in both deep free flow and deep saturation.
    pub inflow_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            cycles: 100,
            cycle_time: 90.0,
            q_in: 100.0,
            seed: 1,
            delta_r: 0.05,
            controller: Controller::Centralized,
            step_safety: 0.9,
            delta_tol: 1e-14,
            inflow_scale: 0.4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub avg_cost: f64,
    pub total_outflow: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub per_cycle: Vec<CycleMetrics>,
    /// Cycles where the primary controller failed and the fixed-time
    /// fallback was used instead.
    pub fallback_cycles: usize,
    pub d_max: Option<usize>,
}

impl Metrics {
    pub fn mean_avg_cost(&self) -> f64 {
        mean(self.per_cycle.iter().map(|c| c.avg_cost))
    }
    pub fn mean_total_outflow(&self) -> f64 {
        mean(self.per_cycle.iter().map(|c| c.total_outflow))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in it {
        s += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Standard per-cell parameters for a network.
pub fn default_params(net: &Network) -> Vec<CellParams<f64>> {
    (0..net.len())
        .map(|i| {
            let c = CellId(i);
            CellParams::urban_defaults(
                net.source(c) == NodeId::Exterior,
                net.sink(c) == NodeId::Exterior,
            )
        })
        .collect()
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x.wrapping_mul(0x94D0_49BB_1331_11EB)
}

/// Feasible non-optimizing baseline: equal green split per intersection,
/// then one damping pass so no downstream cell is oversupplied.
pub fn fixed_time_controller(
    net: &Network,
    pd: &ProblemData<f64>,
    _params: &[CellParams<f64>],
) -> DVector<f64> {
    let n = net.len();
    let mut f = DVector::zeros(n);
    for i in 0..n {
        let cell = CellId(i);
        let mut fi = pd.f_upper[i].min(pd.x_lower[i]).max(0.0);
        if net.sink(cell) != NodeId::Exterior {
            let phases = net.same_sink(cell).count().max(1) as f64;
            fi = fi.min(pd.cycle_time / phases / pd.v[i]);
        }
        f[i] = fi;
    }
    // cap inflows at each receiving cell's supply and spare capacity
    let mut factor = vec![1.0f64; n];
    for j in 0..n {
        let cell = CellId(j);
        let inflow: f64 = net
            .upstream(cell)
            .map(|i| net.ratio_upper(i, cell) * f[i.0])
            .sum();
        if inflow > 0.0 {
            let cap = pd.s_upper[j].min(pd.x_upper[j]).max(0.0);
            factor[j] = (cap / inflow).min(1.0);
        }
    }
    for i in 0..n {
        let cell = CellId(i);
        let damp = net
            .downstream(cell)
            .map(|j| factor[j.0])
            .fold(1.0f64, f64::min);
        f[i] *= damp;
    }
    f
}

/// Sample realized turning ratios entrywise inside their uncertainty
/// bounds; the robust constraints hold for any such draw.
fn sample_realized_ratios(net: &Network, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = net.len();
    let mut r = DMatrix::zeros(n, n);
    for i in 0..n {
        let cell = CellId(i);
        for j in net.downstream(cell) {
            let lo = net.ratio_lower(cell, j);
            let hi = net.ratio_upper(cell, j);
            r[(i, j.0)] = lo + (hi - lo) * rng.gen::<f64>();
        }
    }
    r
}

/// Solve one assembled cycle program with the selected controller.
/// Returns the flow vector, iteration count and `D_max` when applicable.
pub fn solve_cycle(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
    cfg: &SimConfig,
) -> Result<(DVector<f64>, usize, Option<usize>), HarnessError> {
    match cfg.controller {
        Controller::Fixed => Ok((fixed_time_controller(net, pd, params), 0, None)),
        Controller::Centralized => {
            let opts = SolveOptions {
                step_safety: cfg.step_safety,
                delta_tol: cfg.delta_tol,
                ..SolveOptions::default()
            };
            let rep = centralized::solve(net, pd, params, &opts)?;
            Ok((rep.f_opt, rep.iterations, None))
        }
        Controller::Distributed => {
            let am = build_matrices(net, pd, params)?;
            let eps = centralized::step_size(&am, cfg.step_safety)?;
            let pcfg = ProtocolConfig {
                epsilon: eps,
                delta: cfg.delta_tol * (1.0 + am.q_vec.norm()),
                seed: cfg.seed,
                ..ProtocolConfig::default()
            };
            let rep = distributed_solve(net, pd, params, &pcfg)?;
            Ok((rep.f, rep.outer_iterations, Some(rep.d_max)))
        }
    }
}

/// Run `cfg.cycles` signal cycles on `net`; deterministic under the seed.
pub fn run_simulation(net: &Network, cfg: &SimConfig) -> Result<Metrics, HarnessError> {
    if cfg.cycles == 0 {
        return Err(HarnessError::Config("cycles must be >= 1".into()));
    }
    if cfg.q_in < 0.0 {
        return Err(HarnessError::Config("q_in must be >= 0".into()));
    }
    let n = net.len();
    let params = default_params(net);
    let is_source: Vec<bool> = (0..n)
        .map(|i| net.source(CellId(i)) == NodeId::Exterior)
        .collect();
    // one RNG stream per cell so topology edits don't shift other cells
    let mut cell_rngs: Vec<ChaCha8Rng> = (0..n)
        .map(|i| ChaCha8Rng::seed_from_u64(mix(cfg.seed, net.external_id(CellId(i)) as u64)))
        .collect();
    let mut ratio_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, u64::MAX));

    let q_cell = cfg.q_in * cfg.inflow_scale;

    let mut rho = vec![0.0f64; n];
    let mut per_cycle = Vec::with_capacity(cfg.cycles);
    let mut fallback_cycles = 0;
    let mut d_max_seen = None;

    for cycle in 0..cfg.cycles {
        let mut inputs = CycleInputs::quiescent(rho.clone(), cfg.cycle_time);
        let mut mu_real = DVector::zeros(n);
        for i in 0..n {
            if !is_source[i] {
                continue;
            }
            let headroom = (params[i].rho_cg - rho[i]).max(0.0);
            let draw = q_cell * (1.0 + 0.1 * cell_rngs[i].gen::<f64>());
            inputs.mu_upper[i] = (1.1 * q_cell).min(headroom);
            inputs.mu_lower[i] = q_cell.min(inputs.mu_upper[i]);
            inputs.mu_nominal[i] = draw.clamp(inputs.mu_lower[i], inputs.mu_upper[i]);
            mu_real[i] = inputs.mu_nominal[i];
        }
        let pd = assemble_problem(net, &params, &inputs)?;
        let (f, iterations, d_max) = match solve_cycle(net, &pd, &params, cfg) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("cycle {cycle}: controller failed ({e}); fixed-time fallback");
                fallback_cycles += 1;
                (fixed_time_controller(net, &pd, &params), 0, None)
            }
        };
        if let Some(d) = d_max {
            d_max_seen = Some(d_max_seen.map_or(d, |m: usize| m.max(d)));
        }
        let realized_r = sample_realized_ratios(net, &mut ratio_rng);
        let rho_vec = DVector::from_column_slice(&rho);
        let mut next = step_dynamics(net, &rho_vec, &f, &realized_r, &mu_real)?;
        for v in next.iter_mut() {
            if *v < 0.0 {
                log::warn!("cycle {cycle}: clamping tiny negative volume {v}");
                *v = 0.0;
            }
        }
        rho = next.iter().copied().collect();

        let volume: f64 = rho.iter().sum();
        let avg_cost = if volume > 0.0 {
            rho.iter()
                .zip(&params)
                .map(|(r, p)| p.a * r * r)
                .sum::<f64>()
                / volume
        } else {
            0.0
        };
        // everything not routed to another cell leaves the network,
        // whether at a boundary sink or a mid-link destination
        let total_outflow: f64 = (0..n)
            .map(|i| f[i] * (1.0 - realized_r.row(i).sum()))
            .sum();
        per_cycle.push(CycleMetrics { cycle, avg_cost, total_outflow, iterations });
    }

    Ok(Metrics { per_cycle, fallback_cycles, d_max: d_max_seen })
}

#[derive(Debug, Clone, Serialize)]
pub struct Table1Row {
    pub m: usize,
    pub n: usize,
    pub cells: usize,
    /// Naive Jacobi sweeps to reach the tolerance.
    pub naive_sweeps: usize,
    /// Max per-cell observations with the final-value shortcut.
    pub d_max: usize,
}

/// Compare plain Jacobi iteration counts against the final-value
/// observation counts on synthetic grids.
pub fn table1_experiment(
    dims: &[(usize, usize)],
    tol: f64,
    delta_r: f64,
    seed: u64,
) -> Result<Vec<Table1Row>, HarnessError> {
    let mut rows = Vec::new();
    for &(m, n) in dims {
        let net = crate::network::grid_network(m, n, crate::network::GridParams { delta_r, ..Default::default() })?;
        let cells = net.len();
        let params = default_params(&net);
        let inputs = CycleInputs::quiescent(vec![60.0; cells], 90.0);
        let pd = assemble_problem(&net, &params, &inputs)?;
        let (r, _, _, _) = net.turning_matrices::<f64>();
        let w = DVector::from_fn(cells, |i, _| params[i].w);
        let xstar = DVector::from_fn(cells, |i, _| -params[i].b / (2.0 * params[i].a));
        let flow_const = &pd.x0 - &xstar;

        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, (m * 1000 + n) as u64));
        let y0 = DVector::from_fn(cells, |_, _| rng.gen::<f64>());

        let naive = |mat: &DMatrix<f64>, c: &DVector<f64>| -> usize {
            let mut y = y0.clone();
            for sweep in 1..100_000 {
                let next = mat * &y + c;
                let delta = (&next - &y).amax();
                y = next;
                if delta < tol {
                    return sweep;
                }
            }
            100_000
        };
        let naive_sweeps = naive(&r, &w).max(naive(&r.transpose(), &flow_const));

        let shortcut = |mat: &DMatrix<f64>, c: &DVector<f64>| -> Result<usize, HarnessError> {
            let mut dets: Vec<HankelDetector<f64>> =
                (0..cells).map(|_| HankelDetector::new()).collect();
            let mut y = y0.clone();
            let mut obs = 0;
            loop {
                let mut done = true;
                for (i, d) in dets.iter_mut().enumerate() {
                    if !d.observe(y[i]) {
                        done = false;
                    }
                }
                obs += 1;
                if done {
                    break;
                }
                if obs > 4 * cells + 8 {
                    return Err(HarnessError::Config("no Hankel defect found".into()));
                }
                y = mat * &y + c;
            }
            Ok(dets.iter().map(|d| d.observations()).max().unwrap_or(0))
        };
        let d_max = shortcut(&r, &w)?.max(shortcut(&r.transpose(), &flow_const)?);

        rows.push(Table1Row { m, n, cells, naive_sweeps, d_max });
    }
    Ok(rows)
}

/// Largest singular value via power iteration on `M^T M`.
fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let c = m.ncols();
    if c == 0 {
        return 0.0;
    }
    let mt = m.transpose();
    let mut v = DVector::from_element(c, (c as f64).sqrt().recip());
    let mut sigma_sq = 0.0;
    for _ in 0..300 {
        let w = &mt * (m * &v);
        let n2 = w.norm();
        if n2 == 0.0 {
            return 0.0;
        }
        v = w / n2;
        sigma_sq = n2;
    }
    sigma_sq.sqrt()
}

/// Per-iteration multiplier step norms of a centralized solve (plateau
/// profile data). Uses the sharper spectral-norm step bound rather than
/// the cheap Frobenius one.
pub fn eta_trajectory(
    net: &Network,
    pd: &ProblemData<f64>,
    params: &[CellParams<f64>],
    safety: f64,
    iterations: usize,
) -> Result<Vec<f64>, HarnessError> {
    let am = build_matrices(net, pd, params)?;
    let denom = operator_norm(&am.q_mat) * operator_norm(&am.p_mat);
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(HarnessError::Config("degenerate operator norms".into()));
    }
    let eps = safety * 2.0 / denom;
    let mut eta = DVector::<f64>::zeros(am.q_mat.nrows());
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let grad = &am.q_mat * am.f_star(&eta) + &am.q_vec;
        let mut next = &eta + grad * eps;
        for v in next.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        out.push((&next - &eta).norm());
        eta = next;
    }
    Ok(out)
}

/// Write the per-cycle CSV and a JSON run manifest next to it.
pub fn emit_outputs(
    metrics: &Metrics,
    cfg: &SimConfig,
    csv_path: &Path,
    manifest_path: Option<&Path>,
) -> Result<(), HarnessError> {
    let mut wtr = csv::Writer::from_path(csv_path)?;
    wtr.write_record(["cycle", "avg_cost", "total_outflow", "iterations"])?;
    for c in &metrics.per_cycle {
        wtr.write_record([
            c.cycle.to_string(),
            format!("{:.10}", c.avg_cost),
            format!("{:.10}", c.total_outflow),
            c.iterations.to_string(),
        ])?;
    }
    wtr.flush()?;
    if let Some(path) = manifest_path {
        let manifest = serde_json::json!({
            "config": cfg,
            "version": env!("CARGO_PKG_VERSION"),
            "cycles_run": metrics.per_cycle.len(),
            "fallback_cycles": metrics.fallback_cycles,
            "d_max": metrics.d_max,
            "mean_avg_cost": metrics.mean_avg_cost(),
            "mean_total_outflow": metrics.mean_total_outflow(),
        });
        let mut fh = std::fs::File::create(path)?;
        writeln!(fh, "{}", serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    }
    Ok(())
}
