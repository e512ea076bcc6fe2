//! Command-line front end: multi-cycle simulation, sweep-count comparison
//! tables, single-cycle solves and grid scenario generation.
//!
//! Exit codes: 0 success, 2 solver failure, 3 configuration error.
//! Set `CTMFLOW_LOG` (or `RUST_LOG`) to control log verbosity.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctmflow::ctm::{assemble_problem, CycleInputs};
use ctmflow::harness::{
    default_params, emit_outputs, run_simulation, solve_cycle, table1_experiment, Controller,
    HarnessError, SimConfig,
};
use ctmflow::network::{grid_description, grid_network, CellId, GridParams, Network, NetworkDescription, NodeId};

#[derive(Parser)]
#[command(name = "ctmflow", version, about = "Urban traffic-flow control over a cell transmission model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct NetworkArgs {
    /// Network description JSON file; mutually exclusive with --m/--n.
    #[arg(long, conflicts_with_all = ["m", "n"])]
    network: Option<PathBuf>,
    /// Grid rows (intersections).
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Grid columns (intersections).
    #[arg(long, default_value_t = 2)]
    n: usize,
    /// Relative half-width of turning-ratio uncertainty.
    #[arg(long, default_value_t = 0.05)]
    delta_r: f64,
    /// Share of each grid cell's outflow exiting mid-link.
    #[arg(long, default_value_t = 0.2)]
    exit_share: f64,
}

impl NetworkArgs {
    fn load(&self) -> Result<Network, CliError> {
        match &self.network {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
                let desc = NetworkDescription::from_json(&text)
                    .map_err(|e| CliError::Config(format!("bad network JSON: {e}")))?;
                Network::build(&desc).map_err(|e| CliError::Config(e.to_string()))
            }
            None => grid_network(
                self.m,
                self.n,
                GridParams { delta_r: self.delta_r, exit_share: self.exit_share },
            )
            .map_err(|e| CliError::Config(e.to_string())),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a multi-cycle closed-loop simulation and write per-cycle metrics.
    Simulate {
        #[command(flatten)]
        net: NetworkArgs,
        /// Number of signal cycles.
        #[arg(long, default_value_t = 100)]
        cycles: usize,
        /// Cycle length in seconds.
        #[arg(long, default_value_t = 90.0)]
        cycle_time: f64,
        /// Source inflow level; each cycle draws q_in * (1 + 0.1 * U[0,1]).
        #[arg(long, default_value_t = 100.0)]
        q_in: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "centralized")]
        controller: Controller,
        /// Per-cycle metrics CSV path.
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Run manifest JSON path.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare naive sweep counts against final-value observation counts.
    Table1 {
        /// Grid dimensions, e.g. "2x2,2x5,5x5,5x10".
        #[arg(long, default_value = "2x2,2x5,5x5,5x10")]
        dims: String,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        #[arg(long, default_value_t = 0.05)]
        delta_r: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assemble and solve a single cycle's program, printing the flows.
    SolveOnce {
        #[command(flatten)]
        net: NetworkArgs,
        /// Uniform initial volume per cell.
        #[arg(long, default_value_t = 100.0)]
        rho: f64,
        /// Nominal inflow at source cells for this cycle.
        #[arg(long, default_value_t = 100.0)]
        q_in: f64,
        #[arg(long, default_value_t = 90.0)]
        cycle_time: f64,
        #[arg(long, default_value = "centralized")]
        controller: Controller,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Emit a grid network description JSON.
    GenGrid {
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 0.05)]
        delta_r: f64,
        #[arg(long, default_value_t = 0.2)]
        exit_share: f64,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Config(String),
    Solver(String),
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(m) => CliError::Config(m),
            HarnessError::Network(e) => CliError::Config(e.to_string()),
            HarnessError::Ctm(e) => CliError::Config(e.to_string()),
            other => CliError::Solver(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            net,
            cycles,
            cycle_time,
            q_in,
            seed,
            controller,
            out,
            manifest,
        } => {
            let network = net.load()?;
            let cfg = SimConfig {
                cycles,
                cycle_time,
                q_in,
                seed,
                delta_r: net.delta_r,
                controller,
                ..SimConfig::default()
            };
            let metrics = run_simulation(&network, &cfg)?;
            emit_outputs(&metrics, &cfg, &out, manifest.as_deref())?;
            log::info!(
                "{} cycles done: mean avg cost {:.4}, mean outflow {:.4}",
                metrics.per_cycle.len(),
                metrics.mean_avg_cost(),
                metrics.mean_total_outflow()
            );
            Ok(())
        }
        Command::Table1 { dims, tol, delta_r, seed, out } => {
            let parsed = parse_dims(&dims)?;
            let rows = table1_experiment(&parsed, tol, delta_r, seed)?;
            let mut text = String::from("m,n,cells,naive_sweeps,d_max\n");
            for r in &rows {
                text.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.m, r.n, r.cells, r.naive_sweeps, r.d_max
                ));
            }
            match out {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::SolveOnce { net, rho, q_in, cycle_time, controller, seed } => {
            let network = net.load()?;
            let n = network.len();
            let params = default_params(&network);
            let mut inputs = CycleInputs::quiescent(vec![rho; n], cycle_time);
            for i in 0..n {
                if network.source(CellId(i)) == NodeId::Exterior {
                    let cap = (params[i].rho_cg - rho).max(0.0);
                    inputs.mu_upper[i] = (1.1 * q_in).min(cap);
                    inputs.mu_lower[i] = q_in.min(inputs.mu_upper[i]);
                    inputs.mu_nominal[i] = inputs.mu_lower[i];
                }
            }
            let pd = assemble_problem(&network, &params, &inputs)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let cfg = SimConfig { q_in, cycle_time, seed, controller, ..SimConfig::default() };
            let (f, iterations, d_max) = solve_cycle(&network, &pd, &params, &cfg)?;
            let report = serde_json::json!({
                "iterations": iterations,
                "d_max": d_max,
                "flows": f.iter().copied().collect::<Vec<f64>>(),
                "cells": (0..n).map(|i| network.external_id(CellId(i))).collect::<Vec<u32>>(),
            });
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            Ok(())
        }
        Command::GenGrid { m, n, delta_r, exit_share, out } => {
            let desc = grid_description(m, n, GridParams { delta_r, exit_share })
                .map_err(|e| CliError::Config(e.to_string()))?;
            let text = desc.to_json();
            match out {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))?,
                None => println!("{text}"),
            }
            Ok(())
        }
    }
}

fn parse_dims(s: &str) -> Result<Vec<(usize, usize)>, CliError> {
    s.split(',')
        .map(|part| {
            let (a, b) = part
                .trim()
                .split_once('x')
                .ok_or_else(|| CliError::Config(format!("bad dims entry '{part}', expected MxN")))?;
            let m = a.parse().map_err(|_| CliError::Config(format!("bad rows in '{part}'")))?;
            let n = b.parse().map_err(|_| CliError::Config(format!("bad cols in '{part}'")))?;
            Ok((m, n))
        })
        .collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(
        env_logger::Env::new().filter_or("CTMFLOW_LOG", "info").write_style("CTMFLOW_LOG_STYLE"),
    )
    .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Solver(msg)) => {
            eprintln!("solver failure: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Config(msg)) => {
            eprintln!("configuration error: {msg}");
            ExitCode::from(3)
        }
    }
}
