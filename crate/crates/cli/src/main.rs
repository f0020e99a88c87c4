//! `parahjb` command-line tool: offline builds, online queries, experiment tables
//! and single closed-loop simulations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use parahjb::hjb::HjbFeedback;
use parahjb::model::{simulate, Controller, Trajectory, ZeroControl};
use parahjb::pipeline::{lqr_feedback, offline_build, online_query, refine_value, OfflineBundle, OnlineConfig, Problem};
use parahjb_bench::experiments::{
    burgers_ratio_rows, heat_ratio_rows, run_table1, speedup, write_csv, BurgersRatioConfig,
    HeatRatioConfig, Table1Config,
};
use parahjb_bench::{BenchmarkId, BenchmarkSpec, RunConfig};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Bench(#[from] parahjb_bench::Error),

    #[error(transparent)]
    Core(#[from] parahjb::Error),

    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config {path}: {source}")]
    Config {
        path: PathBuf,
        source: toml::de::Error,
    },

    #[error("{0}")]
    Usage(String),
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "parahjb", version, about = "Reduced HJB feedback control for parametrized PDE benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the basis partition, grids, tables and coarse value functions.
    Offline {
        #[arg(long)]
        benchmark: BenchmarkId,
        /// TOML file with `benchmark`, `offline` and `online` sections.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Interior nodes per axis, overriding the config.
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Refine the value function at one parameter and compare closed loops.
    Online {
        #[arg(long)]
        bundle: PathBuf,
        /// Comma-separated parameter vector.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        num_ics: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Reproduce one of the experiment tables from a bundle.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        table: Table,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate one closed loop and write the trajectory summary.
    Simulate {
        #[arg(long)]
        benchmark: BenchmarkId,
        #[arg(long, default_value = "none")]
        controller: ControllerKind,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        mu: Vec<f64>,
        /// Required for the HJB controller.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long, default_value_t = 5.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Table {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Speedup,
    HeatRatio,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ControllerKind {
    None,
    Lqr,
    Hjb,
}

#[derive(Serialize)]
struct OnlineRow {
    ic: usize,
    #[serde(rename = "J_uncontrolled")]
    uncontrolled: Option<f64>,
    #[serde(rename = "J_lqr")]
    lqr: Option<f64>,
    #[serde(rename = "J_hjb")]
    hjb: f64,
    saturated: usize,
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    state_norm: f64,
    running_cost: f64,
    control: String,
}

fn load_config(id: BenchmarkId, path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else {
        return Ok(RunConfig::default_for(id));
    };
    let text = std::fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: RunConfig = toml::from_str(&text).map_err(|source| CliError::Config {
        path: path.to_path_buf(),
        source,
    })?;
    if cfg.benchmark.id() != id {
        return Err(CliError::Usage(format!(
            "config describes {} but --benchmark is {id}",
            cfg.benchmark.id()
        )));
    }
    Ok(cfg)
}

fn load_bundle(dir: &Path) -> Result<(BenchmarkSpec, Problem, OfflineBundle)> {
    let bundle = OfflineBundle::load(dir)?;
    let spec = BenchmarkSpec::from_json(&bundle.meta.problem)?;
    let problem = spec.build()?;
    Ok((spec, problem, bundle))
}

fn expect_benchmark(spec: &BenchmarkSpec, id: BenchmarkId, table: &str) -> Result<()> {
    if spec.id() != id {
        return Err(CliError::Usage(format!(
            "table {table} needs a {id} bundle, got {}",
            spec.id()
        )));
    }
    Ok(())
}

fn offline(id: BenchmarkId, config: Option<&Path>, resolution: Option<usize>, out: &Path, seed: u64) -> Result<()> {
    let mut cfg = load_config(id, config)?;
    if let Some(k) = resolution {
        cfg.benchmark = cfg.benchmark.with_resolution(k);
    }
    let problem = cfg.benchmark.build()?;
    let bundle = offline_build(&problem, &cfg.offline, seed, cfg.benchmark.to_json())?;
    bundle.save(out)?;
    let t = bundle.meta.timings;
    log::info!(
        "{id}: {} boxes, partition {:.2}s, grids {:.2}s, tables {:.2}s, value iteration {:.2}s",
        bundle.partition.len(),
        t.partition,
        t.grids,
        t.tables,
        t.value_iteration
    );
    println!("bundle written to {}", out.display());
    Ok(())
}

fn online(dir: &Path, mu: &[f64], num_ics: usize, seed: u64, report: &Path) -> Result<()> {
    let (_, problem, bundle) = load_bundle(dir)?;
    let ics = problem.ensemble.sample_initial(num_ics, seed)?;
    let result = online_query(&bundle, &problem, mu, &ics, &OnlineConfig::default())?;
    let rows: Vec<OnlineRow> = result
        .runs
        .iter()
        .enumerate()
        .map(|(ic, run)| OnlineRow {
            ic,
            uncontrolled: run.uncontrolled.map(|r| r.cost),
            lqr: run.lqr.map(|r| r.cost),
            hjb: run.hjb.cost,
            saturated: run.saturated,
        })
        .collect();
    write_csv(report, &rows).map_err(CliError::from)?;
    println!(
        "box {}, {} policy iterations (converged: {}), {} full-order evaluations during refinement",
        result.box_index, result.pi_iterations, result.pi_converged, result.pi_full_evaluations
    );
    Ok(())
}

fn evaluate(dir: &Path, table: Table, out: &Path, seed: u64) -> Result<()> {
    let (spec, problem, bundle) = load_bundle(dir)?;
    match table {
        Table::One => {
            let BenchmarkSpec::Test1(s) = &spec else {
                return expect_benchmark(&spec, BenchmarkId::Test1, "1");
            };
            let cfg = Table1Config {
                spec: s.clone(),
                seed,
                ..Table1Config::default()
            };
            write_csv(out, &run_table1(&cfg)?)?;
        }
        Table::Two => {
            expect_benchmark(&spec, BenchmarkId::Test3, "2")?;
            let cfg = BurgersRatioConfig::default();
            let ics = problem.ensemble.sample_initial(cfg.n_ics, seed)?;
            let rows = burgers_ratio_rows(&problem, &bundle, &cfg.a_values, &ics, cfg.horizon)?;
            write_csv(out, &rows)?;
        }
        Table::HeatRatio => {
            expect_benchmark(&spec, BenchmarkId::Test2, "heat-ratio")?;
            let cfg = HeatRatioConfig::default();
            let ics = problem.ensemble.sample_initial(cfg.n_ics, seed)?;
            let depth = bundle.config.max_refine;
            let rows = heat_ratio_rows(&problem, &bundle, depth, &cfg.parameters, &ics, cfg.horizon)?;
            write_csv(out, &rows)?;
        }
        Table::Speedup => {
            write_csv(out, &speedup(&problem, &bundle, 10, 1, seed)?)?;
        }
    }
    println!("table written to {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn simulate_one(
    id: BenchmarkId,
    kind: ControllerKind,
    mu: &[f64],
    bundle_dir: Option<&Path>,
    resolution: Option<usize>,
    t_end: f64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let (problem, bundle) = match bundle_dir {
        Some(dir) => {
            if resolution.is_some() {
                return Err(CliError::Usage("--resolution cannot be combined with --bundle".into()));
            }
            let (spec, problem, bundle) = load_bundle(dir)?;
            expect_benchmark(&spec, id, "simulate")?;
            (problem, Some(bundle))
        }
        None => {
            let mut spec = BenchmarkSpec::default_for(id);
            if let Some(k) = resolution {
                spec = spec.with_resolution(k);
            }
            (spec.build()?, None)
        }
    };
    if !problem.domain.contains(mu) {
        return Err(CliError::Usage(format!("parameter {mu:?} lies outside the parameter domain")));
    }
    let x0: DVector<f64> = problem.ensemble.sample_initial(1, seed)?.remove(0);
    let trajectory = match kind {
        ControllerKind::None => run(&problem, &x0, &mut ZeroControl, mu, t_end)?,
        ControllerKind::Lqr => run(&problem, &x0, &mut lqr_feedback(&problem, mu)?, mu, t_end)?,
        ControllerKind::Hjb => {
            let Some(bundle) = &bundle else {
                return Err(CliError::Usage("the hjb controller needs --bundle".into()));
            };
            let i = bundle.partition.locate(mu)?;
            let refined = refine_value(bundle, &problem, i, mu)?;
            let sl = &bundle.config.sl;
            let mut feedback = HjbFeedback::new(
                &refined.field,
                &bundle.partition.bases[i],
                &problem.system,
                &problem.controls,
                problem.cost.at(mu),
                mu,
                sl.dt,
                sl.discount,
            )?;
            run(&problem, &x0, &mut feedback, mu, t_end)?
        }
    };
    let cost = problem.cost.at(mu);
    let rows: Vec<TrajectoryRow> = trajectory
        .times
        .iter()
        .zip(&trajectory.states)
        .zip(&trajectory.controls)
        .map(|((&t, y), u)| TrajectoryRow {
            t,
            state_norm: y.norm(),
            running_cost: cost.running(y.as_slice(), u.as_slice()),
            control: u.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
        })
        .collect();
    write_csv(out, &rows)?;
    println!("{} steps written to {}", rows.len(), out.display());
    Ok(())
}

fn run(problem: &Problem, x0: &DVector<f64>, controller: &mut dyn Controller, mu: &[f64], t_end: f64) -> Result<Trajectory> {
    Ok(simulate(&problem.system, x0.as_slice(), controller, mu, problem.stepper, t_end)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Offline {
            benchmark,
            config,
            resolution,
            out,
            seed,
        } => offline(benchmark, config.as_deref(), resolution, &out, seed),
        Command::Online {
            bundle,
            mu,
            num_ics,
            seed,
            report,
        } => online(&bundle, &mu, num_ics, seed, &report),
        Command::Evaluate {
            bundle,
            table,
            out,
            seed,
        } => evaluate(&bundle, table, &out, seed),
        Command::Simulate {
            benchmark,
            controller,
            mu,
            bundle,
            resolution,
            t_end,
            seed,
            out,
        } => simulate_one(benchmark, controller, &mu, bundle.as_deref(), resolution, t_end, seed, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
