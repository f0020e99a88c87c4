//! Drivers that regenerate the tabulated experiments as CSV rows.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use parahjb::basis::{project_are, GreedyConfig, ReducedBasis};
use parahjb::domain::{collect_snapshots, fit_reduced, tensor_grid, GridConfig, TensorGrid, DEFAULT_COVERAGE};
use parahjb::hjb::{policy_iteration, HjbFeedback, SlConfig, TabulatedModel, ValueField};
use parahjb::linalg;
use parahjb::model::{
    closed_loop_cost, Controller, CostReport, Horizon, LinearFeedback, Stepper, ZeroControl,
};
use parahjb::pipeline::{
    lqr_feedback, offline_build, online_query, refine_value, time_refinement, OfflineBundle,
    OfflineConfig, OnlineConfig, Problem,
};
use parahjb::reduced::{build_tables, Coefficients, ReducedCost};
use parahjb::riccati::{lqr_gain, solve_are};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{BenchmarkId, BenchmarkSpec, Error, Result, Test1Spec, Test2Spec, Test3Spec};

/// `0, step, 2 step, …, t_end`.
pub fn snapshot_times(step: f64, t_end: f64) -> Vec<f64> {
    let count = (t_end / step).round() as usize;
    (0..=count).map(|k| k as f64 * step).collect()
}

/// Offline settings used when none are given.
pub fn default_offline(id: BenchmarkId) -> OfflineConfig {
    match id {
        BenchmarkId::Test1 => OfflineConfig {
            greedy: GreedyConfig {
                tol: 0.9,
                pod_tol: 1e-2,
                max_size: 5,
            },
            train_per_axis: 3,
            max_refine: 3,
            grid: GridConfig {
                sizes: vec![9, 25],
                coverage: DEFAULT_COVERAGE,
                n_train: 100,
                times: snapshot_times(0.25, 2.0),
            },
            sl: SlConfig::new(0.05, 1e-3).expect("valid"),
        },
        BenchmarkId::Test2 => OfflineConfig {
            greedy: GreedyConfig {
                tol: 1e-3,
                pod_tol: 1e-2,
                max_size: 3,
            },
            train_per_axis: 3,
            max_refine: 3,
            grid: GridConfig {
                sizes: vec![9, 17],
                coverage: DEFAULT_COVERAGE,
                n_train: 100,
                times: snapshot_times(0.05, 0.5),
            },
            sl: SlConfig::new(0.05, 1e-3).expect("valid"),
        },
        BenchmarkId::Test3 => OfflineConfig {
            greedy: GreedyConfig {
                tol: 1e-12,
                pod_tol: 1e-2,
                max_size: 2,
            },
            train_per_axis: 3,
            max_refine: 0,
            grid: GridConfig {
                sizes: vec![9, 15],
                coverage: DEFAULT_COVERAGE,
                n_train: 100,
                times: snapshot_times(0.25, 2.0),
            },
            sl: SlConfig::new(0.05, 1e-4).expect("valid"),
        },
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// `count` parameters drawn uniformly from the problem's domain.
pub fn random_parameters(problem: &Problem, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            problem
                .domain
                .lower()
                .iter()
                .zip(problem.domain.upper())
                .map(|(&lo, &hi)| rng.random_range(lo..=hi))
                .collect()
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Discounted closed-loop cost, `None` when the run diverged.
fn run_cost(
    problem: &Problem,
    mu: &[f64],
    x0: &DVector<f64>,
    controller: &mut dyn Controller,
    horizon: Horizon,
) -> Result<Option<CostReport>> {
    let mut stepper = Stepper::new(&problem.system, mu, problem.stepper)?;
    match closed_loop_cost(&mut stepper, &problem.cost.at(mu), x0.as_slice(), controller, horizon) {
        Ok(r) => Ok(Some(r)),
        Err(parahjb::Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Closed-loop costs of the HJB feedback built from `field` on `basis`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_costs(
    problem: &Problem,
    basis: &ReducedBasis,
    field: &ValueField,
    sl: &SlConfig,
    mu: &[f64],
    initial_states: &[DVector<f64>],
    horizon: Horizon,
) -> Result<Vec<Option<CostReport>>> {
    let frozen = problem.cost.at(mu);
    initial_states
        .iter()
        .map(|x0| {
            let mut fb = HjbFeedback::new(
                field,
                basis,
                &problem.system,
                &problem.controls,
                frozen.clone(),
                mu,
                sl.dt,
                sl.discount,
            )?;
            run_cost(problem, mu, x0, &mut fb, horizon)
        })
        .collect()
}

fn costs_with(
    problem: &Problem,
    mu: &[f64],
    initial_states: &[DVector<f64>],
    controller: &dyn Fn() -> Box<dyn Controller>,
    horizon: Horizon,
) -> Result<Vec<Option<CostReport>>> {
    initial_states
        .iter()
        .map(|x0| run_cost(problem, mu, x0, controller().as_mut(), horizon))
        .collect()
}

/// Quadratic value `xᵀ P x` of the reduced LQR problem sampled on `grid`.
fn quadratic_field(p: &DMatrix<f64>, grid: &TensorGrid) -> Result<ValueField> {
    let mut x = vec![0.0; grid.dim()];
    let values = (0..grid.num_nodes())
        .map(|k| {
            grid.node_into(k, &mut x);
            let xv = DVector::from_column_slice(&x);
            xv.dot(&(p * &xv))
        })
        .collect();
    Ok(ValueField::new(grid.clone(), values, 0.0)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    NonEquidistant,
    Equidistant,
}

/// Fixed-basis comparison of reduced LQR and HJB controllers against the full LQR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table1Config {
    pub spec: Test1Spec,
    /// `(μ_diff, μ_adv)`.
    pub mu: [f64; 2],
    pub dims: Vec<usize>,
    pub grid_sizes: Vec<usize>,
    pub grid_kinds: Vec<GridKind>,
    pub n_test: usize,
    pub n_train: usize,
    pub snapshot_times: Vec<f64>,
    pub coverage: f64,
    pub sl: SlConfig,
    pub horizon: Horizon,
    /// Grids with more nodes than this are skipped.
    pub max_nodes: usize,
    /// Caps the SL step at `bound / ρ(ΨᵀAΨ)` so the explicit foot step stays stable;
    /// explicit Euler is stable on the negative real axis for `dt ρ < 2`.
    pub foot_step_bound: Option<f64>,
    pub seed: u64,
}

impl Default for Table1Config {
    fn default() -> Self {
        Self {
            spec: Test1Spec::default(),
            mu: [0.08, 3.0],
            dims: (1..=5).collect(),
            grid_sizes: vec![31, 11],
            grid_kinds: vec![GridKind::Equidistant, GridKind::NonEquidistant],
            n_test: 100,
            n_train: 100,
            snapshot_times: snapshot_times(0.25, 2.0),
            coverage: DEFAULT_COVERAGE,
            sl: SlConfig::new(0.05, 1e-3).expect("valid"),
            horizon: Horizon::default(),
            max_nodes: 200_000,
            foot_step_bound: Some(1.8),
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub ell: usize,
    /// `lqr` or `hjb`.
    pub controller: String,
    pub grid_points: Option<usize>,
    pub grid_kind: Option<GridKind>,
    pub nodes: Option<usize>,
    /// Mean of `|J − J_LQR| / J_LQR` over the runs that stayed bounded; `inf` if any diverged.
    pub mean_rel_error: f64,
    pub diverged: usize,
    pub pi_iterations: Option<usize>,
    pub sl_dt: Option<f64>,
    pub seconds: f64,
}

/// `min(dt, bound / ρ(a))`.
pub fn bounded_sl_step(a: &DMatrix<f64>, dt: f64, bound: f64) -> Result<f64> {
    let radius = linalg::eigenvalues(a)?
        .into_iter()
        .map(|(re, im)| re.hypot(im))
        .fold(0.0, f64::max);
    Ok(if radius > 0.0 { dt.min(bound / radius) } else { dt })
}

fn relative_errors(costs: &[Option<CostReport>], reference: &[f64]) -> (f64, usize) {
    let mut errs = Vec::with_capacity(costs.len());
    let mut diverged = 0;
    for (c, r) in costs.iter().zip(reference) {
        match c {
            Some(c) => errs.push((c.cost - r).abs() / r.abs()),
            None => diverged += 1,
        }
    }
    let m = if diverged > 0 { f64::INFINITY } else { mean(&errs) };
    (m, diverged)
}

/// Approximation error of reduced controllers at a fixed parameter, with the
/// basis made of the leading left singular vectors of the full ARE solution.
pub fn run_table1(cfg: &Table1Config) -> Result<Vec<Table1Row>> {
    let problem = cfg.spec.build()?;
    let mu = cfg.mu.to_vec();
    let prob = problem.are_problem(&mu)?;
    let sol = solve_are(&prob)?;
    let full = LinearFeedback {
        gain: lqr_gain(&prob, &sol),
    };
    let (_, u) = linalg::left_singular(&sol.p)?;
    let ics = problem.ensemble.sample_initial(cfg.n_test, cfg.seed)?;
    let reference: Vec<f64> = costs_with(&problem, &mu, &ics, &|| Box::new(full.clone()), cfg.horizon)?
        .into_iter()
        .map(|c| c.map(|c| c.cost).ok_or_else(|| Error::Invalid("full LQR run diverged".into())))
        .collect::<Result<_>>()?;
    let sampler = problem.ensemble.sampler()?;
    let snaps = collect_snapshots(
        &problem.system,
        &sampler,
        &mu,
        &mut ZeroControl,
        problem.stepper,
        &cfg.snapshot_times,
        cfg.n_train,
        cfg.seed.wrapping_add(1),
    )?;
    let mut rows = Vec::new();
    for &ell in &cfg.dims {
        let basis = ReducedBasis::from_orthonormal(u.columns(0, ell).into_owned())?;
        let start = Instant::now();
        let reduced = project_are(&prob, &basis);
        let rsol = solve_are(&reduced)?;
        let gain = lqr_gain(&reduced, &rsol) * basis.matrix().transpose();
        let lqr = LinearFeedback { gain };
        let costs = costs_with(&problem, &mu, &ics, &|| Box::new(lqr.clone()), cfg.horizon)?;
        let (err, diverged) = relative_errors(&costs, &reference);
        log::info!("table1 ell={ell} lqr: {err:e} ({diverged} diverged)");
        rows.push(Table1Row {
            ell,
            controller: "lqr".into(),
            grid_points: None,
            grid_kind: None,
            nodes: None,
            mean_rel_error: err,
            diverged,
            pi_iterations: None,
            sl_dt: None,
            seconds: start.elapsed().as_secs_f64(),
        });
        let mut sl = cfg.sl;
        if let Some(bound) = cfg.foot_step_bound {
            sl.dt = bounded_sl_step(&reduced.a, sl.dt, bound)?;
        }
        let dists = fit_reduced(&snaps.matrix, &basis)?;
        for &h in &cfg.grid_sizes {
            for &kind in &cfg.grid_kinds {
                let base = tensor_grid(&dists, &vec![h; ell], cfg.coverage)?;
                let grid = match kind {
                    GridKind::NonEquidistant => base,
                    GridKind::Equidistant => base.equidistant_like(h)?,
                };
                if grid.num_nodes() > cfg.max_nodes {
                    log::info!("table1 ell={ell} h={h}: skipped ({} nodes)", grid.num_nodes());
                    continue;
                }
                let start = Instant::now();
                let table = build_tables(&problem.system, &basis, &grid)?;
                let model = TabulatedModel::new(
                    &table,
                    &grid,
                    &Coefficients::at(&problem.system, &mu),
                    ReducedCost::new(&problem.cost, &basis).at(&mu),
                )?;
                let initial = quadratic_field(&rsol.p, &grid)?;
                let solved = policy_iteration(&initial, &model, &problem.controls, &sl)?;
                let costs = hjb_costs(&problem, &basis, &solved.field, &sl, &mu, &ics, cfg.horizon)?;
                let (err, diverged) = relative_errors(&costs, &reference);
                log::info!("table1 ell={ell} h={h} {kind:?}: {err:e} ({diverged} diverged)");
                rows.push(Table1Row {
                    ell,
                    controller: "hjb".into(),
                    grid_points: Some(h),
                    grid_kind: Some(kind),
                    nodes: Some(grid.num_nodes()),
                    mean_rel_error: err,
                    diverged,
                    pi_iterations: Some(solved.iterations),
                    sl_dt: Some(sl.dt),
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
    }
    Ok(rows)
}

/// LQR versus HJB cost ratios of the cubic reaction problem for several partition depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatRatioConfig {
    pub spec: Test2Spec,
    pub offline: OfflineConfig,
    pub depths: Vec<usize>,
    pub parameters: Vec<f64>,
    pub n_ics: usize,
    pub horizon: Horizon,
    pub seed: u64,
}

impl Default for HeatRatioConfig {
    fn default() -> Self {
        Self {
            spec: Test2Spec::default(),
            offline: default_offline(BenchmarkId::Test2),
            depths: vec![1, 3],
            parameters: (0..=10).map(|i| 2.0 + 0.5 * i as f64).collect(),
            n_ics: 100,
            horizon: Horizon::default(),
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatRatioRow {
    pub depth: usize,
    pub boxes: usize,
    pub mu: f64,
    /// `barycenter` for the offline value function, `refined` after online policy iteration.
    pub field: String,
    /// Mean over initial states of `J_LQR / J_HJB`.
    pub ratio_mean: f64,
    pub lqr_mean: f64,
    pub hjb_mean: f64,
    pub diverged: usize,
}

fn ratio_row(
    depth: usize,
    boxes: usize,
    mu: f64,
    field: &str,
    lqr: &[Option<CostReport>],
    hjb: &[Option<CostReport>],
) -> HeatRatioRow {
    let mut ratios = Vec::new();
    let mut l = Vec::new();
    let mut h = Vec::new();
    let mut diverged = 0;
    for (a, b) in lqr.iter().zip(hjb) {
        match (a, b) {
            (Some(a), Some(b)) => {
                ratios.push(a.cost / b.cost);
                l.push(a.cost);
                h.push(b.cost);
            }
            _ => diverged += 1,
        }
    }
    HeatRatioRow {
        depth,
        boxes,
        mu,
        field: field.into(),
        ratio_mean: if ratios.is_empty() { f64::NAN } else { mean(&ratios) },
        lqr_mean: mean(&l),
        hjb_mean: mean(&h),
        diverged,
    }
}

/// Offline bundle of the cubic reaction problem refined to exactly `depth` levels.
pub fn heat_bundle(spec: &Test2Spec, offline: &OfflineConfig, depth: usize, seed: u64) -> Result<(Problem, OfflineBundle)> {
    let problem = spec.build()?;
    let mut cfg = offline.clone();
    cfg.max_refine = depth;
    let bundle = offline_build(&problem, &cfg, seed, BenchmarkSpec::Test2(spec.clone()).to_json())?;
    Ok((problem, bundle))
}

pub fn run_heat_ratio(cfg: &HeatRatioConfig) -> Result<Vec<HeatRatioRow>> {
    let mut rows = Vec::new();
    for &depth in &cfg.depths {
        let (problem, bundle) = heat_bundle(&cfg.spec, &cfg.offline, depth, cfg.seed)?;
        let ics = problem.ensemble.sample_initial(cfg.n_ics, cfg.seed.wrapping_add(1))?;
        rows.extend(heat_ratio_rows(&problem, &bundle, depth, &cfg.parameters, &ics, cfg.horizon)?);
    }
    Ok(rows)
}

/// Ratio rows of one bundle for the barycenter and the refined value functions.
pub fn heat_ratio_rows(
    problem: &Problem,
    bundle: &OfflineBundle,
    depth: usize,
    parameters: &[f64],
    ics: &[DVector<f64>],
    horizon: Horizon,
) -> Result<Vec<HeatRatioRow>> {
    let sl = &bundle.config.sl;
    let boxes = bundle.partition.len();
    let mut rows = Vec::new();
    for &m in parameters {
        let mu = [m];
        let gain = lqr_feedback(problem, &mu)?;
        let lqr = costs_with(problem, &mu, ics, &|| Box::new(gain.clone()), horizon)?;
        let i = bundle.partition.locate(&mu)?;
        let basis = &bundle.partition.bases[i];
        let bary = hjb_costs(problem, basis, &bundle.boxes[i].field, sl, &mu, ics, horizon)?;
        rows.push(ratio_row(depth, boxes, m, "barycenter", &lqr, &bary));
        let refined = refine_value(bundle, problem, i, &mu)?;
        let fine = hjb_costs(problem, basis, &refined.field, sl, &mu, ics, horizon)?;
        rows.push(ratio_row(depth, boxes, m, "refined", &lqr, &fine));
        log::info!(
            "heat ratio depth={depth} mu={m}: barycenter {:.4}, refined {:.4}",
            rows[rows.len() - 2].ratio_mean,
            rows[rows.len() - 1].ratio_mean
        );
    }
    Ok(rows)
}

/// Controlled versus uncontrolled costs of the Burgers problem at `μ = (a, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BurgersRatioConfig {
    pub spec: Test3Spec,
    pub offline: OfflineConfig,
    pub a_values: Vec<f64>,
    pub n_ics: usize,
    pub horizon: Horizon,
    pub seed: u64,
}

impl Default for BurgersRatioConfig {
    fn default() -> Self {
        Self {
            spec: Test3Spec::default(),
            offline: default_offline(BenchmarkId::Test3),
            a_values: vec![0.1, 2.5, 5.0],
            n_ics: 10,
            horizon: Horizon::default(),
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BurgersRatioRow {
    pub a: f64,
    /// Statistics of `J_C / J_UC` over the initial states.
    pub mean: f64,
    pub best: f64,
    pub worst: f64,
    /// Runs where the LQR closed loop cost more than the uncontrolled one.
    pub lqr_worse: usize,
    #[serde(skip)]
    pub ratios: Vec<f64>,
}

pub fn burgers_bundle(spec: &Test3Spec, offline: &OfflineConfig, seed: u64) -> Result<(Problem, OfflineBundle)> {
    let problem = spec.build()?;
    let bundle = offline_build(&problem, offline, seed, BenchmarkSpec::Test3(spec.clone()).to_json())?;
    Ok((problem, bundle))
}

pub fn run_burgers_ratio(cfg: &BurgersRatioConfig) -> Result<Vec<BurgersRatioRow>> {
    let (problem, bundle) = burgers_bundle(&cfg.spec, &cfg.offline, cfg.seed)?;
    let ics = problem.ensemble.sample_initial(cfg.n_ics, cfg.seed.wrapping_add(1))?;
    burgers_ratio_rows(&problem, &bundle, &cfg.a_values, &ics, cfg.horizon)
}

pub fn burgers_ratio_rows(
    problem: &Problem,
    bundle: &OfflineBundle,
    a_values: &[f64],
    ics: &[DVector<f64>],
    horizon: Horizon,
) -> Result<Vec<BurgersRatioRow>> {
    let online = OnlineConfig {
        horizon,
        references: true,
    };
    a_values
        .iter()
        .map(|&a| {
            let result = online_query(bundle, problem, &[a, a], ics, &online)?;
            let mut ratios = Vec::with_capacity(ics.len());
            let mut lqr_worse = 0;
            for run in &result.runs {
                let unc = run.uncontrolled.expect("references requested").cost;
                ratios.push(run.hjb.cost / unc);
                if run.lqr.is_some_and(|l| l.cost > unc) {
                    lqr_worse += 1;
                }
            }
            let row = BurgersRatioRow {
                a,
                mean: mean(&ratios),
                best: ratios.iter().copied().fold(f64::INFINITY, f64::min),
                worst: ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                lqr_worse,
                ratios,
            };
            log::info!("burgers a={a}: mean {:.4} best {:.4} worst {:.4}", row.mean, row.best, row.worst);
            Ok(row)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupRow {
    pub benchmark: String,
    /// Parameter components joined by `;`.
    pub mu: String,
    pub direct_seconds: f64,
    pub tabulated_seconds: f64,
    pub speedup: f64,
    /// Full-order evaluations during the tabulated refinement.
    pub full_evaluations: u64,
}

/// Online refinement timed with and without the precomputed tables at `count` random parameters.
pub fn speedup(problem: &Problem, bundle: &OfflineBundle, count: usize, reps: usize, seed: u64) -> Result<Vec<SpeedupRow>> {
    random_parameters(problem, count, seed)
        .into_iter()
        .map(|mu| {
            let box_index = bundle.partition.locate(&mu)?;
            let before = problem.system.evaluation_count();
            refine_value(bundle, problem, box_index, &mu)?;
            let full_evaluations = problem.system.evaluation_count() - before;
            let (tab, direct) = time_refinement(bundle, problem, &mu, reps)?;
            Ok(SpeedupRow {
                benchmark: problem.name.clone(),
                mu: mu.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";"),
                direct_seconds: direct,
                tabulated_seconds: tab,
                speedup: direct / tab,
                full_evaluations,
            })
        })
        .collect()
}
