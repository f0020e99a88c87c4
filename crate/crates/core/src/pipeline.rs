//! Offline construction and online evaluation of parametric HJB feedback laws.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::basis::{adaptive_partition, GreedyConfig, LinearizedFamily, ParameterPartition};
use crate::domain::{build_grids, ComponentDistribution, GridConfig, TensorGrid};
use crate::error::{Error, Result};
use crate::hjb::{
    policy_iteration, value_iteration, DirectModel, HjbFeedback, SlConfig, TabulatedModel,
    ValueField,
};
use crate::model::{
    closed_loop_cost, ControlGrid, CostReport, GaussianEnsemble, Horizon, LinearFeedback,
    ParameterDomain, QuadraticCost, SeparableControlSystem, Stepper, StepperConfig, ZeroControl,
};
use crate::reduced::{build_tables, Coefficients, EvaluationTable, ReducedCost};
use crate::riccati::{lqr_gain, solve_are, AreProblem};

/// Everything needed to pose one parametric control problem.
pub struct Problem {
    pub name: String,
    pub system: SeparableControlSystem,
    pub cost: QuadraticCost,
    pub domain: ParameterDomain,
    pub controls: ControlGrid,
    pub ensemble: GaussianEnsemble,
    pub stepper: StepperConfig,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("system", &self.system)
            .field("domain", &self.domain)
            .field("controls", &self.controls.len())
            .field("stepper", &self.stepper)
            .finish()
    }
}

impl Problem {
    /// Riccati data of the linearization at the origin.
    pub fn are_problem(&self, mu: &[f64]) -> Result<AreProblem> {
        let n = self.system.state_dim();
        let m = self.system.control_dim();
        let (a, b) = self.system.linearize(&vec![0.0; n], &vec![0.0; m], mu)?;
        AreProblem::new(
            a,
            b,
            self.cost.state_matrix(n, mu),
            self.cost.control_matrix(mu),
            self.cost.discount,
        )
    }
}

impl LinearizedFamily for Problem {
    fn problem(&self, mu: &[f64]) -> Result<AreProblem> {
        self.are_problem(mu)
    }
}

/// Settings of the offline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineConfig {
    pub greedy: GreedyConfig,
    pub train_per_axis: usize,
    pub max_refine: usize,
    /// `sizes` holds the coarse and the fine axis length, in that order.
    pub grid: GridConfig,
    pub sl: SlConfig,
}

impl OfflineConfig {
    pub fn validate(&self) -> Result<()> {
        self.greedy.validate()?;
        self.sl.validate()?;
        if self.grid.sizes.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "expected a coarse and a fine grid size, got {:?}",
                self.grid.sizes
            )));
        }
        if self.train_per_axis == 0 {
            return Err(Error::InvalidInput("training set must be non-empty".into()));
        }
        Ok(())
    }

    pub fn coarse_size(&self) -> usize {
        self.grid.sizes[0]
    }

    pub fn fine_size(&self) -> usize {
        self.grid.sizes[1]
    }
}

/// Wall-clock seconds per offline phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OfflineTimings {
    pub partition: f64,
    pub grids: f64,
    pub tables: f64,
    pub value_iteration: f64,
}

impl OfflineTimings {
    pub fn total(&self) -> f64 {
        self.partition + self.grids + self.tables + self.value_iteration
    }
}

/// Provenance of a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub benchmark: String,
    /// Benchmark settings needed to rebuild the problem.
    pub problem: serde_json::Value,
    pub seed: u64,
    pub version: String,
    pub timings: OfflineTimings,
}

/// Offline data of one parameter box.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxData {
    pub distributions: Vec<ComponentDistribution>,
    pub coarse: TensorGrid,
    pub fine: TensorGrid,
    /// Tables on the fine grid.
    pub table: EvaluationTable,
    /// Value iteration result at the barycenter on the coarse grid.
    pub field: ValueField,
    pub vi_iterations: usize,
    pub vi_converged: bool,
}

/// Result of the offline stage.
#[derive(Debug, Clone)]
pub struct OfflineBundle {
    pub meta: BundleMeta,
    pub config: OfflineConfig,
    pub partition: ParameterPartition,
    pub boxes: Vec<BoxData>,
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

/// Partition, grids, fine tables and coarse barycenter value functions.
pub fn offline_build(
    problem: &Problem,
    cfg: &OfflineConfig,
    seed: u64,
    problem_spec: serde_json::Value,
) -> Result<OfflineBundle> {
    cfg.validate()?;
    let mut timings = OfflineTimings::default();
    let partition = timed(&mut timings.partition, || {
        adaptive_partition(
            &problem.domain,
            &cfg.greedy,
            cfg.train_per_axis,
            cfg.max_refine,
            problem,
        )
    })
    .map_err(|e| e.in_phase("partition"))?;
    log::info!("partition: {} boxes, max depth {}", partition.len(), partition.max_depth());

    let grids = timed(&mut timings.grids, || {
        let sampler = problem.ensemble.sampler()?;
        build_grids(&partition, &problem.system, &sampler, problem.stepper, &cfg.grid, seed)
    })
    .map_err(|e| e.in_phase("grids"))?;

    let tables = timed(&mut timings.tables, || {
        partition
            .bases
            .iter()
            .zip(&grids)
            .map(|(basis, g)| build_tables(&problem.system, basis, &g.grids[1]))
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.in_phase("tables"))?;

    let fields = timed(&mut timings.value_iteration, || {
        partition
            .boxes
            .iter()
            .zip(&partition.bases)
            .zip(&grids)
            .map(|((b, basis), g)| {
                let mu = b.barycenter();
                let coarse = &g.grids[0];
                let table = build_tables(&problem.system, basis, coarse)?;
                let model = TabulatedModel::new(
                    &table,
                    coarse,
                    &Coefficients::at(&problem.system, &mu),
                    ReducedCost::new(&problem.cost, basis).at(&mu),
                )?;
                let start = ValueField::constant(coarse.clone(), 0.0, 0.0)?;
                value_iteration(&start, &model, &problem.controls, &cfg.sl)
            })
            .collect::<Result<Vec<_>>>()
    })
    .map_err(|e| e.in_phase("value_iteration"))?;

    let boxes = grids
        .into_iter()
        .zip(tables)
        .zip(fields)
        .map(|((g, table), vi)| {
            let mut levels = g.grids.into_iter();
            let coarse = levels.next().expect("coarse grid");
            let fine = levels.next().expect("fine grid");
            BoxData {
                distributions: g.distributions,
                coarse,
                fine,
                table,
                field: vi.field,
                vi_iterations: vi.iterations,
                vi_converged: vi.converged,
            }
        })
        .collect();
    Ok(OfflineBundle {
        meta: BundleMeta {
            benchmark: problem.name.clone(),
            problem: problem_spec,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timings,
        },
        config: cfg.clone(),
        partition,
        boxes,
    })
}

/// Settings of an online query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineConfig {
    pub horizon: Horizon,
    /// Also run the uncontrolled and the LQR closed loops.
    pub references: bool,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            horizon: Horizon::default(),
            references: true,
        }
    }
}

/// Wall-clock seconds per online step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OnlineTimings {
    pub refine: f64,
    pub simulation: f64,
}

/// Costs of the closed loops started from one initial state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunCosts {
    pub hjb: CostReport,
    pub uncontrolled: Option<CostReport>,
    pub lqr: Option<CostReport>,
    /// Feedback queries where every candidate left the grid.
    pub saturated: usize,
}

/// Result of an online query.
#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub box_index: usize,
    pub field: ValueField,
    pub pi_iterations: usize,
    pub pi_converged: bool,
    /// Full-order evaluations performed during the refinement.
    pub pi_full_evaluations: u64,
    pub timings: OnlineTimings,
    pub runs: Vec<RunCosts>,
}

/// Fine-grid value function at `mu`: the coarse barycenter field is
/// interpolated to the fine grid and refined by policy iteration on the tables.
pub fn refine_value(
    bundle: &OfflineBundle,
    problem: &Problem,
    box_index: usize,
    mu: &[f64],
) -> Result<crate::hjb::SolveReport> {
    let data = &bundle.boxes[box_index];
    let basis = &bundle.partition.bases[box_index];
    let model = TabulatedModel::new(
        &data.table,
        &data.fine,
        &Coefficients::at(&problem.system, mu),
        ReducedCost::new(&problem.cost, basis).at(mu),
    )?;
    let initial = data.field.resample(&data.fine)?;
    policy_iteration(&initial, &model, &problem.controls, &bundle.config.sl)
}

/// Same refinement with full-order evaluations in place of the tables.
pub fn refine_value_direct(
    bundle: &OfflineBundle,
    problem: &Problem,
    box_index: usize,
    mu: &[f64],
) -> Result<crate::hjb::SolveReport> {
    let data = &bundle.boxes[box_index];
    let basis = &bundle.partition.bases[box_index];
    let model = DirectModel::new(&data.fine, &problem.system, basis, mu, problem.cost.at(mu))?;
    let initial = data.field.resample(&data.fine)?;
    policy_iteration(&initial, &model, &problem.controls, &bundle.config.sl)
}

/// LQR gain of the linearization at the origin.
pub fn lqr_feedback(problem: &Problem, mu: &[f64]) -> Result<LinearFeedback> {
    let prob = problem.are_problem(mu)?;
    let sol = solve_are(&prob)?;
    Ok(LinearFeedback {
        gain: lqr_gain(&prob, &sol),
    })
}

/// Locates `mu`, refines the value function and runs the closed loops.
pub fn online_query(
    bundle: &OfflineBundle,
    problem: &Problem,
    mu: &[f64],
    initial_states: &[DVector<f64>],
    cfg: &OnlineConfig,
) -> Result<OnlineResult> {
    let box_index = bundle.partition.locate(mu)?;
    let mut timings = OnlineTimings::default();
    let before = problem.system.evaluation_count();
    let start = Instant::now();
    let refined = refine_value(bundle, problem, box_index, mu)?;
    timings.refine = start.elapsed().as_secs_f64();
    let pi_full_evaluations = problem.system.evaluation_count() - before;
    if !refined.converged {
        log::warn!("policy iteration at {mu:?} did not converge");
    }

    let start = Instant::now();
    let basis = &bundle.partition.bases[box_index];
    let frozen = problem.cost.at(mu);
    let sl = &bundle.config.sl;
    let lqr = if cfg.references {
        Some(lqr_feedback(problem, mu)?)
    } else {
        None
    };
    let mut stepper = Stepper::new(&problem.system, mu, problem.stepper)?;
    let mut runs = Vec::with_capacity(initial_states.len());
    for x0 in initial_states {
        let mut feedback = HjbFeedback::new(
            &refined.field,
            basis,
            &problem.system,
            &problem.controls,
            frozen.clone(),
            mu,
            sl.dt,
            sl.discount,
        )?;
        let hjb = closed_loop_cost(&mut stepper, &frozen, x0.as_slice(), &mut feedback, cfg.horizon)?;
        let uncontrolled = if cfg.references {
            Some(closed_loop_cost(
                &mut stepper,
                &frozen,
                x0.as_slice(),
                &mut ZeroControl,
                cfg.horizon,
            )?)
        } else {
            None
        };
        let lqr = match &lqr {
            Some(gain) => Some(closed_loop_cost(
                &mut stepper,
                &frozen,
                x0.as_slice(),
                &mut gain.clone(),
                cfg.horizon,
            )?),
            None => None,
        };
        runs.push(RunCosts {
            hjb,
            uncontrolled,
            lqr,
            saturated: feedback.saturation_count(),
        });
    }
    timings.simulation = start.elapsed().as_secs_f64();
    Ok(OnlineResult {
        box_index,
        field: refined.field,
        pi_iterations: refined.iterations,
        pi_converged: refined.converged,
        pi_full_evaluations,
        timings,
        runs,
    })
}

/// Median seconds of `reps` refinements at `mu`, with tables and with direct evaluations.
pub fn time_refinement(
    bundle: &OfflineBundle,
    problem: &Problem,
    mu: &[f64],
    reps: usize,
) -> Result<(f64, f64)> {
    let box_index = bundle.partition.locate(mu)?;
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut tab = Vec::with_capacity(reps);
    let mut direct = Vec::with_capacity(reps);
    for _ in 0..reps.max(1) {
        let start = Instant::now();
        refine_value(bundle, problem, box_index, mu)?;
        tab.push(start.elapsed().as_secs_f64());
        let start = Instant::now();
        refine_value_direct(bundle, problem, box_index, mu)?;
        direct.push(start.elapsed().as_secs_f64());
    }
    Ok((median(tab), median(direct)))
}
