use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::interp::{Stencil, ValueField};
use crate::basis::ReducedBasis;
use crate::domain::TensorGrid;
use crate::error::{check_dim, Error, Result};
use crate::model::{ControlGrid, FrozenCost, SeparableControlSystem};
use crate::reduced::{Coefficients, EvaluationTable, FrozenReducedCost};

/// Semi-Lagrangian scheme settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlConfig {
    /// Pseudo time step of the scheme.
    pub dt: f64,
    pub discount: f64,
    pub vi_tol: f64,
    pub vi_max_iter: usize,
    pub pi_tol: f64,
    pub pi_max_iter: usize,
    /// Residual tolerance of each policy evaluation.
    pub pe_tol: f64,
    /// Out-of-domain value; derived from the running cost when absent.
    pub penalty: Option<f64>,
}

impl SlConfig {
    pub fn new(dt: f64, discount: f64) -> Result<Self> {
        let cfg = Self {
            dt,
            discount,
            vi_tol: 1e-6,
            vi_max_iter: 100_000,
            pi_tol: 1e-8,
            pi_max_iter: 100,
            pe_tol: 1e-10,
            penalty: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !(self.discount > 0.0) {
            return Err(Error::InvalidInput(format!(
                "scheme step and discount must be > 0, got {} and {}",
                self.dt, self.discount
            )));
        }
        if !(self.vi_tol > 0.0 && self.pi_tol > 0.0 && self.pe_tol > 0.0) {
            return Err(Error::InvalidInput("tolerances must be > 0".into()));
        }
        if self.decay() >= 1.0 {
            return Err(Error::InvalidInput("discount factor of one step must be < 1".into()));
        }
        Ok(())
    }

    /// `e^{−λΔt}`.
    pub fn decay(&self) -> f64 {
        (-self.discount * self.dt).exp()
    }
}

/// Reduced dynamics and running cost at the nodes of a grid.
pub trait SlModel {
    fn grid(&self) -> &TensorGrid;
    /// Writes the reduced velocity `Φ(x_j, u)`.
    fn velocity(&self, j: usize, u: &[f64], out: &mut [f64]);
    fn state_cost(&self, j: usize) -> f64;
    fn control_cost(&self, u: &[f64]) -> f64;
}

/// Model served from precomputed evaluation tables; no full-order work.
#[derive(Debug, Clone)]
pub struct TabulatedModel<'a> {
    grid: &'a TensorGrid,
    dim: usize,
    control_dim: usize,
    drift: Vec<f64>,
    input: Vec<f64>,
    state_cost: Vec<f64>,
    cost: FrozenReducedCost,
}

impl<'a> TabulatedModel<'a> {
    /// Recombines the table for one parameter.
    pub fn new(
        table: &EvaluationTable,
        grid: &'a TensorGrid,
        coeffs: &Coefficients,
        cost: FrozenReducedCost,
    ) -> Result<Self> {
        check_dim("table nodes", grid.num_nodes(), table.num_nodes())?;
        check_dim("table dimension", grid.dim(), table.dim())?;
        let (l, m, h) = (table.dim(), table.control_dim(), table.num_nodes());
        let mut drift = vec![0.0; h * l];
        let mut input = vec![0.0; h * l * m];
        let mut state_cost = vec![0.0; h];
        let mut x = vec![0.0; l];
        for j in 0..h {
            table.drift_into(coeffs, j, &mut drift[j * l..(j + 1) * l]);
            table.input_into(coeffs, j, &mut input[j * l * m..(j + 1) * l * m]);
            grid.node_into(j, &mut x);
            state_cost[j] = cost.state_cost(&x);
        }
        Ok(Self {
            grid,
            dim: l,
            control_dim: m,
            drift,
            input,
            state_cost,
            cost,
        })
    }
}

impl SlModel for TabulatedModel<'_> {
    fn grid(&self) -> &TensorGrid {
        self.grid
    }

    fn velocity(&self, j: usize, u: &[f64], out: &mut [f64]) {
        let l = self.dim;
        out.copy_from_slice(&self.drift[j * l..(j + 1) * l]);
        let block = &self.input[j * l * self.control_dim..(j + 1) * l * self.control_dim];
        for (k, &uk) in u.iter().enumerate() {
            if uk == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&block[k * l..(k + 1) * l]) {
                *o += uk * v;
            }
        }
    }

    fn state_cost(&self, j: usize) -> f64 {
        self.state_cost[j]
    }

    fn control_cost(&self, u: &[f64]) -> f64 {
        self.cost.control_cost(u)
    }
}

/// Model evaluating the full-order dynamics and cost at every request.
pub struct DirectModel<'a> {
    grid: &'a TensorGrid,
    sys: &'a SeparableControlSystem,
    basis: &'a ReducedBasis,
    coeffs: Coefficients,
    cost: FrozenCost,
    scratch: RefCell<(Vec<f64>, Vec<f64>)>,
}

impl<'a> DirectModel<'a> {
    pub fn new(
        grid: &'a TensorGrid,
        sys: &'a SeparableControlSystem,
        basis: &'a ReducedBasis,
        mu: &[f64],
        cost: FrozenCost,
    ) -> Result<Self> {
        check_dim("basis rows", sys.state_dim(), basis.state_dim())?;
        check_dim("grid dimension", basis.len(), grid.dim())?;
        let n = sys.state_dim();
        Ok(Self {
            grid,
            sys,
            basis,
            coeffs: Coefficients::at(sys, mu),
            cost,
            scratch: RefCell::new((vec![0.0; basis.len()], vec![0.0; n])),
        })
    }
}

impl SlModel for DirectModel<'_> {
    fn grid(&self) -> &TensorGrid {
        self.grid
    }

    fn velocity(&self, j: usize, u: &[f64], out: &mut [f64]) {
        let mut scratch = self.scratch.borrow_mut();
        let (x, f) = &mut *scratch;
        self.grid.node_into(j, x);
        let y = self.basis.lift(x);
        self.sys
            .eval_with_coefficients(&self.coeffs.drift, &self.coeffs.control, y.as_slice(), u, f);
        out.copy_from_slice(self.basis.project(f).as_slice());
    }

    fn state_cost(&self, j: usize) -> f64 {
        let mut scratch = self.scratch.borrow_mut();
        let (x, _) = &mut *scratch;
        self.grid.node_into(j, x);
        self.cost.state_cost(self.basis.lift(x).as_slice())
    }

    fn control_cost(&self, u: &[f64]) -> f64 {
        self.cost.control_cost(u)
    }
}

/// `10 · Δt · g_max / (1 − e^{−λΔt})` with `g_max` over all nodes and controls.
pub fn default_penalty(model: &dyn SlModel, controls: &ControlGrid, cfg: &SlConfig) -> f64 {
    let h = model.grid().num_nodes();
    let s_max = (0..h).map(|j| model.state_cost(j)).fold(0.0, f64::max);
    let r_max = controls.iter().map(|u| model.control_cost(u)).fold(0.0, f64::max);
    10.0 * cfg.dt * (s_max + r_max) / (1.0 - cfg.decay())
}

/// Penalty used by the solvers: the configured or default value, raised to
/// at least the largest nodal value of `field`.
pub fn resolve_penalty(
    field: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    cfg: &SlConfig,
) -> f64 {
    cfg.penalty
        .unwrap_or_else(|| default_penalty(model, controls, cfg))
        .max(field.max_value())
}

struct Workspace {
    x: Vec<f64>,
    v: Vec<f64>,
    st: Stencil,
    control_costs: Vec<f64>,
}

impl Workspace {
    fn new(model: &dyn SlModel, controls: &ControlGrid) -> Self {
        let l = model.grid().dim();
        Self {
            x: vec![0.0; l],
            v: vec![0.0; l],
            st: Stencil::new(),
            control_costs: controls.iter().map(|u| model.control_cost(u)).collect(),
        }
    }

    /// Writes the foot point `x_j + Δt Φ(x_j, u)` into `self.v`.
    fn foot(&mut self, model: &dyn SlModel, j: usize, u: &[f64], dt: f64) {
        model.velocity(j, u, &mut self.v);
        for (v, x) in self.v.iter_mut().zip(&self.x) {
            *v = x + dt * *v;
        }
    }
}

/// One Bellman update of every node, with the minimizing control indices.
pub fn bellman_update(
    field: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    cfg: &SlConfig,
) -> (Vec<f64>, Vec<usize>) {
    let grid = model.grid();
    let beta = cfg.decay();
    let mut ws = Workspace::new(model, controls);
    let h = grid.num_nodes();
    let mut values = Vec::with_capacity(h);
    let mut policy = Vec::with_capacity(h);
    for j in 0..h {
        grid.node_into(j, &mut ws.x);
        let s = model.state_cost(j);
        let mut best = f64::INFINITY;
        let mut arg = 0;
        for (k, u) in controls.iter().enumerate() {
            ws.foot(model, j, u, cfg.dt);
            let val = beta * field.interpolate_with(&ws.v, &mut ws.st)
                + cfg.dt * (s + ws.control_costs[k]);
            if val < best {
                best = val;
                arg = k;
            }
        }
        values.push(best);
        policy.push(arg);
    }
    (values, policy)
}

/// `[S(V)]_j = min_u { e^{−λΔt} I[V](x_j + Δt Φ(x_j, u)) + Δt g(x_j, u) }`.
pub fn vi_sweep(
    field: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    cfg: &SlConfig,
) -> Vec<f64> {
    bellman_update(field, model, controls, cfg).0
}

/// Outcome of an iterative HJB solve.
#[derive(Debug, Clone)]
pub struct SolveReport {
    pub field: ValueField,
    pub policy: Vec<usize>,
    pub iterations: usize,
    /// Sup-norm of the last update.
    pub residual: f64,
    pub converged: bool,
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn check_model(field: &ValueField, model: &dyn SlModel, controls: &ControlGrid) -> Result<()> {
    if field.grid() != model.grid() {
        return Err(Error::InvalidInput("value field and model use different grids".into()));
    }
    if controls.is_empty() {
        return Err(Error::InvalidInput("control grid is empty".into()));
    }
    Ok(())
}

/// Fixed-point iteration of the Bellman operator.
pub fn value_iteration(
    initial: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    cfg: &SlConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_model(initial, model, controls)?;
    let penalty = resolve_penalty(initial, model, controls, cfg);
    let mut field = initial.clone().with_penalty(penalty);
    let mut residual = f64::INFINITY;
    let mut policy = Vec::new();
    for it in 1..=cfg.vi_max_iter {
        let (next, p) = bellman_update(&field, model, controls, cfg);
        residual = sup_diff(&next, field.values());
        field = field.with_values(next)?;
        policy = p;
        if residual <= cfg.vi_tol {
            return Ok(SolveReport {
                field,
                policy,
                iterations: it,
                residual,
                converged: true,
            });
        }
    }
    log::warn!(
        "value iteration stopped after {} sweeps with residual {residual:e}",
        cfg.vi_max_iter
    );
    Ok(SolveReport {
        field,
        policy,
        iterations: cfg.vi_max_iter,
        residual,
        converged: false,
    })
}

/// Sparse system `(I − e^{−λΔt} M) V = b` of a fixed policy.
struct PolicySystem {
    beta: f64,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    weights: Vec<f64>,
    rhs: Vec<f64>,
    diag: Vec<f64>,
}

impl PolicySystem {
    fn assemble(
        field: &ValueField,
        model: &dyn SlModel,
        controls: &ControlGrid,
        policy: &[usize],
        cfg: &SlConfig,
    ) -> Self {
        let grid = model.grid();
        let h = grid.num_nodes();
        let beta = cfg.decay();
        let mut ws = Workspace::new(model, controls);
        let mut row_ptr = Vec::with_capacity(h + 1);
        row_ptr.push(0);
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        let mut rhs = Vec::with_capacity(h);
        let mut diag = vec![1.0; h];
        for (j, &k) in policy.iter().enumerate() {
            grid.node_into(j, &mut ws.x);
            ws.foot(model, j, controls.get(k), cfg.dt);
            field.stencil(&ws.v, &mut ws.st);
            let mut b = cfg.dt * (model.state_cost(j) + ws.control_costs[k]);
            if ws.st.inside {
                for (&c, &w) in ws.st.nodes.iter().zip(&ws.st.weights) {
                    if c == j {
                        diag[j] -= beta * w;
                    }
                    cols.push(c);
                    weights.push(w);
                }
            } else {
                b += beta * field.penalty();
            }
            rhs.push(b);
            row_ptr.push(cols.len());
        }
        Self {
            beta,
            row_ptr,
            cols,
            weights,
            rhs,
            diag,
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.weights[p] * x[self.cols[p]];
            }
            *o = x[i] - self.beta * s;
        }
    }

    fn residual(&self, x: &[f64], r: &mut [f64]) -> f64 {
        self.apply(x, r);
        let mut worst: f64 = 0.0;
        for (ri, bi) in r.iter_mut().zip(&self.rhs) {
            *ri = bi - *ri;
            worst = worst.max(ri.abs());
        }
        worst
    }

    fn tolerance(&self, tol: f64) -> f64 {
        tol * self.rhs.iter().fold(1.0_f64, |m, b| m.max(b.abs()))
    }

    /// Jacobi-preconditioned BiCGSTAB; `None` on breakdown or stagnation.
    fn bicgstab(&self, x: &mut [f64], tol: f64, max_iter: usize) -> Option<usize> {
        let n = x.len();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let mut r = vec![0.0; n];
        if self.residual(x, &mut r) <= tol {
            return Some(0);
        }
        let r0 = r.clone();
        let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut z = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut best = f64::INFINITY;
        let mut stalls = 0;
        for it in 1..=max_iter {
            let rho_next = dot(&r0, &r);
            if rho_next == 0.0 || !rho_next.is_finite() {
                return None;
            }
            let b = (rho_next / rho) * (alpha / omega);
            rho = rho_next;
            for i in 0..n {
                p[i] = r[i] + b * (p[i] - omega * v[i]);
                y[i] = p[i] / self.diag[i];
            }
            self.apply(&y, &mut v);
            let denom = dot(&r0, &v);
            if denom == 0.0 || !denom.is_finite() {
                return None;
            }
            alpha = rho / denom;
            for i in 0..n {
                s[i] = r[i] - alpha * v[i];
                x[i] += alpha * y[i];
            }
            if s.iter().fold(0.0_f64, |m, v| m.max(v.abs())) <= tol
                && self.residual(x, &mut r) <= tol
            {
                return Some(it);
            }
            for i in 0..n {
                z[i] = s[i] / self.diag[i];
            }
            self.apply(&z, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 || !tt.is_finite() {
                return None;
            }
            omega = dot(&t, &s) / tt;
            if omega == 0.0 {
                return None;
            }
            for i in 0..n {
                x[i] += omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            let rn = r.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if rn <= tol && self.residual(x, &mut r) <= tol {
                return Some(it);
            }
            if rn < 0.5 * best {
                best = rn;
                stalls = 0;
            } else {
                stalls += 1;
                if stalls > 50 {
                    return None;
                }
            }
        }
        None
    }

    /// Richardson sweeps `V_i ← (β Σ_{k≠i} w_ik V_k + b_i) / (1 − β w_ii)`.
    fn richardson(&self, x: &mut [f64], tol: f64, max_iter: usize) -> Option<usize> {
        let n = x.len();
        let mut r = vec![0.0; n];
        for it in 1..=max_iter {
            for i in 0..n {
                let mut s = 0.0;
                for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                    if self.cols[p] != i {
                        s += self.weights[p] * x[self.cols[p]];
                    }
                }
                x[i] = (self.beta * s + self.rhs[i]) / self.diag[i];
            }
            if self.residual(x, &mut r) <= tol {
                return Some(it);
            }
        }
        None
    }
}

/// Diagnostics of one policy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvaluationReport {
    pub iterations: usize,
    pub residual: f64,
    pub used_fallback: bool,
}

/// Solves the linear system of a fixed policy, starting from the nodal values of `field`.
pub fn policy_evaluation(
    field: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    policy: &[usize],
    cfg: &SlConfig,
) -> Result<(Vec<f64>, EvaluationReport)> {
    check_model(field, model, controls)?;
    check_dim("policy", field.values().len(), policy.len())?;
    if let Some(&k) = policy.iter().find(|&&k| k >= controls.len()) {
        return Err(Error::InvalidInput(format!("policy uses unknown control index {k}")));
    }
    let sys = PolicySystem::assemble(field, model, controls, policy, cfg);
    let tol = sys.tolerance(cfg.pe_tol);
    let n = policy.len();
    let mut x = field.values().to_vec();
    let mut used_fallback = false;
    let iterations = match sys.bicgstab(&mut x, tol, 10 * n + 100) {
        Some(it) => it,
        None => {
            used_fallback = true;
            log::debug!("policy evaluation falls back to Richardson sweeps");
            x = field.values().to_vec();
            let max_iter = ((tol.ln() / cfg.decay().ln()).abs() as usize).saturating_mul(4).max(1000);
            sys.richardson(&mut x, tol, max_iter).ok_or_else(|| {
                let mut r = vec![0.0; n];
                Error::NotConverged {
                    what: "policy evaluation".into(),
                    iterations: max_iter,
                    residual: sys.residual(&x, &mut r),
                }
            })?
        }
    };
    let mut r = vec![0.0; n];
    let residual = sys.residual(&x, &mut r);
    Ok((
        x,
        EvaluationReport {
            iterations,
            residual,
            used_fallback,
        },
    ))
}

/// Alternating policy evaluation and greedy improvement, started from the
/// greedy policy of `initial`.
pub fn policy_iteration(
    initial: &ValueField,
    model: &dyn SlModel,
    controls: &ControlGrid,
    cfg: &SlConfig,
) -> Result<SolveReport> {
    cfg.validate()?;
    check_model(initial, model, controls)?;
    let penalty = resolve_penalty(initial, model, controls, cfg);
    let mut field = initial.clone().with_penalty(penalty);
    let (_, mut policy) = bellman_update(&field, model, controls, cfg);
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.pi_max_iter {
        let (values, _) = policy_evaluation(&field, model, controls, &policy, cfg)?;
        residual = sup_diff(&values, field.values());
        field = field.with_values(values)?;
        let (_, improved) = bellman_update(&field, model, controls, cfg);
        if improved == policy || residual <= cfg.pi_tol {
            return Ok(SolveReport {
                field,
                policy: improved,
                iterations: it,
                residual,
                converged: true,
            });
        }
        policy = improved;
    }
    log::warn!(
        "policy iteration stopped after {} steps with update {residual:e}",
        cfg.pi_max_iter
    );
    Ok(SolveReport {
        field,
        policy,
        iterations: cfg.pi_max_iter,
        residual,
        converged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::UnivariateGrid;
    use crate::riccati::{solve_are, AreProblem};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Closure-backed model for hand-built instances.
    struct FnModel<F, G> {
        grid: TensorGrid,
        velocity: F,
        state_cost: G,
        r: f64,
    }

    impl<F, G> SlModel for FnModel<F, G>
    where
        F: Fn(&[f64], &[f64], &mut [f64]),
        G: Fn(&[f64]) -> f64,
    {
        fn grid(&self) -> &TensorGrid {
            &self.grid
        }
        fn velocity(&self, j: usize, u: &[f64], out: &mut [f64]) {
            (self.velocity)(&self.grid.node(j), u, out)
        }
        fn state_cost(&self, j: usize) -> f64 {
            (self.state_cost)(&self.grid.node(j))
        }
        fn control_cost(&self, u: &[f64]) -> f64 {
            self.r * u.iter().map(|v| v * v).sum::<f64>()
        }
    }

    fn line(lo: f64, hi: f64, h: usize) -> TensorGrid {
        TensorGrid::new(vec![UnivariateGrid::uniform(lo, hi, h).unwrap()]).unwrap()
    }

    fn plane(h: usize) -> TensorGrid {
        let a = UnivariateGrid::uniform(-1.0, 1.0, h).unwrap();
        TensorGrid::new(vec![a.clone(), a]).unwrap()
    }

    fn cfg(dt: f64, discount: f64) -> SlConfig {
        SlConfig::new(dt, discount).unwrap()
    }

    /// `ẏ = u`, `g = y² + r u²` on `[−1, 1]`.
    fn lq_model(h: usize, r: f64) -> FnModel<impl Fn(&[f64], &[f64], &mut [f64]), impl Fn(&[f64]) -> f64> {
        FnModel {
            grid: line(-1.0, 1.0, h),
            velocity: |_x: &[f64], u: &[f64], out: &mut [f64]| out[0] = u[0],
            state_cost: |x: &[f64]| x[0] * x[0],
            r,
        }
    }

    /// Rotating, contracting planar flow with a scalar input on both axes.
    fn planar_model(h: usize) -> FnModel<impl Fn(&[f64], &[f64], &mut [f64]), impl Fn(&[f64]) -> f64> {
        FnModel {
            grid: plane(h),
            velocity: |x: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = -0.3 * x[0] + 0.8 * x[1] + u[0];
                out[1] = -0.8 * x[0] + 0.1 * x[1] + 0.5 * u[0];
            },
            state_cost: |x: &[f64]| x[0] * x[0] + 2.0 * x[1] * x[1],
            r: 0.1,
        }
    }

    fn zero_model(grid: TensorGrid, g: f64) -> FnModel<impl Fn(&[f64], &[f64], &mut [f64]), impl Fn(&[f64]) -> f64> {
        FnModel {
            grid,
            velocity: |_x: &[f64], _u: &[f64], out: &mut [f64]| out.fill(0.0),
            state_cost: move |_x: &[f64]| g,
            r: 0.0,
        }
    }

    #[test]
    fn zero_cost_is_a_fixed_point() {
        let m = FnModel {
            grid: plane(7),
            velocity: |x: &[f64], u: &[f64], out: &mut [f64]| {
                out[0] = -x[1] + u[0];
                out[1] = x[0];
            },
            state_cost: |_x: &[f64]| 0.0,
            r: 0.0,
        };
        let u = ControlGrid::scalar(&[-1.0, 0.0, 1.0]).unwrap();
        let c = cfg(0.1, 0.5);
        let f = ValueField::constant(m.grid.clone(), 0.0, 0.0).unwrap();
        assert!(vi_sweep(&f, &m, &u, &c).iter().all(|&v| v == 0.0));
        let vi = value_iteration(&f, &m, &u, &c).unwrap();
        assert!(vi.converged && vi.field.values().iter().all(|&v| v == 0.0));
        let pi = policy_iteration(&f, &m, &u, &c).unwrap();
        assert_eq!(pi.iterations, 1);
        assert!(pi.field.values().iter().all(|&v| v == 0.0));
        let (v, _) = policy_evaluation(&f, &m, &u, &vec![2; f.values().len()], &c).unwrap();
        assert!(v.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forced_arithmetic_and_geometric_fixed_point() {
        let m = zero_model(line(-1.0, 1.0, 5), 1.0);
        let u = ControlGrid::scalar(&[0.0]).unwrap();
        let c = cfg(0.1, 1.0);
        let beta = c.decay();
        let f = ValueField::new(m.grid.clone(), vec![0.0, 1.0, 2.0, 3.0, 4.0], 1e6).unwrap();
        let s = vi_sweep(&f, &m, &u, &c);
        for (k, v) in s.iter().enumerate() {
            assert!((v - (beta * k as f64 + 0.1)).abs() < 1e-15);
        }
        let c = SlConfig { vi_tol: 1e-12, ..c };
        let vi = value_iteration(&f, &m, &u, &c).unwrap();
        let fixed = 0.1 / (1.0 - beta);
        assert!(vi.converged);
        for v in vi.field.values() {
            assert!((v - fixed).abs() < 1e-9 * fixed);
        }
        let (v, _) = policy_evaluation(&f, &m, &u, &[0; 5], &c).unwrap();
        for v in v {
            assert!((v - fixed).abs() < 1e-10 * fixed);
        }
    }

    #[test]
    fn contraction_and_monotonicity() {
        let m = planar_model(9);
        let u = ControlGrid::scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let c = cfg(0.2, 0.3);
        let beta = c.decay();
        let h = m.grid.num_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let v1: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..5.0)).collect();
            let v2: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..5.0)).collect();
            let f1 = ValueField::new(m.grid.clone(), v1.clone(), 10.0).unwrap();
            let f2 = ValueField::new(m.grid.clone(), v2.clone(), 10.0).unwrap();
            let s1 = vi_sweep(&f1, &m, &u, &c);
            let s2 = vi_sweep(&f2, &m, &u, &c);
            assert!(sup_diff(&s1, &s2) <= beta * sup_diff(&v1, &v2) + 1e-12);
            let hi: Vec<f64> = v1.iter().map(|v| v + rng.random_range(0.0..1.0)).collect();
            let s_hi = vi_sweep(&f1.with_values(hi).unwrap(), &m, &u, &c);
            assert!(s1.iter().zip(&s_hi).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn policy_evaluation_residual_oracle() {
        let m = planar_model(11);
        let u = ControlGrid::scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let c = cfg(0.1, 0.2);
        let beta = c.decay();
        let h = m.grid.num_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy: Vec<usize> = (0..h).map(|_| rng.random_range(0..u.len())).collect();
        let f = ValueField::constant(m.grid.clone(), 0.0, 40.0).unwrap();
        let (v, report) = policy_evaluation(&f, &m, &u, &policy, &c).unwrap();
        let solved = f.with_values(v.clone()).unwrap();
        let mut out = [0.0; 2];
        for j in 0..h {
            let x = m.grid.node(j);
            let uj = u.get(policy[j]);
            m.velocity(j, uj, &mut out);
            let foot = [x[0] + c.dt * out[0], x[1] + c.dt * out[1]];
            let rhs = beta * solved.interpolate(&foot) + c.dt * (m.state_cost(j) + m.control_cost(uj));
            assert!((v[j] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()), "node {j}: {report:?}");
        }
    }

    #[test]
    fn richardson_fallback_agrees_with_krylov() {
        let m = planar_model(7);
        let u = ControlGrid::scalar(&[-1.0, 0.0, 1.0]).unwrap();
        let c = cfg(0.2, 1.0);
        let h = m.grid.num_nodes();
        let policy: Vec<usize> = (0..h).map(|j| j % 3).collect();
        let f = ValueField::constant(m.grid.clone(), 0.0, 20.0).unwrap();
        let sys = PolicySystem::assemble(&f, &m, &u, &policy, &c);
        let tol = sys.tolerance(1e-12);
        let mut a = vec![0.0; h];
        let mut b = vec![0.0; h];
        sys.bicgstab(&mut a, tol, 1000).unwrap();
        sys.richardson(&mut b, tol, 100_000).unwrap();
        assert!(sup_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn vi_and_pi_share_the_fixed_point() {
        let m = planar_model(9);
        let u = ControlGrid::scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
        let c = SlConfig {
            vi_tol: 1e-13,
            pi_tol: 1e-12,
            pe_tol: 1e-13,
            penalty: Some(50.0),
            ..cfg(0.1, 0.5)
        };
        let f = ValueField::constant(m.grid.clone(), 0.0, 50.0).unwrap();
        let vi = value_iteration(&f, &m, &u, &c).unwrap();
        let pi = policy_iteration(&f, &m, &u, &c).unwrap();
        assert!(vi.converged && pi.converged);
        assert!(sup_diff(vi.field.values(), pi.field.values()) <= 1e-8);
        assert!(pi.iterations <= vi.iterations);
        let warm = policy_iteration(&vi.field, &m, &u, &c).unwrap();
        assert!(warm.iterations <= 2, "{}", warm.iterations);
    }

    #[test]
    fn one_dimensional_lq_matches_riccati() {
        let discount = 1e-3;
        let prob = AreProblem::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            discount,
        )
        .unwrap();
        let p = solve_are(&prob).unwrap().p[(0, 0)];
        let m = lq_model(401, 1.0);
        let controls: Vec<f64> = (0..=400).map(|i| -2.0 + 0.01 * i as f64).collect();
        let u = ControlGrid::scalar(&controls).unwrap();
        let c = SlConfig {
            vi_tol: 1e-9,
            ..cfg(0.02, discount)
        };
        let f = ValueField::constant(m.grid.clone(), 0.0, 1.0).unwrap();
        let vi = value_iteration(&f, &m, &u, &c).unwrap();
        assert!(vi.converged);
        let mut worst: f64 = 0.0;
        for j in 0..m.grid.num_nodes() {
            let x = m.grid.node(j)[0];
            let v = vi.field.values()[j];
            assert!(v >= 0.0);
            if (0.2..=0.8).contains(&x.abs()) {
                worst = worst.max((v - p * x * x).abs() / (p * x * x));
            }
        }
        assert!(worst <= 0.05, "relative error {worst}");
        assert!(vi.field.interpolate(&[0.0]) <= 1e-3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn lq_values_are_nonnegative(r in 0.1f64..2.0, dt in 0.05f64..0.3) {
            let m = lq_model(21, r);
            let u = ControlGrid::scalar(&[-1.0, -0.5, 0.0, 0.5, 1.0]).unwrap();
            let c = SlConfig { vi_tol: 1e-8, ..cfg(dt, 0.5) };
            let f = ValueField::constant(m.grid.clone(), 0.0, 1.0).unwrap();
            let vi = value_iteration(&f, &m, &u, &c).unwrap();
            prop_assert!(vi.field.values().iter().all(|&v| v >= 0.0));
            prop_assert!(vi.field.values()[10].abs() <= 1e-12);
            prop_assert!(vi.field.max_value() <= vi.field.penalty());
        }
    }
}
