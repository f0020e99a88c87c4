//! Parametric control systems in parameter-separable form, quadratic costs,
//! time stepping, trajectory simulation and Gaussian initial-state ensembles.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};
use nalgebra_sparse::CsrMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, BandedLu};

/// Scalar parameter function `Θ(μ)`.
pub type Coefficient = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Constant coefficient.
pub fn constant(value: f64) -> Coefficient {
    Arc::new(move |_| value)
}

/// Coefficient equal to the `k`-th parameter component.
pub fn component(k: usize) -> Coefficient {
    Arc::new(move |mu: &[f64]| mu[k])
}

/// Axis-aligned box of admissible parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidInput("parameter domain needs at least one axis".into()));
        }
        check_dim("parameter bounds", lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::InvalidInput(format!(
                "parameter bounds must satisfy lower < upper: {lower:?} vs {upper:?}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        mu.len() == self.dim()
            && mu
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(m, (l, u))| *l <= *m && *m <= *u)
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Tensor grid with `per_axis` equispaced points per axis, bounds included.
    pub fn tensor_samples(&self, per_axis: usize) -> Vec<Vec<f64>> {
        let q = self.dim();
        let k = per_axis.max(1);
        let axis = |j: usize, i: usize| {
            if k == 1 {
                0.5 * (self.lower[j] + self.upper[j])
            } else {
                self.lower[j] + (self.upper[j] - self.lower[j]) * i as f64 / (k - 1) as f64
            }
        };
        let total = k.pow(q as u32);
        (0..total)
            .map(|mut idx| {
                let mut mu = vec![0.0; q];
                for j in (0..q).rev() {
                    mu[j] = axis(j, idx % k);
                    idx /= k;
                }
                mu
            })
            .collect()
    }
}

/// Linear operator stored densely or in CSR form.
#[derive(Debug, Clone)]
pub enum Operator {
    Dense(DMatrix<f64>),
    Sparse(CsrMatrix<f64>),
}

impl Operator {
    pub fn nrows(&self) -> usize {
        match self {
            Operator::Dense(a) => a.nrows(),
            Operator::Sparse(a) => a.nrows(),
        }
    }

    pub fn ncols(&self) -> usize {
        match self {
            Operator::Dense(a) => a.ncols(),
            Operator::Sparse(a) => a.ncols(),
        }
    }

    /// `out += alpha · A x`.
    pub fn apply_add(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        match self {
            Operator::Dense(a) => {
                let xv = DVectorView::from_slice(x, a.ncols());
                let mut ov = DVectorViewMut::from_slice(out, a.nrows());
                ov.gemv(alpha, a, &xv, 1.0);
            }
            Operator::Sparse(a) => {
                for (o, row) in out.iter_mut().zip(a.row_iter()) {
                    let s: f64 = row
                        .col_indices()
                        .iter()
                        .zip(row.values())
                        .map(|(&j, &v)| v * x[j])
                        .sum();
                    *o += alpha * s;
                }
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Operator::Dense(a) => a.clone(),
            Operator::Sparse(a) => {
                let mut d = DMatrix::zeros(a.nrows(), a.ncols());
                for (i, j, v) in a.triplet_iter() {
                    d[(i, j)] += *v;
                }
                d
            }
        }
    }

    /// `out += alpha · A` on a dense matrix of matching shape.
    pub fn add_to_dense(&self, alpha: f64, out: &mut DMatrix<f64>) {
        match self {
            Operator::Dense(a) => *out += a * alpha,
            Operator::Sparse(a) => {
                for (i, j, v) in a.triplet_iter() {
                    out[(i, j)] += alpha * v;
                }
            }
        }
    }

    /// `A Ψ` for a dense `Ψ`.
    pub fn mul_dense(&self, psi: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Operator::Dense(a) => a * psi,
            Operator::Sparse(a) => {
                let mut out = DMatrix::zeros(a.nrows(), psi.ncols());
                for c in 0..psi.ncols() {
                    let col = psi.column(c).into_owned();
                    let mut o = vec![0.0; a.nrows()];
                    self.apply_add(1.0, col.as_slice(), &mut o);
                    out.set_column(c, &DVector::from_vec(o));
                }
                out
            }
        }
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        match self {
            Operator::Dense(a) => {
                let xv = DVectorView::from_slice(x, a.ncols());
                xv.dot(&(a * xv))
            }
            Operator::Sparse(a) => a
                .row_iter()
                .enumerate()
                .map(|(i, row)| {
                    let s: f64 = row
                        .col_indices()
                        .iter()
                        .zip(row.values())
                        .map(|(&j, &v)| v * x[j])
                        .sum();
                    x[i] * s
                })
                .sum(),
        }
    }
}

/// Accumulating field evaluation: `out += alpha · f(y)`.
pub type FieldEval = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
/// Dense Jacobian of a state field.
pub type FieldJacobian = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
/// State-dependent input matrix `f^u(y)` of shape `n × m`.
pub type InputEval = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// State field `f_q^y`.
#[derive(Clone)]
pub enum StateField {
    Linear(Operator),
    Nonlinear {
        eval: FieldEval,
        jacobian: Option<FieldJacobian>,
    },
}

impl std::fmt::Debug for StateField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateField::Linear(op) => write!(f, "Linear({}x{})", op.nrows(), op.ncols()),
            StateField::Nonlinear { jacobian, .. } => {
                write!(f, "Nonlinear {{ jacobian: {} }}", jacobian.is_some())
            }
        }
    }
}

/// Input field `f_q^u`.
#[derive(Clone)]
pub enum InputField {
    Constant(DMatrix<f64>),
    StateDependent(InputEval),
}

impl std::fmt::Debug for InputField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputField::Constant(b) => write!(f, "Constant({}x{})", b.nrows(), b.ncols()),
            InputField::StateDependent(_) => write!(f, "StateDependent"),
        }
    }
}

#[derive(Clone)]
pub struct DriftTerm {
    pub coefficient: Coefficient,
    pub field: StateField,
}

#[derive(Clone)]
pub struct ControlTerm {
    pub coefficient: Coefficient,
    pub field: InputField,
}

/// `f(y, u; μ) = Σ Θ_q^y(μ) f_q^y(y) + Σ Θ_q^u(μ) f_q^u(y) u`.
///
/// Every full-order field evaluation increments an internal counter.
pub struct SeparableControlSystem {
    n: usize,
    m: usize,
    drift: Vec<DriftTerm>,
    control: Vec<ControlTerm>,
    evaluations: AtomicU64,
}

impl std::fmt::Debug for SeparableControlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SeparableControlSystem")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("drift_terms", &self.drift.len())
            .field("control_terms", &self.control.len())
            .finish()
    }
}

impl SeparableControlSystem {
    pub fn new(
        n: usize,
        m: usize,
        drift: Vec<DriftTerm>,
        control: Vec<ControlTerm>,
    ) -> Result<Self> {
        if drift.is_empty() {
            return Err(Error::InvalidInput("at least one drift term is required".into()));
        }
        for term in &drift {
            if let StateField::Linear(op) = &term.field {
                check_dim("drift operator rows", n, op.nrows())?;
                check_dim("drift operator columns", n, op.ncols())?;
            }
        }
        for term in &control {
            if let InputField::Constant(b) = &term.field {
                check_dim("input matrix rows", n, b.nrows())?;
                check_dim("input matrix columns", m, b.ncols())?;
            }
        }
        Ok(Self {
            n,
            m,
            drift,
            control,
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn drift_terms(&self) -> &[DriftTerm] {
        &self.drift
    }

    pub fn control_terms(&self) -> &[ControlTerm] {
        &self.control
    }

    /// Number of full-order field evaluations performed so far.
    pub fn evaluation_count(&self) -> u64 {
        self.evaluations.load(Ordering::Relaxed)
    }

    fn count(&self) {
        self.evaluations.fetch_add(1, Ordering::Relaxed);
    }

    pub fn drift_coefficients(&self, mu: &[f64]) -> Vec<f64> {
        self.drift.iter().map(|t| (t.coefficient)(mu)).collect()
    }

    pub fn control_coefficients(&self, mu: &[f64]) -> Vec<f64> {
        self.control.iter().map(|t| (t.coefficient)(mu)).collect()
    }

    /// True when every drift term is linear and every input field constant.
    pub fn is_linear(&self) -> bool {
        self.drift.iter().all(|t| matches!(t.field, StateField::Linear(_)))
            && self
                .control
                .iter()
                .all(|t| matches!(t.field, InputField::Constant(_)))
    }

    /// `out += alpha · f_q^y(y)`.
    pub fn drift_field_add(&self, q: usize, y: &[f64], alpha: f64, out: &mut [f64]) {
        self.count();
        match &self.drift[q].field {
            StateField::Linear(op) => op.apply_add(alpha, y, out),
            StateField::Nonlinear { eval, .. } => eval(y, alpha, out),
        }
    }

    /// `f_q^u(y)` as an `n × m` matrix.
    pub fn input_field(&self, q: usize, y: &[f64]) -> DMatrix<f64> {
        self.count();
        match &self.control[q].field {
            InputField::Constant(b) => b.clone(),
            InputField::StateDependent(eval) => eval(y),
        }
    }

    fn input_add(&self, q: usize, y: &[f64], u: &[f64], alpha: f64, out: &mut [f64]) {
        match &self.control[q].field {
            InputField::Constant(b) => {
                let uv = DVectorView::from_slice(u, self.m);
                let mut ov = DVectorViewMut::from_slice(out, self.n);
                ov.gemv(alpha, b, &uv, 1.0);
            }
            InputField::StateDependent(eval) => {
                let b = eval(y);
                let uv = DVectorView::from_slice(u, self.m);
                let mut ov = DVectorViewMut::from_slice(out, self.n);
                ov.gemv(alpha, &b, &uv, 1.0);
            }
        }
    }

    /// Writes `f(y, u; μ)` into `out` given precomputed coefficients.
    pub fn eval_with_coefficients(
        &self,
        theta_y: &[f64],
        theta_u: &[f64],
        y: &[f64],
        u: &[f64],
        out: &mut [f64],
    ) {
        self.count();
        out.fill(0.0);
        for (term, &c) in self.drift.iter().zip(theta_y) {
            if c == 0.0 {
                continue;
            }
            match &term.field {
                StateField::Linear(op) => op.apply_add(c, y, out),
                StateField::Nonlinear { eval, .. } => eval(y, c, out),
            }
        }
        for (q, &c) in theta_u.iter().enumerate() {
            if c != 0.0 {
                self.input_add(q, y, u, c, out);
            }
        }
    }

    fn check_inputs(&self, y: &[f64], u: &[f64]) -> Result<()> {
        check_dim("state", self.n, y.len())?;
        check_dim("control", self.m, u.len())
    }

    /// `f(y, u; μ)`.
    pub fn eval_dynamics(&self, y: &[f64], u: &[f64], mu: &[f64]) -> Result<DVector<f64>> {
        self.check_inputs(y, u)?;
        let mut out = DVector::zeros(self.n);
        self.eval_with_coefficients(
            &self.drift_coefficients(mu),
            &self.control_coefficients(mu),
            y,
            u,
            out.as_mut_slice(),
        );
        Ok(out)
    }

    /// Splits `f(y, ·; μ)` into the drift `f^y(y)` and the input matrix `f^u(y)`.
    pub fn control_affine_parts(
        &self,
        theta_y: &[f64],
        theta_u: &[f64],
        y: &[f64],
        drift_out: &mut [f64],
        input_out: &mut DMatrix<f64>,
    ) {
        self.count();
        drift_out.fill(0.0);
        for (term, &c) in self.drift.iter().zip(theta_y) {
            if c == 0.0 {
                continue;
            }
            match &term.field {
                StateField::Linear(op) => op.apply_add(c, y, drift_out),
                StateField::Nonlinear { eval, .. } => eval(y, c, drift_out),
            }
        }
        input_out.fill(0.0);
        for (term, &c) in self.control.iter().zip(theta_u) {
            if c == 0.0 {
                continue;
            }
            match &term.field {
                InputField::Constant(b) => *input_out += b * c,
                InputField::StateDependent(eval) => *input_out += eval(y) * c,
            }
        }
    }

    /// Jacobian of the drift part `Σ Θ_q^y f_q^y` at `y`.
    pub fn drift_jacobian(&self, y: &[f64], mu: &[f64]) -> DMatrix<f64> {
        let n = self.n;
        let mut jac = DMatrix::zeros(n, n);
        for term in &self.drift {
            let c = (term.coefficient)(mu);
            if c == 0.0 {
                continue;
            }
            match &term.field {
                StateField::Linear(op) => op.add_to_dense(c, &mut jac),
                StateField::Nonlinear {
                    jacobian: Some(j), ..
                } => {
                    self.count();
                    jac += j(y) * c;
                }
                StateField::Nonlinear { eval, jacobian: None } => {
                    jac += finite_difference_jacobian(n, y, |z, out| {
                        self.count();
                        eval(z, 1.0, out)
                    }) * c;
                }
            }
        }
        jac
    }

    /// `(∂f/∂y(ȳ, ū; μ), f^u(ȳ; μ))`.
    pub fn linearize(
        &self,
        y_bar: &[f64],
        u_bar: &[f64],
        mu: &[f64],
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_inputs(y_bar, u_bar)?;
        let mut a = self.drift_jacobian(y_bar, mu);
        let mut b = DMatrix::zeros(self.n, self.m);
        for (q, term) in self.control.iter().enumerate() {
            let c = (term.coefficient)(mu);
            if c == 0.0 {
                continue;
            }
            b += self.input_field(q, y_bar) * c;
            if let InputField::StateDependent(_) = term.field {
                a += finite_difference_jacobian(self.n, y_bar, |z, out| {
                    self.input_add(q, z, u_bar, 1.0, out)
                }) * c;
            }
        }
        Ok((a, b))
    }

    /// `(Σ Θ_q^y A_q, Σ Θ_q^u B_q)` for a linear system.
    pub fn linear_matrices(&self, mu: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !self.is_linear() {
            return Err(Error::InvalidInput("system is not linear".into()));
        }
        self.linearize(&vec![0.0; self.n], &vec![0.0; self.m], mu)
    }
}

/// Step used by the central-difference Jacobian.
pub const FD_STEP: f64 = 1e-6;

fn finite_difference_jacobian(
    n: usize,
    y: &[f64],
    mut eval: impl FnMut(&[f64], &mut [f64]),
) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(n, n);
    let mut z = y.to_vec();
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for j in 0..n {
        z[j] = y[j] + FD_STEP;
        plus.fill(0.0);
        eval(&z, &mut plus);
        z[j] = y[j] - FD_STEP;
        minus.fill(0.0);
        eval(&z, &mut minus);
        z[j] = y[j];
        for i in 0..n {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * FD_STEP);
        }
    }
    jac
}

/// Parameter-dependent matrix function.
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;

/// State weight `Q(μ)`, either as a sum of weighted operators or in output form `C(μ)ᵀ Q_z C(μ)`.
#[derive(Clone)]
pub enum StateWeight {
    Terms(Vec<(Coefficient, Operator)>),
    Output {
        /// `C(μ) = Σ Θ_q(μ) C_q` with each `C_q` of shape `p × n`.
        terms: Vec<(Coefficient, DMatrix<f64>)>,
        weight: DMatrix<f64>,
    },
}

/// `g(y, u; μ) = yᵀ Q(μ) y + uᵀ R(μ) u` with discount `λ`.
#[derive(Clone)]
pub struct QuadraticCost {
    pub state_weight: StateWeight,
    pub control_weight: MatrixFn,
    pub discount: f64,
}

impl std::fmt::Debug for QuadraticCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticCost").field("discount", &self.discount).finish()
    }
}

impl QuadraticCost {
    pub fn new(state_weight: StateWeight, control_weight: MatrixFn, discount: f64) -> Result<Self> {
        if !(discount > 0.0) {
            return Err(Error::InvalidInput(format!("discount must be > 0, got {discount}")));
        }
        Ok(Self {
            state_weight,
            control_weight,
            discount,
        })
    }

    /// Output matrix `C(μ)` when the weight is in output form.
    pub fn output_matrix(&self, mu: &[f64]) -> Option<DMatrix<f64>> {
        match &self.state_weight {
            StateWeight::Output { terms, .. } => {
                let mut c = terms[0].1.clone() * (terms[0].0)(mu);
                for (coef, cq) in &terms[1..] {
                    c += cq * coef(mu);
                }
                Some(c)
            }
            StateWeight::Terms(_) => None,
        }
    }

    /// Dense `Q(μ)`.
    pub fn state_matrix(&self, n: usize, mu: &[f64]) -> DMatrix<f64> {
        match &self.state_weight {
            StateWeight::Terms(terms) => {
                let mut q = DMatrix::zeros(n, n);
                for (coef, op) in terms {
                    op.add_to_dense(coef(mu), &mut q);
                }
                q
            }
            StateWeight::Output { weight, .. } => {
                let c = self.output_matrix(mu).expect("output form");
                c.transpose() * weight * c
            }
        }
    }

    pub fn control_matrix(&self, mu: &[f64]) -> DMatrix<f64> {
        (self.control_weight)(mu)
    }

    /// Evaluator with parameter-dependent data frozen at `μ`.
    pub fn at(&self, mu: &[f64]) -> FrozenCost {
        let state = match &self.state_weight {
            StateWeight::Terms(terms) => FrozenState::Terms(
                terms.iter().map(|(c, op)| (c(mu), op.clone())).collect(),
            ),
            StateWeight::Output { weight, .. } => FrozenState::Output {
                c: self.output_matrix(mu).expect("output form"),
                weight: weight.clone(),
            },
        };
        FrozenCost {
            state,
            r: self.control_matrix(mu),
            discount: self.discount,
        }
    }

    /// `g(y, u; μ)`.
    pub fn running_cost(&self, y: &[f64], u: &[f64], mu: &[f64]) -> f64 {
        self.at(mu).running(y, u)
    }
}

#[derive(Debug, Clone)]
enum FrozenState {
    Terms(Vec<(f64, Operator)>),
    Output { c: DMatrix<f64>, weight: DMatrix<f64> },
}

/// Quadratic cost evaluated at a fixed parameter.
#[derive(Debug, Clone)]
pub struct FrozenCost {
    state: FrozenState,
    r: DMatrix<f64>,
    pub discount: f64,
}

impl FrozenCost {
    pub fn state_cost(&self, y: &[f64]) -> f64 {
        match &self.state {
            FrozenState::Terms(terms) => terms
                .iter()
                .filter(|(c, _)| *c != 0.0)
                .map(|(c, op)| c * op.quadratic_form(y))
                .sum(),
            FrozenState::Output { c, weight } => {
                let z = c * DVectorView::from_slice(y, c.ncols());
                z.dot(&(weight * &z))
            }
        }
    }

    pub fn control_cost(&self, u: &[f64]) -> f64 {
        let uv = DVectorView::from_slice(u, self.r.nrows());
        uv.dot(&(&self.r * uv))
    }

    pub fn running(&self, y: &[f64], u: &[f64]) -> f64 {
        self.state_cost(y) + self.control_cost(u)
    }

    pub fn control_weight(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Finite set of admissible control values.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    dim: usize,
    data: Vec<f64>,
}

impl ControlGrid {
    pub fn new(values: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = values.first() else {
            return Err(Error::InvalidInput("control grid must be non-empty".into()));
        };
        let dim = first.len();
        let mut data = Vec::with_capacity(dim * values.len());
        for v in &values {
            check_dim("control value", dim, v.len())?;
            data.extend_from_slice(v);
        }
        let grid = Self { dim, data };
        for i in 0..grid.len() {
            for j in 0..i {
                if grid.get(i) == grid.get(j) {
                    return Err(Error::InvalidInput(format!(
                        "control values {j} and {i} coincide"
                    )));
                }
            }
        }
        Ok(grid)
    }

    /// Scalar control grid.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| vec![v]).collect())
    }

    /// Cartesian product of per-component value lists; the first component varies slowest.
    pub fn product(axes: &[Vec<f64>]) -> Result<Self> {
        let mut values: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in axes {
            values = values
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Largest gap between consecutive distinct values along any component.
    pub fn max_spacing(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.dim {
            let mut vals: Vec<f64> = self.iter().map(|u| u[k]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                worst = worst.max(w[1] - w[0]);
            }
        }
        worst
    }
}

/// Time integration scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    ExplicitEuler,
    ImplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StepperConfig {
    pub scheme: Scheme,
    pub dt: f64,
}

impl StepperConfig {
    pub fn new(scheme: Scheme, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("time step must be > 0, got {dt}")));
        }
        Ok(Self { scheme, dt })
    }
}

/// Tolerance scale of the implicit Newton solve.
pub const NEWTON_TOL: f64 = 1e-10;
/// Iteration cap of the implicit Newton solve.
pub const NEWTON_MAX_ITER: usize = 50;

enum Factorization {
    Banded(BandedLu),
    Dense(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Factorization {
    fn new(m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let (kl, ku) = BandedLu::bandwidths(&m);
        if 4 * (2 * kl + ku + 1) < n {
            Ok(Factorization::Banded(BandedLu::factor(&m, kl, ku)?))
        } else {
            let lu = m.lu();
            if !lu.is_invertible() {
                return Err(Error::InvalidInput("implicit step matrix is singular".into()));
            }
            Ok(Factorization::Dense(lu))
        }
    }

    fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        match self {
            Factorization::Banded(lu) => lu.solve_in_place(b),
            Factorization::Dense(lu) => {
                let mut v = DVector::from_column_slice(b);
                if !lu.solve_mut(&mut v) {
                    return Err(Error::InvalidInput("singular implicit step matrix".into()));
                }
                b.copy_from_slice(v.as_slice());
                Ok(())
            }
        }
    }
}

/// Time stepper with parameter-dependent data frozen at `μ`.
///
/// Linear systems integrated implicitly reuse one factorization of `I − Δt A(μ)`.
pub struct Stepper<'a> {
    sys: &'a SeparableControlSystem,
    mu: Vec<f64>,
    cfg: StepperConfig,
    theta_y: Vec<f64>,
    theta_u: Vec<f64>,
    linear: Option<(Factorization, DMatrix<f64>)>,
    work: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(sys: &'a SeparableControlSystem, mu: &[f64], cfg: StepperConfig) -> Result<Self> {
        let linear = if cfg.scheme == Scheme::ImplicitEuler && sys.is_linear() {
            let (a, b) = sys.linear_matrices(mu)?;
            let n = sys.state_dim();
            let m = DMatrix::identity(n, n) - a * cfg.dt;
            Some((Factorization::new(m)?, b))
        } else {
            None
        };
        Ok(Self {
            sys,
            mu: mu.to_vec(),
            theta_y: sys.drift_coefficients(mu),
            theta_u: sys.control_coefficients(mu),
            cfg,
            linear,
            work: vec![0.0; sys.state_dim()],
        })
    }

    pub fn config(&self) -> StepperConfig {
        self.cfg
    }

    pub fn parameter(&self) -> &[f64] {
        &self.mu
    }

    pub fn system(&self) -> &SeparableControlSystem {
        self.sys
    }

    /// Advances `y` by one step under control `u`, writing into `out`.
    pub fn step_into(&mut self, y: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let dt = self.cfg.dt;
        match (self.cfg.scheme, &self.linear) {
            (Scheme::ExplicitEuler, _) => {
                self.sys
                    .eval_with_coefficients(&self.theta_y, &self.theta_u, y, u, &mut self.work);
                for ((o, yi), fi) in out.iter_mut().zip(y).zip(&self.work) {
                    *o = yi + dt * fi;
                }
                Ok(())
            }
            (Scheme::ImplicitEuler, Some((lu, b))) => {
                out.copy_from_slice(y);
                let uv = DVectorView::from_slice(u, b.ncols());
                let mut ov = DVectorViewMut::from_slice(out, b.nrows());
                ov.gemv(dt, b, &uv, 1.0);
                self.sys.count();
                lu.solve_in_place(out)
            }
            (Scheme::ImplicitEuler, None) => self.newton_step(y, u, out),
        }
    }

    fn newton_step(&mut self, y: &[f64], u: &[f64], out: &mut [f64]) -> Result<()> {
        let n = y.len();
        let dt = self.cfg.dt;
        let y_inf = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let tol = NEWTON_TOL * y_inf.max(1.0);
        let residual = |sys: &SeparableControlSystem, z: &[f64], f: &mut [f64], r: &mut [f64]| {
            sys.eval_with_coefficients(&self.theta_y, &self.theta_u, z, u, f);
            let mut norm: f64 = 0.0;
            for i in 0..n {
                r[i] = z[i] - y[i] - dt * f[i];
                norm = norm.max(r[i].abs());
            }
            norm
        };
        // Explicit predictor.
        self.sys
            .eval_with_coefficients(&self.theta_y, &self.theta_u, y, u, &mut self.work);
        let mut z: Vec<f64> = y.iter().zip(&self.work).map(|(a, f)| a + dt * f).collect();
        let mut f = vec![0.0; n];
        let mut r = vec![0.0; n];
        let mut norm = residual(self.sys, &z, &mut f, &mut r);
        let mut iterations = 0;
        while norm > tol {
            if iterations >= NEWTON_MAX_ITER {
                return Err(Error::NotConverged {
                    what: "implicit Euler Newton solve",
                    iterations,
                    residual: norm,
                });
            }
            iterations += 1;
            let (jac, _) = self.sys.linearize(&z, u, &self.mu)?;
            let m = DMatrix::identity(n, n) - jac * dt;
            let mut delta = DVector::from_column_slice(&r);
            if !m.lu().solve_mut(&mut delta) {
                return Err(Error::NotConverged {
                    what: "implicit Euler Newton solve (singular Jacobian)",
                    iterations,
                    residual: norm,
                });
            }
            let mut step = 1.0;
            let mut trial = vec![0.0; n];
            loop {
                for i in 0..n {
                    trial[i] = z[i] - step * delta[i];
                }
                let trial_norm = residual(self.sys, &trial, &mut f, &mut r);
                if trial_norm < norm || step < 1e-4 {
                    z.copy_from_slice(&trial);
                    norm = trial_norm;
                    break;
                }
                step *= 0.5;
            }
        }
        out.copy_from_slice(&z);
        Ok(())
    }
}

/// One step of the configured scheme.
pub fn step(
    sys: &SeparableControlSystem,
    y: &[f64],
    u: &[f64],
    mu: &[f64],
    cfg: StepperConfig,
) -> Result<DVector<f64>> {
    check_dim("state", sys.state_dim(), y.len())?;
    check_dim("control", sys.control_dim(), u.len())?;
    let mut stepper = Stepper::new(sys, mu, cfg)?;
    let mut out = DVector::zeros(y.len());
    stepper.step_into(y, u, out.as_mut_slice())?;
    Ok(out)
}

/// Control law evaluated along a trajectory.
pub trait Controller {
    fn control(&mut self, t: f64, y: &[f64], u: &mut [f64]) -> Result<()>;
}

/// `u ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl Controller for ZeroControl {
    fn control(&mut self, _t: f64, _y: &[f64], u: &mut [f64]) -> Result<()> {
        u.fill(0.0);
        Ok(())
    }
}

/// `u = −K y`.
#[derive(Debug, Clone)]
pub struct LinearFeedback {
    pub gain: DMatrix<f64>,
}

impl Controller for LinearFeedback {
    fn control(&mut self, _t: f64, y: &[f64], u: &mut [f64]) -> Result<()> {
        let yv = DVectorView::from_slice(y, self.gain.ncols());
        let mut uv = DVectorViewMut::from_slice(u, self.gain.nrows());
        uv.gemv(-1.0, &self.gain, &yv, 0.0);
        Ok(())
    }
}

/// Controller backed by a closure of `(t, y, u_out)`.
pub struct FnController<F>(pub F);

impl<F: FnMut(f64, &[f64], &mut [f64])> Controller for FnController<F> {
    fn control(&mut self, t: f64, y: &[f64], u: &mut [f64]) -> Result<()> {
        (self.0)(t, y, u);
        Ok(())
    }
}

/// State norm beyond which a trajectory counts as diverged.
pub const DIVERGENCE_GUARD: f64 = 1e12;

/// Sampled trajectory; `controls[k]` acts on `[t_k, t_{k+1})`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

fn steps_for(t_end: f64, dt: f64) -> Result<usize> {
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput(format!("horizon must be > 0, got {t_end}")));
    }
    let k = (t_end / dt).round();
    if (k * dt - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "horizon {t_end} is not a multiple of the time step {dt}"
        )));
    }
    Ok(k as usize)
}

fn guard(t: f64, y: &[f64]) -> Result<()> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= DIVERGENCE_GUARD) {
        return Err(Error::Divergence { time: t, norm });
    }
    Ok(())
}

/// Simulates `⌊T/Δt⌋` steps from `x`.
pub fn simulate(
    sys: &SeparableControlSystem,
    x: &[f64],
    controller: &mut dyn Controller,
    mu: &[f64],
    cfg: StepperConfig,
    t_end: f64,
) -> Result<Trajectory> {
    check_dim("initial state", sys.state_dim(), x.len())?;
    let steps = steps_for(t_end, cfg.dt)?;
    let mut stepper = Stepper::new(sys, mu, cfg)?;
    let m = sys.control_dim();
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps);
    let mut y = DVector::from_column_slice(x);
    let mut next = DVector::zeros(x.len());
    let mut u = vec![0.0; m];
    times.push(0.0);
    states.push(y.clone());
    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        controller.control(t, y.as_slice(), &mut u)?;
        stepper.step_into(y.as_slice(), &u, next.as_mut_slice())?;
        std::mem::swap(&mut y, &mut next);
        let t_next = (k + 1) as f64 * cfg.dt;
        guard(t_next, y.as_slice())?;
        controls.push(DVector::from_column_slice(&u));
        times.push(t_next);
        states.push(y.clone());
    }
    Ok(Trajectory {
        dt: cfg.dt,
        times,
        states,
        controls,
    })
}

/// Left-endpoint rule `Σ_k Δt e^{−λ t_k} g(y_k, u_k; μ)` over the control samples.
pub fn discounted_cost(cost: &QuadraticCost, traj: &Trajectory, mu: &[f64]) -> Result<f64> {
    if traj.states.is_empty() {
        return Err(Error::InvalidInput("empty trajectory".into()));
    }
    let frozen = cost.at(mu);
    Ok(traj
        .controls
        .iter()
        .enumerate()
        .map(|(k, u)| {
            traj.dt
                * (-cost.discount * traj.times[k]).exp()
                * frozen.running(traj.states[k].as_slice(), u.as_slice())
        })
        .sum())
}

/// Truncation rule for the infinite-horizon cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Horizon {
    /// Stop once the tail bound falls below `rel_tail` times the accumulated cost.
    pub rel_tail: f64,
    /// Length of the trailing window over which the running cost is maximized.
    pub window: f64,
    /// Hard cap on the simulated time.
    pub t_max: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Self {
            rel_tail: 1e-6,
            window: 1.0,
            t_max: 100.0,
        }
    }
}

impl Horizon {
    pub fn fixed(t_end: f64) -> Self {
        Self {
            rel_tail: 0.0,
            window: t_end,
            t_max: t_end,
        }
    }
}

/// Discounted cost of a closed-loop run together with the horizon actually used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub cost: f64,
    pub t_end: f64,
    /// Estimated remaining cost `e^{−λT} g_max Δt / (1 − e^{−λΔt})`.
    pub tail_bound: f64,
    pub steps: usize,
}

/// Streams the discounted cost of a closed-loop trajectory without storing it.
pub fn closed_loop_cost(
    stepper: &mut Stepper<'_>,
    cost: &FrozenCost,
    x: &[f64],
    controller: &mut dyn Controller,
    horizon: Horizon,
) -> Result<CostReport> {
    let sys = stepper.system();
    check_dim("initial state", sys.state_dim(), x.len())?;
    let dt = stepper.config().dt;
    let lambda = cost.discount;
    let geometric = dt / (1.0 - (-lambda * dt).exp());
    let window_steps = ((horizon.window / dt).round() as usize).max(1);
    let max_steps = (horizon.t_max / dt).round() as usize;
    let mut y = x.to_vec();
    let mut next = vec![0.0; x.len()];
    let mut u = vec![0.0; sys.control_dim()];
    let mut recent: std::collections::VecDeque<f64> = std::collections::VecDeque::new();
    let mut total = 0.0;
    let mut tail_bound = f64::INFINITY;
    let mut k = 0;
    while k < max_steps {
        let t = k as f64 * dt;
        controller.control(t, &y, &mut u)?;
        let g = cost.running(&y, &u);
        total += dt * (-lambda * t).exp() * g;
        stepper.step_into(&y, &u, &mut next)?;
        std::mem::swap(&mut y, &mut next);
        k += 1;
        guard(k as f64 * dt, &y)?;
        recent.push_back(g);
        if recent.len() > window_steps {
            recent.pop_front();
        }
        if recent.len() == window_steps {
            let g_max = recent.iter().fold(0.0f64, |a, &b| a.max(b));
            tail_bound = (-lambda * k as f64 * dt).exp() * g_max * geometric;
            if tail_bound <= horizon.rel_tail * total {
                break;
            }
        }
    }
    Ok(CostReport {
        cost: total,
        t_end: k as f64 * dt,
        tail_bound,
        steps: k,
    })
}

/// Node weight `b` of the Gaussian covariance.
#[derive(Clone)]
pub enum BoundaryWeight {
    One,
    /// `Π_k (−4(ξ_k − 1/2)² + 1)`, vanishing on the boundary of the unit cube.
    Tent,
    Custom(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for BoundaryWeight {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BoundaryWeight::One => write!(f, "One"),
            BoundaryWeight::Tent => write!(f, "Tent"),
            BoundaryWeight::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl BoundaryWeight {
    pub fn eval(&self, xi: &[f64]) -> f64 {
        match self {
            BoundaryWeight::One => 1.0,
            BoundaryWeight::Tent => xi.iter().map(|x| -4.0 * (x - 0.5).powi(2) + 1.0).product(),
            BoundaryWeight::Custom(b) => b(xi),
        }
    }
}

/// `𝒩(ν, Σ)` with `Σ_ij = c b(N_i) b(N_j) exp(−γ ‖N_i − N_j‖²)`.
///
/// Nodes carrying different component labels are uncorrelated.
#[derive(Debug, Clone)]
pub struct GaussianEnsemble {
    pub nodes: Vec<Vec<f64>>,
    pub components: Option<Vec<usize>>,
    pub mean: DVector<f64>,
    pub scale: f64,
    pub decay: f64,
    pub weight: BoundaryWeight,
}

impl GaussianEnsemble {
    pub fn new(
        nodes: Vec<Vec<f64>>,
        mean: DVector<f64>,
        scale: f64,
        decay: f64,
        weight: BoundaryWeight,
    ) -> Result<Self> {
        check_dim("ensemble mean", nodes.len(), mean.len())?;
        if !(scale > 0.0) || !(decay > 0.0) {
            return Err(Error::InvalidInput(format!(
                "ensemble scale and decay must be > 0, got {scale} and {decay}"
            )));
        }
        Ok(Self {
            nodes,
            components: None,
            mean,
            scale,
            decay,
            weight,
        })
    }

    /// Attaches per-node component labels.
    pub fn with_components(mut self, labels: Vec<usize>) -> Result<Self> {
        check_dim("component labels", self.nodes.len(), labels.len())?;
        self.components = Some(labels);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let n = self.dim();
        let b: Vec<f64> = self.nodes.iter().map(|p| self.weight.eval(p)).collect();
        DMatrix::from_fn(n, n, |i, j| {
            if let Some(labels) = &self.components {
                if labels[i] != labels[j] {
                    return 0.0;
                }
            }
            let d2: f64 = self.nodes[i]
                .iter()
                .zip(&self.nodes[j])
                .map(|(a, c)| (a - c).powi(2))
                .sum();
            self.scale * b[i] * b[j] * (-self.decay * d2).exp()
        })
    }

    /// Factor `L` with `L Lᵀ = Σ`, negative eigenvalues clipped to zero.
    pub fn sampler(&self) -> Result<GaussianSampler> {
        let cov = self.covariance();
        let (w, v) = linalg::symmetric_eigen(&cov)?;
        let clipped = w.map(|e| e.max(0.0).sqrt());
        let factor = v * DMatrix::from_diagonal(&clipped);
        Ok(GaussianSampler {
            mean: self.mean.clone(),
            factor,
        })
    }

    /// `count` reproducible draws.
    pub fn sample_initial(&self, count: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        if count == 0 {
            return Err(Error::InvalidInput("sample count must be >= 1".into()));
        }
        Ok(self.sampler()?.sample(count, seed))
    }
}

#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn sample(&self, count: usize, seed: u64) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.mean.len();
        (0..count)
            .map(|_| {
                let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
                &self.mean + &self.factor * z
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn identity_system(n: usize) -> SeparableControlSystem {
        SeparableControlSystem::new(
            n,
            1,
            vec![DriftTerm {
                coefficient: constant(1.0),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(n, n))),
            }],
            vec![],
        )
        .unwrap()
    }

    fn scalar_decay() -> SeparableControlSystem {
        SeparableControlSystem::new(
            1,
            1,
            vec![DriftTerm {
                coefficient: constant(-1.0),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(1, 1))),
            }],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(DMatrix::identity(1, 1)),
            }],
        )
        .unwrap()
    }

    fn zero_system(n: usize) -> SeparableControlSystem {
        SeparableControlSystem::new(
            n,
            1,
            vec![DriftTerm {
                coefficient: constant(0.0),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(n, n))),
            }],
            vec![],
        )
        .unwrap()
    }

    fn cubic_field() -> StateField {
        StateField::Nonlinear {
            eval: Arc::new(|y: &[f64], a: f64, out: &mut [f64]| {
                for (o, v) in out.iter_mut().zip(y) {
                    *o += a * (v - v * v * v);
                }
            }),
            jacobian: None,
        }
    }

    /// Random system with two drift terms (linear + cubic) and one input term.
    fn random_system(seed: u64) -> (SeparableControlSystem, DMatrix<f64>, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let sys = SeparableControlSystem::new(
            4,
            2,
            vec![
                DriftTerm {
                    coefficient: Arc::new(|mu: &[f64]| 1.0 + mu[0]),
                    field: StateField::Linear(Operator::Dense(a.clone())),
                },
                DriftTerm {
                    coefficient: Arc::new(|mu: &[f64]| mu[1] * mu[1]),
                    field: cubic_field(),
                },
            ],
            vec![ControlTerm {
                coefficient: Arc::new(|mu: &[f64]| mu[0] - 2.0),
                field: InputField::Constant(b.clone()),
            }],
        )
        .unwrap();
        (sys, a, b)
    }

    #[test]
    fn identity_field() {
        let sys = identity_system(2);
        let f = sys.eval_dynamics(&[1.0, 2.0], &[0.0], &[]).unwrap();
        assert_eq!(f.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn cubic_component_value() {
        let sys = SeparableControlSystem::new(
            3,
            1,
            vec![DriftTerm {
                coefficient: component(0),
                field: cubic_field(),
            }],
            vec![],
        )
        .unwrap();
        let f = sys.eval_dynamics(&[2.0; 3], &[0.0], &[1.0]).unwrap();
        assert!(f.iter().all(|&v| v == -6.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sys = identity_system(2);
        assert!(matches!(
            sys.eval_dynamics(&[1.0], &[0.0], &[]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn separable_sum_matches_term_by_term_oracle() {
        let (sys, a, b) = random_system(5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let y: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu = [rng.random_range(0.0..3.0), rng.random_range(-1.0..1.0)];
            let f = sys.eval_dynamics(&y, &u, &mu).unwrap();
            for i in 0..4 {
                let lin: f64 = (0..4).map(|j| a[(i, j)] * y[j]).sum();
                let cub = y[i] - y[i].powi(3);
                let inp: f64 = (0..2).map(|j| b[(i, j)] * u[j]).sum();
                let oracle = (1.0 + mu[0]) * lin + mu[1] * mu[1] * cub + (mu[0] - 2.0) * inp;
                assert!((f[i] - oracle).abs() <= 1e-14 * (1.0 + oracle.abs()));
            }
        }
    }

    proptest! {
        #[test]
        fn dynamics_affine_in_control(
            y in proptest::collection::vec(-2.0f64..2.0, 4),
            u1 in proptest::collection::vec(-2.0f64..2.0, 2),
            u2 in proptest::collection::vec(-2.0f64..2.0, 2),
            alpha in -2.0f64..2.0,
            beta in -2.0f64..2.0,
        ) {
            let (sys, _, _) = random_system(9);
            let mu = [0.7, 0.3];
            let mix: Vec<f64> = u1.iter().zip(&u2).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = sys.eval_dynamics(&y, &mix, &mu).unwrap();
            let f1 = sys.eval_dynamics(&y, &u1, &mu).unwrap();
            let f2 = sys.eval_dynamics(&y, &u2, &mu).unwrap();
            let f0 = sys.eval_dynamics(&y, &[0.0, 0.0], &mu).unwrap();
            let rhs = f1 * alpha + f2 * beta - f0 * (alpha + beta - 1.0);
            prop_assert!((lhs - rhs).amax() <= 1e-12);
        }

        #[test]
        fn discounted_cost_nonnegative(x in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let sys = identity_system(2);
            let cost = identity_cost(2, 0.5);
            let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
            let mut ctrl = FnController(|t: f64, _y: &[f64], u: &mut [f64]| u[0] = t.sin());
            let traj = simulate(&sys, &x, &mut ctrl, &[], cfg, 1.0).unwrap();
            prop_assert!(discounted_cost(&cost, &traj, &[]).unwrap() >= 0.0);
        }
    }

    fn identity_cost(n: usize, discount: f64) -> QuadraticCost {
        QuadraticCost::new(
            StateWeight::Terms(vec![(constant(1.0), Operator::Dense(DMatrix::identity(n, n)))]),
            Arc::new(|_| DMatrix::identity(1, 1)),
            discount,
        )
        .unwrap()
    }

    #[test]
    fn zero_field_steps_are_identity() {
        let sys = zero_system(3);
        let y = [0.3, -1.0, 2.0];
        for scheme in [Scheme::ExplicitEuler, Scheme::ImplicitEuler] {
            let cfg = StepperConfig::new(scheme, 0.1).unwrap();
            let out = step(&sys, &y, &[0.0], &[], cfg).unwrap();
            assert_eq!(out.as_slice(), &y);
        }
    }

    #[test]
    fn scalar_decay_steps() {
        let sys = scalar_decay();
        let exp = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        let imp = StepperConfig::new(Scheme::ImplicitEuler, 0.1).unwrap();
        assert!((step(&sys, &[1.0], &[0.0], &[], exp).unwrap()[0] - 0.9).abs() < 1e-15);
        assert!((step(&sys, &[1.0], &[0.0], &[], imp).unwrap()[0] - 1.0 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn nonlinear_implicit_step_solves_its_equation() {
        let sys = SeparableControlSystem::new(
            2,
            1,
            vec![DriftTerm {
                coefficient: constant(3.0),
                field: cubic_field(),
            }],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(DMatrix::from_element(2, 1, 1.0)),
            }],
        )
        .unwrap();
        let cfg = StepperConfig::new(Scheme::ImplicitEuler, 0.1).unwrap();
        let y = [0.5, -1.5];
        let out = step(&sys, &y, &[0.2], &[], cfg).unwrap();
        let f = sys.eval_dynamics(out.as_slice(), &[0.2], &[]).unwrap();
        for i in 0..2 {
            assert!((out[i] - y[i] - 0.1 * f[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn implicit_and_explicit_agree_to_second_order() {
        let (sys, _, _) = random_system(3);
        let y = [0.3, -0.2, 0.1, 0.4];
        let u = [0.5, -0.5];
        let mu = [0.5, 0.8];
        let gap = |dt: f64| {
            let e = step(&sys, &y, &u, &mu, StepperConfig::new(Scheme::ExplicitEuler, dt).unwrap())
                .unwrap();
            let i = step(&sys, &y, &u, &mu, StepperConfig::new(Scheme::ImplicitEuler, dt).unwrap())
                .unwrap();
            (e - i).norm()
        };
        let (g1, g2) = (gap(0.02), gap(0.01));
        let slope = (g1 / g2).log2();
        assert!(slope >= 1.9, "slope {slope}");
    }

    #[test]
    fn zero_field_trajectory_is_constant() {
        let sys = zero_system(2);
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        let traj = simulate(&sys, &[1.0, -2.0], &mut ZeroControl, &[], cfg, 1.0).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert!(traj.states.iter().all(|s| s.as_slice() == [1.0, -2.0]));
    }

    #[test]
    fn scalar_decay_trajectory() {
        let sys = scalar_decay();
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        let traj = simulate(&sys, &[1.0], &mut ZeroControl, &[], cfg, 1.0).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert!((traj.states[10][0] - 0.9f64.powi(10)).abs() < 1e-14);
    }

    #[test]
    fn horizon_must_be_step_multiple() {
        let sys = scalar_decay();
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        assert!(simulate(&sys, &[1.0], &mut ZeroControl, &[], cfg, 0.25).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let sys = identity_system(1);
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 1.0).unwrap();
        let err = simulate(&sys, &[1.0], &mut ZeroControl, &[], cfg, 100.0).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    fn unit_cost_trajectory(k: usize, dt: f64) -> Trajectory {
        Trajectory {
            dt,
            times: (0..=k).map(|i| i as f64 * dt).collect(),
            states: vec![DVector::from_element(1, 1.0); k + 1],
            controls: vec![DVector::zeros(1); k],
        }
    }

    fn scalar_cost(q: f64, discount: f64) -> QuadraticCost {
        QuadraticCost {
            state_weight: StateWeight::Terms(vec![(
                constant(q),
                Operator::Dense(DMatrix::identity(1, 1)),
            )]),
            control_weight: Arc::new(|_| DMatrix::identity(1, 1)),
            discount,
        }
    }

    #[test]
    fn discounted_cost_values() {
        let traj = unit_cost_trajectory(7, 0.1);
        assert_eq!(discounted_cost(&scalar_cost(0.0, 1.0), &traj, &[]).unwrap(), 0.0);
        let undiscounted = discounted_cost(&scalar_cost(1.0, 0.0), &traj, &[]).unwrap();
        assert!((undiscounted - 0.7).abs() < 1e-14);
        let long = unit_cost_trajectory(2000, 0.1);
        let sum = discounted_cost(&scalar_cost(1.0, 1.0), &long, &[]).unwrap();
        let geometric = 0.1 / (1.0 - (-0.1f64).exp());
        assert!((sum - geometric).abs() < 1e-12);
    }

    #[test]
    fn streaming_cost_matches_stored_trajectory() {
        let sys = scalar_decay();
        let cost = scalar_cost(1.0, 0.1);
        let cfg = StepperConfig::new(Scheme::ImplicitEuler, 0.01).unwrap();
        let traj = simulate(&sys, &[2.0], &mut ZeroControl, &[], cfg, 5.0).unwrap();
        let stored = discounted_cost(&cost, &traj, &[]).unwrap();
        let mut stepper = Stepper::new(&sys, &[], cfg).unwrap();
        let report = closed_loop_cost(
            &mut stepper,
            &cost.at(&[]),
            &[2.0],
            &mut ZeroControl,
            Horizon::fixed(5.0),
        )
        .unwrap();
        assert_eq!(report.steps, 500);
        assert!((report.cost - stored).abs() < 1e-12);

        let adaptive = closed_loop_cost(
            &mut stepper,
            &cost.at(&[]),
            &[2.0],
            &mut ZeroControl,
            Horizon::default(),
        )
        .unwrap();
        assert!(adaptive.tail_bound <= 1e-6 * adaptive.cost);
        assert!(adaptive.t_end < 100.0);
    }

    #[test]
    fn covariance_formula() {
        let ens = GaussianEnsemble::new(
            vec![vec![0.3, 0.3], vec![0.3, 0.3]],
            DVector::zeros(2),
            1.0,
            1.0,
            BoundaryWeight::One,
        )
        .unwrap();
        assert!(ens.covariance().iter().all(|&v| v == 1.0));
        let ens = GaussianEnsemble::new(
            vec![vec![0.0], vec![1.0]],
            DVector::zeros(2),
            1.0,
            1.0,
            BoundaryWeight::One,
        )
        .unwrap();
        assert!((ens.covariance()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn tent_weight_vanishes_on_boundary() {
        assert_eq!(BoundaryWeight::Tent.eval(&[0.0, 0.5]), 0.0);
        assert_eq!(BoundaryWeight::Tent.eval(&[0.5, 0.5]), 1.0);
    }

    #[test]
    fn component_labels_decouple() {
        let ens = GaussianEnsemble::new(
            vec![vec![0.2], vec![0.2]],
            DVector::from_vec(vec![0.0, -1.0]),
            0.2,
            1.0,
            BoundaryWeight::One,
        )
        .unwrap()
        .with_components(vec![0, 1])
        .unwrap();
        let cov = ens.covariance();
        assert_eq!(cov[(0, 1)], 0.0);
        assert!((cov[(1, 1)] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn samples_reproduce_covariance_and_seed() {
        let nodes: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.25]).collect();
        let ens =
            GaussianEnsemble::new(nodes, DVector::zeros(5), 0.5, 2.0, BoundaryWeight::One).unwrap();
        let samples = ens.sample_initial(10_000, 42).unwrap();
        let again = ens.sample_initial(10_000, 42).unwrap();
        assert_eq!(samples, again);
        let mut emp = DMatrix::zeros(5, 5);
        for s in &samples {
            emp += s * s.transpose();
        }
        emp /= samples.len() as f64;
        let cov = ens.covariance();
        assert!((emp - &cov).norm() / cov.norm() < 0.05);
    }

    #[test]
    fn linearize_linear_system_is_exact() {
        let (a, b) = (
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
        );
        let sys = SeparableControlSystem::new(
            2,
            1,
            vec![DriftTerm {
                coefficient: constant(1.0),
                field: StateField::Linear(Operator::Dense(a.clone())),
            }],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(b.clone()),
            }],
        )
        .unwrap();
        let (la, lb) = sys.linearize(&[0.4, 0.1], &[2.0], &[]).unwrap();
        assert_eq!(la, a);
        assert_eq!(lb, b);
    }

    #[test]
    fn cubic_jacobian_by_finite_differences() {
        let sys = SeparableControlSystem::new(
            1,
            1,
            vec![DriftTerm {
                coefficient: constant(1.0),
                field: cubic_field(),
            }],
            vec![],
        )
        .unwrap();
        let (a, _) = sys.linearize(&[0.5], &[0.0], &[]).unwrap();
        assert!((a[(0, 0)] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn evaluation_counter_advances() {
        let sys = scalar_decay();
        let before = sys.evaluation_count();
        sys.eval_dynamics(&[1.0], &[0.0], &[]).unwrap();
        assert_eq!(sys.evaluation_count(), before + 1);
    }

    #[test]
    fn control_grid_rules() {
        assert!(ControlGrid::new(vec![]).is_err());
        assert!(ControlGrid::scalar(&[1.0, 1.0]).is_err());
        let g = ControlGrid::product(&[vec![-1.0, 1.0], vec![0.0, 2.0, 3.0]]).unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g.get(1), &[-1.0, 2.0]);
        assert_eq!(g.get(3), &[1.0, 0.0]);
        assert_eq!(g.max_spacing(), 2.0);
    }

    #[test]
    fn parameter_samples_cover_corners() {
        let d = ParameterDomain::new(vec![0.0, 2.0], vec![1.0, 4.0]).unwrap();
        let s = d.tensor_samples(3);
        assert_eq!(s.len(), 9);
        assert_eq!(s[0], vec![0.0, 2.0]);
        assert_eq!(s[8], vec![1.0, 4.0]);
        assert!(ParameterDomain::new(vec![1.0], vec![1.0]).is_err());
    }
}
