//! Galerkin projection of the dynamics and the cost, and parameter-free
//! evaluation tables on reduced grid nodes.

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::basis::ReducedBasis;
use crate::domain::TensorGrid;
use crate::error::{check_dim, Error, Result};
use crate::model::{Coefficient, InputField, QuadraticCost, SeparableControlSystem, StateWeight};

/// `Ψᵀx`.
pub fn project_state(basis: &ReducedBasis, x: &[f64]) -> DVector<f64> {
    basis.project(x)
}

/// Coefficient values `Θ^y(μ)` and `Θ^u(μ)` at one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub drift: Vec<f64>,
    pub control: Vec<f64>,
}

impl Coefficients {
    pub fn at(sys: &SeparableControlSystem, mu: &[f64]) -> Self {
        Self {
            drift: sys.drift_coefficients(mu),
            control: sys.control_coefficients(mu),
        }
    }
}

/// Projected dynamics `Ψᵀ f(Ψ x, u; μ)` evaluated term by term.
#[derive(Debug)]
pub struct ReducedSystem<'a> {
    sys: &'a SeparableControlSystem,
    basis: &'a ReducedBasis,
}

impl<'a> ReducedSystem<'a> {
    pub fn new(sys: &'a SeparableControlSystem, basis: &'a ReducedBasis) -> Result<Self> {
        check_dim("basis rows", sys.state_dim(), basis.state_dim())?;
        if basis.is_empty() {
            return Err(Error::EmptyBasis("cannot project onto an empty basis".into()));
        }
        Ok(Self { sys, basis })
    }

    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn system(&self) -> &SeparableControlSystem {
        self.sys
    }

    pub fn basis(&self) -> &ReducedBasis {
        self.basis
    }

    /// `Ψᵀ f_q^y(Ψ x)`.
    pub fn drift_term(&self, q: usize, x: &[f64]) -> DVector<f64> {
        let y = self.basis.lift(x);
        let mut f = vec![0.0; self.sys.state_dim()];
        self.sys.drift_field_add(q, y.as_slice(), 1.0, &mut f);
        self.basis.project(&f)
    }

    /// `Ψᵀ f_q^u(Ψ x)`.
    pub fn input_term(&self, q: usize, x: &[f64]) -> DMatrix<f64> {
        let y = self.basis.lift(x);
        self.basis.matrix().tr_mul(&self.sys.input_field(q, y.as_slice()))
    }

    /// `Ψᵀ f(Ψ x, u; μ)`.
    pub fn rhs(&self, x: &[f64], u: &[f64], mu: &[f64]) -> Result<DVector<f64>> {
        let y = self.basis.lift(x);
        let f = self.sys.eval_dynamics(y.as_slice(), u, mu)?;
        Ok(self.basis.project(f.as_slice()))
    }
}

#[derive(Clone)]
enum ReducedWeight {
    Terms(Vec<(Coefficient, DMatrix<f64>)>),
    Output {
        terms: Vec<(Coefficient, DMatrix<f64>)>,
        weight: DMatrix<f64>,
    },
}

/// `g(Ψ x, u; μ)` with `ΨᵀQ_qΨ` stored per term, or `C_qΨ` in output form.
#[derive(Clone)]
pub struct ReducedCost {
    state: ReducedWeight,
    control_weight: crate::model::MatrixFn,
    pub discount: f64,
}

impl std::fmt::Debug for ReducedCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ReducedCost")
            .field("discount", &self.discount)
            .finish()
    }
}

impl ReducedCost {
    pub fn new(cost: &QuadraticCost, basis: &ReducedBasis) -> Self {
        let psi = basis.matrix();
        let state = match &cost.state_weight {
            StateWeight::Terms(terms) => ReducedWeight::Terms(
                terms
                    .iter()
                    .map(|(c, op)| (c.clone(), psi.tr_mul(&op.mul_dense(psi))))
                    .collect(),
            ),
            StateWeight::Output { terms, weight } => ReducedWeight::Output {
                terms: terms.iter().map(|(c, cq)| (c.clone(), cq * psi)).collect(),
                weight: weight.clone(),
            },
        };
        Self {
            state,
            control_weight: cost.control_weight.clone(),
            discount: cost.discount,
        }
    }

    /// Reduced weight `ΨᵀQ(μ)Ψ`.
    pub fn state_matrix(&self, mu: &[f64]) -> DMatrix<f64> {
        match &self.state {
            ReducedWeight::Terms(terms) => {
                let mut q = terms[0].1.clone() * (terms[0].0)(mu);
                for (c, m) in &terms[1..] {
                    q += m * c(mu);
                }
                q
            }
            ReducedWeight::Output { terms, weight } => {
                let mut c = terms[0].1.clone() * (terms[0].0)(mu);
                for (coef, m) in &terms[1..] {
                    c += m * coef(mu);
                }
                c.transpose() * weight * c
            }
        }
    }

    pub fn at(&self, mu: &[f64]) -> FrozenReducedCost {
        FrozenReducedCost {
            q: self.state_matrix(mu),
            r: (self.control_weight)(mu),
            discount: self.discount,
        }
    }
}

/// Reduced cost at a fixed parameter.
#[derive(Debug, Clone)]
pub struct FrozenReducedCost {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    pub discount: f64,
}

impl FrozenReducedCost {
    pub fn state_cost(&self, x: &[f64]) -> f64 {
        let xv = DVectorView::from_slice(x, self.q.nrows());
        xv.dot(&(&self.q * xv))
    }

    pub fn control_cost(&self, u: &[f64]) -> f64 {
        let uv = DVectorView::from_slice(u, self.r.nrows());
        uv.dot(&(&self.r * uv))
    }

    pub fn running(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state_cost(x) + self.control_cost(u)
    }
}

/// Projected input term of a table: node-independent when the full-order
/// input matrix is constant.
#[derive(Debug, Clone, PartialEq)]
pub enum InputTable {
    /// `ℓ × m`, column-major.
    Constant(Vec<f64>),
    /// `H` blocks of `ℓ × m`, column-major.
    PerNode(Vec<f64>),
}

/// Parameter-independent projected field evaluations at grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationTable {
    dim: usize,
    control_dim: usize,
    nodes: usize,
    /// Per drift term, `H` blocks of length `ℓ`.
    drift: Vec<Vec<f64>>,
    input: Vec<InputTable>,
}

impl EvaluationTable {
    pub fn from_parts(
        dim: usize,
        control_dim: usize,
        nodes: usize,
        drift: Vec<Vec<f64>>,
        input: Vec<InputTable>,
    ) -> Result<Self> {
        for d in &drift {
            check_dim("drift table length", dim * nodes, d.len())?;
        }
        for t in &input {
            match t {
                InputTable::Constant(v) => check_dim("input table length", dim * control_dim, v.len())?,
                InputTable::PerNode(v) => {
                    check_dim("input table length", dim * control_dim * nodes, v.len())?
                }
            }
        }
        Ok(Self {
            dim,
            control_dim,
            nodes,
            drift,
            input,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes
    }

    pub fn drift_terms(&self) -> &[Vec<f64>] {
        &self.drift
    }

    pub fn input_terms(&self) -> &[InputTable] {
        &self.input
    }

    /// `Ψᵀ f_q^y(Ψ x_j)`.
    pub fn drift_row(&self, q: usize, j: usize) -> &[f64] {
        &self.drift[q][j * self.dim..(j + 1) * self.dim]
    }

    /// `Ψᵀ f_q^u(Ψ x_j)`, column-major `ℓ × m`.
    pub fn input_block(&self, q: usize, j: usize) -> &[f64] {
        let block = self.dim * self.control_dim;
        match &self.input[q] {
            InputTable::Constant(v) => v,
            InputTable::PerNode(v) => &v[j * block..(j + 1) * block],
        }
    }

    /// Combined drift `Σ Θ_q^y f_q^{y,ℓ}[j]` written into `out`.
    pub fn drift_into(&self, coeffs: &Coefficients, j: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (q, &c) in coeffs.drift.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.drift_row(q, j)) {
                *o += c * v;
            }
        }
    }

    /// Combined input matrix `Σ Θ_q^u f_q^{u,ℓ}[j]`, column-major, written into `out`.
    pub fn input_into(&self, coeffs: &Coefficients, j: usize, out: &mut [f64]) {
        out.fill(0.0);
        for (q, &c) in coeffs.control.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.input_block(q, j)) {
                *o += c * v;
            }
        }
    }
}

/// `Σ Θ_q^y f_q^{y,ℓ}[j] + Σ Θ_q^u f_q^{u,ℓ}[j] u`.
pub fn reduced_rhs(
    table: &EvaluationTable,
    j: usize,
    u: &[f64],
    coeffs: &Coefficients,
    out: &mut [f64],
) {
    table.drift_into(coeffs, j, out);
    let l = table.dim;
    for (q, &c) in coeffs.control.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        let block = table.input_block(q, j);
        for (k, &uk) in u.iter().enumerate() {
            let cu = c * uk;
            if cu == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(&block[k * l..(k + 1) * l]) {
                *o += cu * v;
            }
        }
    }
}

/// Evaluates every projected term at every node of `grid`.
pub fn build_tables(
    sys: &SeparableControlSystem,
    basis: &ReducedBasis,
    grid: &TensorGrid,
) -> Result<EvaluationTable> {
    let red = ReducedSystem::new(sys, basis)?;
    let l = red.dim();
    check_dim("grid dimension", l, grid.dim())?;
    let h = grid.num_nodes();
    let m = sys.control_dim();
    let mut node = vec![0.0; l];
    let mut drift: Vec<Vec<f64>> = (0..sys.drift_terms().len())
        .map(|_| Vec::with_capacity(h * l))
        .collect();
    for j in 0..h {
        grid.node_into(j, &mut node);
        let y = basis.lift(&node);
        let mut f = vec![0.0; sys.state_dim()];
        for (q, col) in drift.iter_mut().enumerate() {
            f.fill(0.0);
            sys.drift_field_add(q, y.as_slice(), 1.0, &mut f);
            col.extend_from_slice(basis.project(&f).as_slice());
        }
    }
    let input = sys
        .control_terms()
        .iter()
        .enumerate()
        .map(|(q, term)| match term.field {
            InputField::Constant(_) => {
                InputTable::Constant(red.input_term(q, &node).as_slice().to_vec())
            }
            InputField::StateDependent(_) => {
                let mut v = Vec::with_capacity(h * l * m);
                for j in 0..h {
                    grid.node_into(j, &mut node);
                    v.extend_from_slice(red.input_term(q, &node).as_slice());
                }
                InputTable::PerNode(v)
            }
        })
        .collect();
    EvaluationTable::from_parts(l, m, h, drift, input)
}
