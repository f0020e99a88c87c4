//! Coupled two-component viscous Burgers flow with upwind convection.
//!
//! The state stacks both velocity components, `y = (w₁, w₂)`. Parameters
//! weight the two measured mean velocities in the cost.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{CooMatrix, CsrMatrix};
use parahjb::model::{
    component, constant, BoundaryWeight, ControlGrid, ControlTerm, DriftTerm, GaussianEnsemble,
    InputField, Operator, ParameterDomain, QuadraticCost, Scheme, SeparableControlSystem,
    StateField, StateWeight, StepperConfig,
};
use parahjb::pipeline::Problem;
use serde::{Deserialize, Serialize};

use crate::fd::SquareGrid;
use crate::{Disk, Result};

/// How the sensor aggregates velocities over its disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorOutput {
    /// Rectangle-rule integral, `h² Σ w`.
    Integral,
    /// Mean over the sensor nodes.
    Average,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Test3Spec {
    /// Interior nodes per axis and component.
    pub resolution: usize,
    pub viscosity: f64,
    pub actuator: Disk,
    pub sensor: Disk,
    pub output: SensorOutput,
    pub weights: [f64; 2],
    pub discount: f64,
    pub dt: f64,
    /// Per-component controls `(−r + iΔ)³`, `i = 0..count`.
    pub control_root: f64,
    pub control_step: f64,
    pub control_count: usize,
    pub ensemble_scale: f64,
    pub ensemble_decay: f64,
    pub ensemble_mean: [f64; 2],
}

impl Default for Test3Spec {
    fn default() -> Self {
        let ball = Disk {
            center: [0.5, 0.25],
            radius: 0.2,
        };
        Self {
            resolution: 20,
            viscosity: 1e-4,
            actuator: ball,
            sensor: ball,
            output: SensorOutput::Average,
            weights: [0.01, 5.0],
            discount: 1e-4,
            dt: 5e-3,
            control_root: 3.0,
            control_step: 0.1875,
            control_count: 33,
            ensemble_scale: 0.2,
            ensemble_decay: 1.0,
            ensemble_mean: [0.0, -1.0],
        }
    }
}

/// Upwind convection `−(w · ∇) w` of the stacked state, accumulated as `out += alpha · F(y)`.
pub fn convection(g: &SquareGrid, y: &[f64], alpha: f64, out: &mut [f64]) {
    let m = g.len();
    let (w1, w2) = y.split_at(m);
    for c in 0..2 {
        let wc = &y[c * m..(c + 1) * m];
        for p in 0..m {
            let d1 = g.upwind_derivative(wc, p, 0, w1[p]);
            let d2 = g.upwind_derivative(wc, p, 1, w2[p]);
            out[c * m + p] -= alpha * (w1[p] * d1 + w2[p] * d2);
        }
    }
}

/// Jacobian of [`convection`] with the upwind directions frozen at `y`.
pub fn convection_jacobian(g: &SquareGrid, y: &[f64]) -> DMatrix<f64> {
    let m = g.len();
    let h = g.spacing();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);
    for c in 0..2 {
        let wc = &y[c * m..(c + 1) * m];
        for p in 0..m {
            let row = c * m + p;
            for axis in 0..2 {
                let v = y[axis * m + p];
                jac[(row, axis * m + p)] -= g.upwind_derivative(wc, p, axis, v);
                if v > 0.0 {
                    jac[(row, c * m + p)] -= v / h;
                    if let Some(q) = g.neighbour(p, axis, -1) {
                        jac[(row, c * m + q)] += v / h;
                    }
                } else {
                    jac[(row, c * m + p)] += v / h;
                    if let Some(q) = g.neighbour(p, axis, 1) {
                        jac[(row, c * m + q)] -= v / h;
                    }
                }
            }
        }
    }
    jac
}

/// Control values per component.
pub fn component_controls(root: f64, step: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| (-root + i as f64 * step).powi(3)).collect()
}

impl Test3Spec {
    pub fn grid(&self) -> SquareGrid {
        SquareGrid::new(self.resolution)
    }

    /// Component-wise five-point Laplacian.
    pub fn viscous_operator(&self) -> CsrMatrix<f64> {
        let g = self.grid();
        let m = g.len();
        let lap = g.laplacian();
        let mut coo = CooMatrix::new(2 * m, 2 * m);
        for c in 0..2 {
            for (i, j, v) in lap.triplet_iter() {
                coo.push(c * m + i, c * m + j, *v);
            }
        }
        CsrMatrix::from(&coo)
    }

    /// Measurement of component `c` over the sensor disk, as a `2 × n` matrix with only
    /// row `c` populated.
    pub fn output_rows(&self, c: usize) -> DMatrix<f64> {
        let g = self.grid();
        let m = g.len();
        let ind = g.indicator(|p| self.sensor.contains(p));
        let weight = match self.output {
            SensorOutput::Integral => g.spacing().powi(2),
            SensorOutput::Average => 1.0 / ind.iter().sum::<f64>(),
        };
        let mut out = DMatrix::zeros(2, 2 * m);
        for p in 0..m {
            out[(c, c * m + p)] = weight * ind[p];
        }
        out
    }

    pub fn build(&self) -> Result<Problem> {
        crate::check_resolution(self.resolution)?;
        let g = self.grid();
        let m = g.len();
        let n = 2 * m;
        let ind = g.indicator(|p| self.actuator.contains(p));
        let mut b = DMatrix::zeros(n, 2);
        for p in 0..m {
            b[(p, 0)] = ind[p];
            b[(m + p, 1)] = ind[p];
        }
        let system = SeparableControlSystem::new(
            n,
            2,
            vec![
                DriftTerm {
                    coefficient: constant(self.viscosity),
                    field: StateField::Linear(Operator::Sparse(self.viscous_operator())),
                },
                DriftTerm {
                    coefficient: constant(1.0),
                    field: StateField::Nonlinear {
                        eval: Arc::new(move |y: &[f64], alpha: f64, out: &mut [f64]| {
                            convection(&g, y, alpha, out)
                        }),
                        jacobian: Some(Arc::new(move |y: &[f64]| convection_jacobian(&g, y))),
                    },
                },
            ],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(b),
            }],
        )?;
        let cost = QuadraticCost::new(
            StateWeight::Output {
                terms: vec![
                    (component(0), self.output_rows(0)),
                    (component(1), self.output_rows(1)),
                ],
                weight: DMatrix::identity(2, 2),
            },
            Arc::new(|_mu: &[f64]| DMatrix::identity(2, 2)),
            self.discount,
        )?;
        let nodes = g.nodes();
        let mut all_nodes = nodes.clone();
        all_nodes.extend(nodes);
        let mean = DVector::from_fn(n, |i, _| self.ensemble_mean[i / m]);
        let ensemble = GaussianEnsemble::new(
            all_nodes,
            mean,
            self.ensemble_scale,
            self.ensemble_decay,
            BoundaryWeight::One,
        )?
        .with_components((0..n).map(|i| i / m).collect())?;
        let axis = component_controls(self.control_root, self.control_step, self.control_count);
        Ok(Problem {
            name: "test3".into(),
            system,
            cost,
            domain: ParameterDomain::new(
                vec![self.weights[0]; 2],
                vec![self.weights[1]; 2],
            )?,
            controls: ControlGrid::product(&[axis.clone(), axis])?,
            ensemble,
            stepper: StepperConfig::new(Scheme::ExplicitEuler, self.dt)?,
        })
    }
}
