//! Controlled advection-diffusion with a rotating velocity field.
//!
//! Parameters are `μ = (μ_diff, μ_adv)`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use parahjb::model::{
    component, constant, BoundaryWeight, ControlGrid, ControlTerm, DriftTerm, GaussianEnsemble,
    InputField, Operator, ParameterDomain, QuadraticCost, Scheme, SeparableControlSystem,
    StateField, StateWeight, StepperConfig,
};
use parahjb::pipeline::Problem;
use serde::{Deserialize, Serialize};

use crate::fd::SquareGrid;
use crate::{Rect, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Test1Spec {
    /// Interior nodes per axis.
    pub resolution: usize,
    pub diffusion: [f64; 2],
    pub advection: [f64; 2],
    pub actuator: Rect,
    pub sensor: Rect,
    pub output_weight: f64,
    pub control_weight: f64,
    pub discount: f64,
    pub dt: f64,
    /// Controls `(−r + iΔ)³` for `i = 0..count` with `Δ = 2r/(count−1)`.
    pub control_root: f64,
    pub control_count: usize,
    pub ensemble_scale: f64,
    pub ensemble_decay: f64,
}

impl Default for Test1Spec {
    fn default() -> Self {
        Self {
            resolution: 26,
            diffusion: [0.05, 0.1],
            advection: [2.0, 4.0],
            actuator: Rect::square(0.5, 0.9),
            sensor: Rect::square(0.1, 0.4),
            output_weight: 10.0,
            control_weight: 1e-2,
            discount: 1e-3,
            dt: 1e-2,
            control_root: 2.0,
            control_count: 110,
            ensemble_scale: 1e-3,
            ensemble_decay: 2.0,
        }
    }
}

/// `(−r + iΔ)³`, `i = 0..count`, with `Δ = 2r/(count−1)`.
pub fn cubic_controls(root: f64, count: usize) -> Vec<f64> {
    let step = 2.0 * root / (count - 1) as f64;
    (0..count).map(|i| (-root + i as f64 * step).powi(3)).collect()
}

/// Rotation field `(−(ξ₂ − 1/2), ξ₁ − 1/2)` scaled by `μ_adv` at assembly time.
pub fn rotation(xi: [f64; 2]) -> [f64; 2] {
    [-(xi[1] - 0.5), xi[0] - 0.5]
}

impl Test1Spec {
    pub fn grid(&self) -> SquareGrid {
        SquareGrid::new(self.resolution)
    }

    /// Diffusion and advection operators `(A_diff, A_adv)`.
    pub fn operators(&self) -> (Operator, Operator) {
        let g = self.grid();
        (
            Operator::Sparse(g.laplacian()),
            Operator::Sparse(g.upwind_transport(rotation)),
        )
    }

    /// Mean over the sensor nodes as a `1 × n` row.
    pub fn output_row(&self) -> DMatrix<f64> {
        let ind = self.grid().indicator(|p| self.sensor.contains(p));
        let count: f64 = ind.iter().sum();
        DMatrix::from_row_slice(1, ind.len(), &ind) / count
    }

    pub fn build(&self) -> Result<Problem> {
        crate::check_resolution(self.resolution)?;
        let g = self.grid();
        let n = g.len();
        let (diff, adv) = self.operators();
        let system = SeparableControlSystem::new(
            n,
            1,
            vec![
                DriftTerm {
                    coefficient: component(0),
                    field: StateField::Linear(diff),
                },
                DriftTerm {
                    coefficient: Arc::new(|mu: &[f64]| -mu[1]),
                    field: StateField::Linear(adv),
                },
            ],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(DMatrix::from_column_slice(
                    n,
                    1,
                    &g.indicator(|p| self.actuator.contains(p)),
                )),
            }],
        )?;
        let r = self.control_weight;
        let cost = QuadraticCost::new(
            StateWeight::Output {
                terms: vec![(constant(1.0), self.output_row())],
                weight: DMatrix::from_element(1, 1, self.output_weight),
            },
            Arc::new(move |_mu: &[f64]| DMatrix::from_element(1, 1, r)),
            self.discount,
        )?;
        let ensemble = GaussianEnsemble::new(
            g.nodes(),
            DVector::zeros(n),
            self.ensemble_scale,
            self.ensemble_decay,
            BoundaryWeight::Tent,
        )?;
        Ok(Problem {
            name: "test1".into(),
            system,
            cost,
            domain: ParameterDomain::new(
                vec![self.diffusion[0], self.advection[0]],
                vec![self.diffusion[1], self.advection[1]],
            )?,
            controls: ControlGrid::scalar(&cubic_controls(self.control_root, self.control_count))?,
            ensemble,
            stepper: StepperConfig::new(Scheme::ImplicitEuler, self.dt)?,
        })
    }
}
