//! Reaction-diffusion-convection with a cubic reaction term whose strength is the parameter.
//!
//! The semi-discrete dynamics are `ẏ = A y + μ (y − y³) + B u`, so the origin
//! loses stability once `μ` exceeds the decay rate of `A`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::CsrMatrix;
use parahjb::model::{
    component, constant, BoundaryWeight, ControlGrid, ControlTerm, DriftTerm, GaussianEnsemble,
    InputField, Operator, ParameterDomain, QuadraticCost, Scheme, SeparableControlSystem,
    StateField, StateWeight, StepperConfig,
};
use parahjb::pipeline::Problem;
use serde::{Deserialize, Serialize};

use crate::fd::SquareGrid;
use crate::test1::cubic_controls;
use crate::{Rect, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Test2Spec {
    /// Interior nodes per axis.
    pub resolution: usize,
    pub diffusion: f64,
    /// Constant convection velocity.
    pub convection: [f64; 2],
    pub reaction: [f64; 2],
    pub actuator: Rect,
    pub state_weight: f64,
    pub control_weight: f64,
    pub discount: f64,
    pub dt: f64,
    pub control_root: f64,
    pub control_count: usize,
    pub ensemble_scale: f64,
    pub ensemble_decay: f64,
}

impl Default for Test2Spec {
    fn default() -> Self {
        Self {
            resolution: 19,
            diffusion: 0.2,
            convection: [1.0, 1.0],
            reaction: [2.0, 7.0],
            actuator: Rect::square(0.2, 0.6),
            state_weight: 10.0,
            control_weight: 1.0,
            discount: 1e-3,
            dt: 1e-3,
            control_root: 3.0,
            control_count: 41,
            ensemble_scale: 0.45,
            ensemble_decay: 5.0,
        }
    }
}

/// `y − y³`.
pub fn cubic_reaction(y: &[f64], alpha: f64, out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(y) {
        *o += alpha * (v - v * v * v);
    }
}

impl Test2Spec {
    pub fn grid(&self) -> SquareGrid {
        SquareGrid::new(self.resolution)
    }

    /// `ν Δ − c · ∇` with central differences.
    pub fn linear_operator(&self) -> CsrMatrix<f64> {
        let g = self.grid();
        let grad = g.central_transport(self.convection);
        g.laplacian() * self.diffusion - grad
    }

    pub fn build(&self) -> Result<Problem> {
        crate::check_resolution(self.resolution)?;
        let g = self.grid();
        let n = g.len();
        let system = SeparableControlSystem::new(
            n,
            1,
            vec![
                DriftTerm {
                    coefficient: constant(1.0),
                    field: StateField::Linear(Operator::Sparse(self.linear_operator())),
                },
                DriftTerm {
                    coefficient: component(0),
                    field: StateField::Nonlinear {
                        eval: Arc::new(cubic_reaction),
                        jacobian: Some(Arc::new(|y: &[f64]| {
                            DMatrix::from_diagonal(&DVector::from_iterator(
                                y.len(),
                                y.iter().map(|v| 1.0 - 3.0 * v * v),
                            ))
                        })),
                    },
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
            StateWeight::Terms(vec![(
                constant(self.state_weight),
                Operator::Sparse(CsrMatrix::identity(n)),
            )]),
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
            name: "test2".into(),
            system,
            cost,
            domain: ParameterDomain::new(vec![self.reaction[0]], vec![self.reaction[1]])?,
            controls: ControlGrid::scalar(&cubic_controls(self.control_root, self.control_count))?,
            ensemble,
            stepper: StepperConfig::new(Scheme::ExplicitEuler, self.dt)?,
        })
    }
}
