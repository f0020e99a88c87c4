use nalgebra::{DMatrix, DVector};

use super::interp::{Stencil, ValueField};
use crate::basis::ReducedBasis;
use crate::error::{check_dim, Result};
use crate::model::{ControlGrid, Controller, FrozenCost, SeparableControlSystem};
use crate::reduced::Coefficients;

/// Feedback law `u*(x) = argmin_u e^{−λΔt} I[V](Ψᵀ(x + Δt f(x, u; μ))) + Δt g(x, u; μ)`
/// with full-order dynamics and cost.
pub struct HjbFeedback<'a> {
    field: &'a ValueField,
    basis: &'a ReducedBasis,
    sys: &'a SeparableControlSystem,
    controls: &'a ControlGrid,
    cost: FrozenCost,
    coeffs: Coefficients,
    dt: f64,
    decay: f64,
    control_costs: Vec<f64>,
    drift: Vec<f64>,
    input: DMatrix<f64>,
    foot: Vec<f64>,
    st: Stencil,
    saturated: usize,
    calls: usize,
}

impl<'a> HjbFeedback<'a> {
    /// `dt` and `discount` are those of the scheme that produced `field`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        field: &'a ValueField,
        basis: &'a ReducedBasis,
        sys: &'a SeparableControlSystem,
        controls: &'a ControlGrid,
        cost: FrozenCost,
        mu: &[f64],
        dt: f64,
        discount: f64,
    ) -> Result<Self> {
        check_dim("basis rows", sys.state_dim(), basis.state_dim())?;
        check_dim("grid dimension", basis.len(), field.grid().dim())?;
        check_dim("control dimension", sys.control_dim(), controls.dim())?;
        let control_costs = controls.iter().map(|u| cost.control_cost(u)).collect();
        Ok(Self {
            field,
            basis,
            sys,
            controls,
            cost,
            coeffs: Coefficients::at(sys, mu),
            dt,
            decay: (-discount * dt).exp(),
            control_costs,
            drift: vec![0.0; sys.state_dim()],
            input: DMatrix::zeros(sys.state_dim(), sys.control_dim()),
            foot: vec![0.0; basis.len()],
            st: Stencil::new(),
            saturated: 0,
            calls: 0,
        })
    }

    /// Index of the minimizing control; the lowest index wins ties.
    pub fn select(&mut self, y: &[f64]) -> usize {
        self.sys.control_affine_parts(
            &self.coeffs.drift,
            &self.coeffs.control,
            y,
            &mut self.drift,
            &mut self.input,
        );
        let psi = self.basis.matrix();
        let x = self.basis.project(y);
        let d = self.basis.project(&self.drift);
        let g: DMatrix<f64> = psi.tr_mul(&self.input);
        let base: DVector<f64> = x + d * self.dt;
        let state_cost = self.cost.state_cost(y);
        let mut best = f64::INFINITY;
        let mut arg = 0;
        let mut any_inside = false;
        for (k, u) in self.controls.iter().enumerate() {
            for (i, f) in self.foot.iter_mut().enumerate() {
                let mut v = base[i];
                for (c, uc) in u.iter().enumerate() {
                    v += self.dt * g[(i, c)] * uc;
                }
                *f = v;
            }
            let val = self.decay * self.field.interpolate_with(&self.foot, &mut self.st)
                + self.dt * (state_cost + self.control_costs[k]);
            any_inside |= self.st.inside;
            if val < best {
                best = val;
                arg = k;
            }
        }
        self.calls += 1;
        if !any_inside {
            self.saturated += 1;
        }
        arg
    }

    /// Queries where every candidate foot point left the grid.
    pub fn saturation_count(&self) -> usize {
        self.saturated
    }

    pub fn query_count(&self) -> usize {
        self.calls
    }
}

impl Controller for HjbFeedback<'_> {
    fn control(&mut self, _t: f64, y: &[f64], u: &mut [f64]) -> Result<()> {
        let k = self.select(y);
        u.copy_from_slice(self.controls.get(k));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{TensorGrid, UnivariateGrid};
    use crate::hjb::{value_iteration, SlConfig, SlModel};
    use crate::model::{
        constant, ControlTerm, DriftTerm, InputField, Operator, QuadraticCost, StateField,
        StateWeight,
    };
    use crate::riccati::{lqr_gain, solve_are, AreProblem};
    use std::sync::Arc;

    /// `ẏ = u` embedded in `ℝ²` with a passive second state.
    fn integrator() -> (SeparableControlSystem, QuadraticCost, ReducedBasis) {
        let sys = SeparableControlSystem::new(
            2,
            1,
            vec![DriftTerm {
                coefficient: constant(1.0),
                field: StateField::Linear(Operator::Dense(DMatrix::from_row_slice(
                    2,
                    2,
                    &[0.0, 0.0, 0.0, -1.0],
                ))),
            }],
            vec![ControlTerm {
                coefficient: constant(1.0),
                field: InputField::Constant(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])),
            }],
        )
        .unwrap();
        let cost = QuadraticCost::new(
            StateWeight::Terms(vec![(
                constant(1.0),
                Operator::Dense(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]))),
            )]),
            Arc::new(|_mu: &[f64]| DMatrix::identity(1, 1)),
            1e-3,
        )
        .unwrap();
        let basis =
            ReducedBasis::from_orthonormal(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        (sys, cost, basis)
    }

    struct Line {
        grid: TensorGrid,
    }

    impl SlModel for Line {
        fn grid(&self) -> &TensorGrid {
            &self.grid
        }
        fn velocity(&self, _j: usize, u: &[f64], out: &mut [f64]) {
            out[0] = u[0];
        }
        fn state_cost(&self, j: usize) -> f64 {
            self.grid.node(j)[0].powi(2)
        }
        fn control_cost(&self, u: &[f64]) -> f64 {
            u[0] * u[0]
        }
    }

    #[test]
    fn single_zero_control() {
        let (sys, cost, basis) = integrator();
        let grid = TensorGrid::new(vec![UnivariateGrid::uniform(-1.0, 1.0, 5).unwrap()]).unwrap();
        let field = ValueField::constant(grid, 0.0, 1.0).unwrap();
        let controls = ControlGrid::scalar(&[0.0]).unwrap();
        let mut fb =
            HjbFeedback::new(&field, &basis, &sys, &controls, cost.at(&[]), &[], 0.1, 1e-3)
                .unwrap();
        let mut u = [1.0];
        fb.control(0.0, &[0.4, 0.2], &mut u).unwrap();
        assert_eq!(u, [0.0]);
    }

    #[test]
    fn lq_feedback_tracks_lqr_gain() {
        let (sys, cost, basis) = integrator();
        let discount = cost.discount;
        let prob = AreProblem::new(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
            discount,
        )
        .unwrap();
        let sol = solve_are(&prob).unwrap();
        let k = lqr_gain(&prob, &sol)[(0, 0)];
        let grid = TensorGrid::new(vec![UnivariateGrid::uniform(-1.0, 1.0, 201).unwrap()]).unwrap();
        let values: Vec<f64> = (0..=200).map(|i| -2.0 + 0.02 * i as f64).collect();
        let controls = ControlGrid::scalar(&values).unwrap();
        let cfg = SlConfig {
            vi_tol: 1e-9,
            ..SlConfig::new(0.01, discount).unwrap()
        };
        let model = Line { grid: grid.clone() };
        let f0 = ValueField::constant(grid, 0.0, 1.0).unwrap();
        let vi = value_iteration(&f0, &model, &controls, &cfg).unwrap();
        let mut fb = HjbFeedback::new(
            &vi.field,
            &basis,
            &sys,
            &controls,
            cost.at(&[]),
            &[],
            cfg.dt,
            discount,
        )
        .unwrap();
        let spacing = controls.max_spacing();
        for i in 0..=12 {
            let x = -0.6 + 0.1 * i as f64;
            let u = controls.get(fb.select(&[x, 0.0]))[0];
            assert!((u + k * x).abs() <= spacing + 1e-12, "x={x}: u={u}, lqr={}", -k * x);
        }
        assert_eq!(fb.saturation_count(), 0);
        fb.select(&[5.0, 0.0]);
        assert_eq!(fb.saturation_count(), 1);
    }
}
