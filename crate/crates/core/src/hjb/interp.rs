use crate::domain::TensorGrid;
use crate::error::{check_dim, Error, Result};

/// Nodal values on a tensor grid with a constant value outside its bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    grid: TensorGrid,
    values: Vec<f64>,
    penalty: f64,
    strides: Vec<usize>,
}

/// Multilinear stencil of one query point: at most `2^ℓ` nodes with
/// non-negative weights summing to one.
#[derive(Debug, Clone, Default)]
pub struct Stencil {
    pub inside: bool,
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
    base: Vec<usize>,
    frac: Vec<f64>,
}

impl Stencil {
    pub fn new() -> Self {
        Self::default()
    }
}

impl ValueField {
    pub fn new(grid: TensorGrid, values: Vec<f64>, penalty: f64) -> Result<Self> {
        check_dim("value field", grid.num_nodes(), values.len())?;
        if values.iter().any(|v| !v.is_finite()) || !penalty.is_finite() {
            return Err(Error::InvalidInput("value field entries must be finite".into()));
        }
        let strides = grid.strides();
        Ok(Self {
            grid,
            values,
            penalty,
            strides,
        })
    }

    pub fn constant(grid: TensorGrid, value: f64, penalty: f64) -> Result<Self> {
        let n = grid.num_nodes();
        Self::new(grid, vec![value; n], penalty)
    }

    pub fn grid(&self) -> &TensorGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn penalty(&self) -> f64 {
        self.penalty
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Same grid and penalty, new nodal values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_dim("value field", self.values.len(), values.len())?;
        Ok(Self {
            grid: self.grid.clone(),
            values,
            penalty: self.penalty,
            strides: self.strides.clone(),
        })
    }

    pub fn with_penalty(mut self, penalty: f64) -> Self {
        self.penalty = penalty;
        self
    }

    /// Fills `st` with the interpolation stencil of `x`; `st.inside` is false
    /// when `x` leaves the bounding box in some coordinate.
    pub fn stencil(&self, x: &[f64], st: &mut Stencil) {
        let dim = self.grid.dim();
        st.nodes.clear();
        st.weights.clear();
        st.base.clear();
        st.frac.clear();
        st.inside = false;
        for (axis, &xj) in self.grid.axes().iter().zip(x) {
            let s = axis.nodes();
            let h = s.len();
            if !(xj >= s[0] && xj <= s[h - 1]) {
                return;
            }
            if h == 1 {
                st.base.push(0);
                st.frac.push(0.0);
                continue;
            }
            let i = (s.partition_point(|&v| v <= xj).max(1) - 1).min(h - 2);
            st.base.push(i);
            st.frac.push((xj - s[i]) / (s[i + 1] - s[i]));
        }
        st.inside = true;
        for corner in 0..(1usize << dim) {
            let mut w = 1.0;
            let mut idx = 0;
            for j in 0..dim {
                let up = (corner >> (dim - 1 - j)) & 1 == 1;
                let t = st.frac[j];
                w *= if up { t } else { 1.0 - t };
                idx += (st.base[j] + up as usize) * self.strides[j];
            }
            if w != 0.0 {
                st.nodes.push(idx);
                st.weights.push(w);
            }
        }
    }

    /// Multilinear interpolant, `penalty` outside the bounding box.
    pub fn interpolate_with(&self, x: &[f64], st: &mut Stencil) -> f64 {
        self.stencil(x, st);
        if !st.inside {
            return self.penalty;
        }
        st.nodes
            .iter()
            .zip(&st.weights)
            .map(|(&k, &w)| w * self.values[k])
            .sum()
    }

    pub fn interpolate(&self, x: &[f64]) -> f64 {
        self.interpolate_with(x, &mut Stencil::new())
    }

    /// Interpolates onto the nodes of another grid.
    pub fn resample(&self, grid: &TensorGrid) -> Result<Self> {
        check_dim("grid dimension", self.grid.dim(), grid.dim())?;
        let mut st = Stencil::new();
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.num_nodes())
            .map(|k| {
                grid.node_into(k, &mut x);
                self.interpolate_with(&x, &mut st)
            })
            .collect();
        Self::new(grid.clone(), values, self.penalty)
    }
}
