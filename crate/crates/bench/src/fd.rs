//! Finite differences on the interior nodes of a uniform grid of the unit square
//! with homogeneous Dirichlet data.

use nalgebra_sparse::{CooMatrix, CsrMatrix};

/// `k × k` interior nodes, spacing `1/(k+1)`; node `(i, j)` sits at
/// `((i+1)h, (j+1)h)` and has index `i + k j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquareGrid {
    k: usize,
}

impl SquareGrid {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "need at least 2 interior nodes per axis");
        Self { k }
    }

    pub fn per_axis(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.k + 1) as f64
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.k * j
    }

    pub fn coords(&self, p: usize) -> [f64; 2] {
        let h = self.spacing();
        [((p % self.k) + 1) as f64 * h, ((p / self.k) + 1) as f64 * h]
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|p| self.coords(p).to_vec()).collect()
    }

    /// `1` at nodes where `inside` holds, `0` elsewhere.
    pub fn indicator(&self, inside: impl Fn([f64; 2]) -> bool) -> Vec<f64> {
        (0..self.len())
            .map(|p| if inside(self.coords(p)) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Neighbour of `p` one step along `axis` in direction `dir`, `None` on the boundary.
    pub fn neighbour(&self, p: usize, axis: usize, dir: isize) -> Option<usize> {
        let (i, j) = (p % self.k, p / self.k);
        let (c, other) = if axis == 0 { (i, j) } else { (j, i) };
        let next = c as isize + dir;
        if next < 0 || next >= self.k as isize {
            return None;
        }
        let next = next as usize;
        Some(if axis == 0 {
            self.index(next, other)
        } else {
            self.index(other, next)
        })
    }

    /// Five-point Laplacian.
    pub fn laplacian(&self) -> CsrMatrix<f64> {
        let n = self.len();
        let h2 = self.spacing().powi(2);
        let mut coo = CooMatrix::new(n, n);
        for p in 0..n {
            coo.push(p, p, -4.0 / h2);
            for axis in 0..2 {
                for dir in [-1, 1] {
                    if let Some(q) = self.neighbour(p, axis, dir) {
                        coo.push(p, q, 1.0 / h2);
                    }
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    /// First-order upwind discretization of `v · ∇` for a frozen velocity field:
    /// backward differences where a velocity component is positive, forward otherwise.
    pub fn upwind_transport(&self, velocity: impl Fn([f64; 2]) -> [f64; 2]) -> CsrMatrix<f64> {
        let n = self.len();
        let h = self.spacing();
        let mut coo = CooMatrix::new(n, n);
        for p in 0..n {
            let v = velocity(self.coords(p));
            for axis in 0..2 {
                let a = v[axis];
                if a == 0.0 {
                    continue;
                }
                let dir = if a > 0.0 { -1 } else { 1 };
                // a (w_p − w_q)/h for a > 0, a (w_q − w_p)/h otherwise
                let s = a.abs() / h;
                coo.push(p, p, s);
                if let Some(q) = self.neighbour(p, axis, dir) {
                    coo.push(p, q, -s);
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    /// Central differences for `c · ∇` with a constant velocity `c`.
    pub fn central_transport(&self, c: [f64; 2]) -> CsrMatrix<f64> {
        let n = self.len();
        let h = self.spacing();
        let mut coo = CooMatrix::new(n, n);
        for p in 0..n {
            for axis in 0..2 {
                let s = 0.5 * c[axis] / h;
                if let Some(q) = self.neighbour(p, axis, 1) {
                    coo.push(p, q, s);
                }
                if let Some(q) = self.neighbour(p, axis, -1) {
                    coo.push(p, q, -s);
                }
            }
        }
        CsrMatrix::from(&coo)
    }

    /// Upwind derivative of `w` along `axis` at node `p`, the direction chosen by `velocity`.
    pub fn upwind_derivative(&self, w: &[f64], p: usize, axis: usize, velocity: f64) -> f64 {
        let h = self.spacing();
        let at = |q: Option<usize>| q.map_or(0.0, |q| w[q]);
        if velocity > 0.0 {
            (w[p] - at(self.neighbour(p, axis, -1))) / h
        } else {
            (at(self.neighbour(p, axis, 1)) - w[p]) / h
        }
    }
}
