//! Discounted algebraic Riccati equation and the LQR baseline.
//!
//! The discount `λ` enters only through the shifted drift `A − (λ/2)I`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg;

/// Data of `(A−λ/2 I)ᵀP + P(A−λ/2 I) − P B R⁻¹ Bᵀ P + Q = 0`.
#[derive(Debug, Clone)]
pub struct AreProblem {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub discount: f64,
}

#[derive(Debug, Clone)]
pub struct AreSolution {
    pub p: DMatrix<f64>,
    /// Frobenius norm of the residual, recomputed from `p`.
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AreOptions {
    /// Target for `‖ℛ(P)‖_F / ‖Q‖_F`.
    pub tol: f64,
    /// Largest relative residual accepted once Newton stagnates.
    pub accept: f64,
    pub max_iter: usize,
}

impl Default for AreOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            accept: 1e-9,
            max_iter: 100,
        }
    }
}

impl AreProblem {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        discount: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        check_dim("ARE drift columns", n, a.ncols())?;
        check_dim("ARE input rows", n, b.nrows())?;
        check_dim("ARE state weight rows", n, q.nrows())?;
        check_dim("ARE state weight columns", n, q.ncols())?;
        check_dim("ARE control weight rows", b.ncols(), r.nrows())?;
        check_dim("ARE control weight columns", b.ncols(), r.ncols())?;
        if discount < 0.0 || !discount.is_finite() {
            return Err(Error::InvalidInput(format!("discount must be >= 0, got {discount}")));
        }
        if r.clone().cholesky().is_none() {
            return Err(Error::InvalidInput(
                "control weight must be symmetric positive definite".into(),
            ));
        }
        Ok(Self { a, b, q, r, discount })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// `A − (λ/2) I`.
    pub fn shifted_drift(&self) -> DMatrix<f64> {
        let n = self.state_dim();
        &self.a - DMatrix::identity(n, n) * (0.5 * self.discount)
    }

    fn r_inv(&self) -> DMatrix<f64> {
        // Validated as positive definite in `new`; the fallback covers literal construction.
        match self.r.clone().cholesky() {
            Some(c) => c.inverse(),
            None => self.r.clone().try_inverse().unwrap_or_else(|| self.r.clone() * f64::NAN),
        }
    }
}

fn residual_with(
    shifted: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r_inv: &DMatrix<f64>,
    q: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> DMatrix<f64> {
    let ap = shifted.transpose() * p;
    let pb = p * b;
    let quad = &pb * r_inv * pb.transpose();
    &ap + ap.transpose() - quad + q
}

/// `(A−λ/2 I)ᵀP + P(A−λ/2 I) − P B R⁻¹ Bᵀ P + Q`.
pub fn are_residual(prob: &AreProblem, p: &DMatrix<f64>) -> DMatrix<f64> {
    residual_with(&prob.shifted_drift(), &prob.b, &prob.r_inv(), &prob.q, p)
}

fn q_scale(q: &DMatrix<f64>) -> f64 {
    let norm = q.norm();
    if norm > 0.0 {
        norm
    } else {
        1.0
    }
}

/// Gain `K₀` with `A − (λ/2)I − B K₀` Hurwitz.
///
/// The unstable invariant subspace is isolated by an ordered Schur form and
/// stabilized through a small Lyapunov solve on that block.
pub fn stabilizing_gain(prob: &AreProblem) -> Result<DMatrix<f64>> {
    let shifted = prob.shifted_drift();
    let n = prob.state_dim();
    let m = prob.b.ncols();
    let schur = linalg::real_schur_stable_first(&shifted)?;
    let k = schur.selected;
    if k == n {
        return Ok(DMatrix::zeros(m, n));
    }
    let u2 = schur.u.columns(k, n - k).into_owned();
    let t22 = schur.t.view((k, k), (n - k, n - k)).into_owned();
    let b2 = u2.transpose() * &prob.b;
    let r_inv = prob.r_inv();
    let min_re = schur.eigenvalues[k..]
        .iter()
        .map(|e| e.0)
        .fold(f64::INFINITY, f64::min);
    let max_abs = schur.eigenvalues[k..]
        .iter()
        .map(|e| e.0.hypot(e.1))
        .fold(0.0, f64::max);
    let beta = (-min_re).max(0.0) + 1e-2 * (1.0 + max_abs);
    let size = n - k;
    let shifted_block = &t22 + DMatrix::identity(size, size) * beta;
    let rhs = &b2 * &r_inv * b2.transpose();
    let x = linalg::lyapunov(&shifted_block, &rhs)?;
    let x_inv = x.clone().cholesky().map(|c| c.inverse()).ok_or_else(|| {
        Error::Riccati("unstable modes are not controllable; no stabilizing gain".into())
    })?;
    let k2 = &r_inv * b2.transpose() * x_inv;
    Ok(k2 * u2.transpose())
}

/// Newton–Kleinman iteration for the stabilizing solution.
pub fn solve_are(prob: &AreProblem) -> Result<AreSolution> {
    solve_are_with(prob, AreOptions::default())
}

pub fn solve_are_with(prob: &AreProblem, opts: AreOptions) -> Result<AreSolution> {
    let n = prob.state_dim();
    let shifted = prob.shifted_drift();
    let r_inv = prob.r_inv();
    let scale = q_scale(&prob.q);
    let rbt = &r_inv * prob.b.transpose();

    let mut gain = stabilizing_gain(prob)?;
    let closed = &shifted - &prob.b * &gain;
    if linalg::spectral_abscissa(&closed)? >= 0.0 {
        return Err(Error::Riccati("failed to construct a stabilizing initial gain".into()));
    }

    let mut best: Option<(DMatrix<f64>, f64)> = None;
    let mut prev = f64::INFINITY;
    let mut stalls = 0;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let closed = &shifted - &prob.b * &gain;
        let rhs = -(&prob.q + gain.transpose() * &prob.r * &gain);
        let p = linalg::lyapunov_transposed(&closed, &rhs)?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Riccati(format!(
                "non-finite Lyapunov solution at Newton step {iterations}"
            )));
        }
        let rel = residual_with(&shifted, &prob.b, &r_inv, &prob.q, &p).norm() / scale;
        gain = &rbt * &p;
        if best.as_ref().is_none_or(|(_, r)| rel < *r) {
            best = Some((p, rel));
        }
        if rel <= opts.tol {
            break;
        }
        if rel > 0.5 * prev {
            stalls += 1;
            if stalls >= 3 && rel <= opts.accept {
                break;
            }
            if stalls >= 10 {
                break;
            }
        } else {
            stalls = 0;
        }
        prev = rel;
    }
    let (p, _) = best.expect("at least one Newton step");
    let p = linalg::symmetrize(&p);
    let residual_norm = residual_with(&shifted, &prob.b, &r_inv, &prob.q, &p).norm();
    if residual_norm / scale > opts.accept {
        return Err(Error::NotConverged {
            what: "Newton-Kleinman",
            iterations,
            residual: residual_norm / scale,
        });
    }
    let closed = &shifted - &prob.b * (&rbt * &p);
    let abscissa = linalg::spectral_abscissa(&closed)?;
    if abscissa >= 0.0 {
        return Err(Error::Riccati(format!(
            "solution is not stabilizing (spectral abscissa {abscissa:e})"
        )));
    }
    debug_assert_eq!(p.nrows(), n);
    Ok(AreSolution {
        p,
        residual_norm,
        iterations,
    })
}

/// `K = R⁻¹ Bᵀ P`.
pub fn lqr_gain(prob: &AreProblem, sol: &AreSolution) -> DMatrix<f64> {
    prob.r_inv() * prob.b.transpose() * &sol.p
}

/// `xᵀ P x`.
pub fn lqr_value(sol: &AreSolution, x: &DVector<f64>) -> f64 {
    x.dot(&(&sol.p * x))
}
