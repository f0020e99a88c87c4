//! Dense kernels backed by LAPACK: real Schur forms, Sylvester and Lyapunov
//! solves, symmetric eigendecompositions, thin SVDs and banded LU.

extern crate openblas_src;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn lapack_ok(routine: &'static str, info: i32) -> Result<()> {
    if info != 0 {
        return Err(Error::Lapack { routine, info });
    }
    Ok(())
}

fn require_square(context: &'static str, a: &DMatrix<f64>) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            context,
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Real Schur decomposition `A = U T Uᵀ` with `T` quasi upper triangular.
#[derive(Debug, Clone)]
pub struct RealSchur {
    pub t: DMatrix<f64>,
    pub u: DMatrix<f64>,
    /// Eigenvalues as `(re, im)` pairs in the order they appear on the diagonal of `t`.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Number of leading eigenvalues selected by the ordering predicate, if any.
    pub selected: usize,
}

extern "C" fn select_negative_real(re: *const f64, _im: *const f64) -> i32 {
    // SAFETY: LAPACK passes valid pointers to the current eigenvalue.
    i32::from(unsafe { *re } < 0.0)
}

fn gees(a: &DMatrix<f64>, vectors: bool, sort_stable: bool) -> Result<RealSchur> {
    let n = require_square("schur", a)?;
    if n == 0 {
        return Ok(RealSchur {
            t: DMatrix::zeros(0, 0),
            u: DMatrix::zeros(0, 0),
            eigenvalues: Vec::new(),
            selected: 0,
        });
    }
    let ni = n as i32;
    let mut t = a.clone();
    let mut wr = vec![0.0; n];
    let mut wi = vec![0.0; n];
    let ldvs = if vectors { n } else { 1 };
    let mut vs = vec![0.0; ldvs * if vectors { n } else { 1 }];
    let mut sdim = 0;
    let mut bwork = vec![0; n];
    let mut info = 0;
    let jobvs = if vectors { b'V' } else { b'N' };
    let (sort, select): (u8, lapack::Select2F64) = if sort_stable {
        (b'S', Some(select_negative_real))
    } else {
        (b'N', None)
    };
    let mut query = [0.0];
    // SAFETY: all buffers are sized per the LAPACK contract for dgees.
    unsafe {
        lapack::dgees(
            jobvs, sort, select, ni, t.as_mut_slice(), ni, &mut sdim, &mut wr, &mut wi,
            &mut vs, ldvs as i32, &mut query, -1, &mut bwork, &mut info,
        );
    }
    lapack_ok("dgees", info)?;
    let lwork = (query[0] as usize).max(3 * n);
    let mut work = vec![0.0; lwork];
    unsafe {
        lapack::dgees(
            jobvs, sort, select, ni, t.as_mut_slice(), ni, &mut sdim, &mut wr, &mut wi,
            &mut vs, ldvs as i32, &mut work, lwork as i32, &mut bwork, &mut info,
        );
    }
    // info = n + 2 only reports rounding trouble in the reordering check.
    if info != 0 && !(sort_stable && info == ni + 2) {
        return Err(Error::Lapack {
            routine: "dgees",
            info,
        });
    }
    let u = if vectors {
        DMatrix::from_vec(n, n, vs)
    } else {
        DMatrix::zeros(0, 0)
    };
    Ok(RealSchur {
        t,
        u,
        eigenvalues: wr.into_iter().zip(wi).collect(),
        selected: sdim as usize,
    })
}

/// Real Schur decomposition with Schur vectors.
pub fn real_schur(a: &DMatrix<f64>) -> Result<RealSchur> {
    gees(a, true, false)
}

/// Real Schur decomposition ordered so that eigenvalues with negative real
/// part come first; `selected` counts them.
pub fn real_schur_stable_first(a: &DMatrix<f64>) -> Result<RealSchur> {
    gees(a, true, true)
}

/// Eigenvalues of a general square matrix as `(re, im)` pairs.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    Ok(gees(a, false, false)?.eigenvalues)
}

/// Largest real part over the spectrum.
pub fn spectral_abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?
        .into_iter()
        .map(|(re, _)| re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Solves `op(A) X + X op(B) = C` for quasi upper triangular `A` and `B`
/// (as produced by [`real_schur`]). `transpose_a`/`transpose_b` select `op`.
pub fn quasi_triangular_sylvester(
    a: &DMatrix<f64>,
    transpose_a: bool,
    b: &DMatrix<f64>,
    transpose_b: bool,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let m = require_square("sylvester lhs", a)?;
    let n = require_square("sylvester rhs", b)?;
    crate::error::check_dim("sylvester rows", m, c.nrows())?;
    crate::error::check_dim("sylvester cols", n, c.ncols())?;
    if m == 0 || n == 0 {
        return Ok(c.clone());
    }
    let mut x = c.clone();
    let mut scale = [0.0];
    let mut info = 0;
    let op = |t: bool| if t { b'T' } else { b'N' };
    // SAFETY: matrices are column-major with leading dimensions m and n.
    unsafe {
        lapack::dtrsyl(
            op(transpose_a),
            op(transpose_b),
            &[1],
            m as i32,
            n as i32,
            a.as_slice(),
            m as i32,
            b.as_slice(),
            n as i32,
            x.as_mut_slice(),
            m as i32,
            &mut scale,
            &mut info,
        );
    }
    // info = 1 flags perturbed (nearly common) eigenvalues; the solution is still returned.
    if info < 0 {
        return Err(Error::Lapack {
            routine: "dtrsyl",
            info,
        });
    }
    if scale[0] != 1.0 {
        if scale[0] == 0.0 {
            return Err(Error::Lapack {
                routine: "dtrsyl",
                info: 1,
            });
        }
        x /= scale[0];
    }
    Ok(x)
}

/// Solves the Lyapunov equation `Fᵀ X + X F = C` by Bartels–Stewart.
/// The result is symmetrized when `C` is symmetric.
pub fn lyapunov_transposed(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let schur = real_schur(f)?;
    lyapunov_transposed_with(&schur, c)
}

/// As [`lyapunov_transposed`] with a precomputed Schur form of `F`.
pub fn lyapunov_transposed_with(schur: &RealSchur, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let u = &schur.u;
    let rhs = u.transpose() * c * u;
    let y = quasi_triangular_sylvester(&schur.t, true, &schur.t, false, &rhs)?;
    let x = u * y * u.transpose();
    Ok(symmetrize(&x))
}

/// Solves `F X + X Fᵀ = C`.
pub fn lyapunov(f: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let schur = real_schur(f)?;
    let u = &schur.u;
    let rhs = u.transpose() * c * u;
    let y = quasi_triangular_sylvester(&schur.t, false, &schur.t, true, &rhs)?;
    Ok(symmetrize(&(u * y * u.transpose())))
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Eigendecomposition of a symmetric matrix; eigenvalues ascending, eigenvectors as columns.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = require_square("symmetric eigen", a)?;
    if n == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(0, 0)));
    }
    let ni = n as i32;
    let mut v = a.clone();
    let mut w = vec![0.0; n];
    let mut info = 0;
    let mut wq = [0.0];
    let mut iwq = [0];
    // SAFETY: workspace queried first, buffers sized per dsyevd.
    unsafe {
        lapack::dsyevd(
            b'V', b'L', ni, v.as_mut_slice(), ni, &mut w, &mut wq, -1, &mut iwq, -1, &mut info,
        );
    }
    lapack_ok("dsyevd", info)?;
    let lwork = wq[0] as usize;
    let liwork = iwq[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    let mut iwork = vec![0; liwork.max(1)];
    unsafe {
        lapack::dsyevd(
            b'V',
            b'L',
            ni,
            v.as_mut_slice(),
            ni,
            &mut w,
            &mut work,
            lwork as i32,
            &mut iwork,
            liwork as i32,
            &mut info,
        );
    }
    lapack_ok("dsyevd", info)?;
    Ok((DVector::from_vec(w), v))
}

/// Thin SVD `A = U diag(s) Vᵀ`; returns `(s descending, U)`.
pub fn left_singular(a: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok((DVector::zeros(0), DMatrix::zeros(m, 0)));
    }
    let mut work_a = a.clone();
    let mut s = vec![0.0; k];
    let mut u = vec![0.0; m * k];
    let mut vt = vec![0.0; k * n];
    let mut iwork = vec![0; 8 * k];
    let mut info = 0;
    let mut wq = [0.0];
    // SAFETY: jobz = 'S' with U m×k and Vᵀ k×n, workspace queried first.
    unsafe {
        lapack::dgesdd(
            b'S', m as i32, n as i32, work_a.as_mut_slice(), m as i32, &mut s, &mut u, m as i32,
            &mut vt, k as i32, &mut wq, -1, &mut iwork, &mut info,
        );
    }
    lapack_ok("dgesdd", info)?;
    let lwork = wq[0] as usize;
    let mut work = vec![0.0; lwork.max(1)];
    unsafe {
        lapack::dgesdd(
            b'S',
            m as i32,
            n as i32,
            work_a.as_mut_slice(),
            m as i32,
            &mut s,
            &mut u,
            m as i32,
            &mut vt,
            k as i32,
            &mut work,
            lwork as i32,
            &mut iwork,
            &mut info,
        );
    }
    lapack_ok("dgesdd", info)?;
    Ok((DVector::from_vec(s), DMatrix::from_vec(m, k, u)))
}

/// LU factorization of a banded matrix with partial pivoting.
#[derive(Debug, Clone)]
pub struct BandedLu {
    n: usize,
    lower: usize,
    upper: usize,
    ab: Vec<f64>,
    pivots: Vec<i32>,
}

impl BandedLu {
    /// Lower and upper bandwidths of a dense matrix.
    pub fn bandwidths(a: &DMatrix<f64>) -> (usize, usize) {
        let mut kl = 0;
        let mut ku = 0;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                if a[(i, j)] != 0.0 {
                    if i > j {
                        kl = kl.max(i - j);
                    } else {
                        ku = ku.max(j - i);
                    }
                }
            }
        }
        (kl, ku)
    }

    /// Factors `a` using its `lower`/`upper` bandwidths; entries outside the band are ignored.
    pub fn factor(a: &DMatrix<f64>, lower: usize, upper: usize) -> Result<Self> {
        let n = require_square("banded lu", a)?;
        let ldab = 2 * lower + upper + 1;
        let mut ab = vec![0.0; ldab * n];
        for j in 0..n {
            let i0 = j.saturating_sub(upper);
            let i1 = (j + lower).min(n - 1);
            for i in i0..=i1 {
                ab[lower + upper + i - j + j * ldab] = a[(i, j)];
            }
        }
        let mut pivots = vec![0; n];
        let mut info = 0;
        // SAFETY: band storage laid out per dgbtrf with ldab = 2kl + ku + 1.
        unsafe {
            lapack::dgbtrf(
                n as i32,
                n as i32,
                lower as i32,
                upper as i32,
                &mut ab,
                ldab as i32,
                &mut pivots,
                &mut info,
            );
        }
        lapack_ok("dgbtrf", info)?;
        Ok(Self {
            n,
            lower,
            upper,
            ab,
            pivots,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solves `A x = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) -> Result<()> {
        crate::error::check_dim("banded solve", self.n, b.len())?;
        let mut info = 0;
        let ldab = 2 * self.lower + self.upper + 1;
        // SAFETY: factors produced by dgbtrf with matching dimensions.
        unsafe {
            lapack::dgbtrs(
                b'N',
                self.n as i32,
                self.lower as i32,
                self.upper as i32,
                1,
                &self.ab,
                ldab as i32,
                &self.pivots,
                b,
                self.n as i32,
                &mut info,
            );
        }
        lapack_ok("dgbtrs", info)
    }
}
