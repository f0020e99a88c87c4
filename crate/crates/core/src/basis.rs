//! Orthonormal projection bases from Riccati solutions: POD, the low-rank
//! factor greedy (LRFG) and adaptive bisection of the parameter domain.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::model::ParameterDomain;
use crate::riccati::{self, AreProblem, AreSolution};

/// Columns of `Ψ` with `ΨᵀΨ = I`. An empty basis has zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedBasis {
    columns: DMatrix<f64>,
}

const ORTHONORMAL_TOL: f64 = 1e-10;

impl ReducedBasis {
    pub fn empty(n: usize) -> Self {
        Self {
            columns: DMatrix::zeros(n, 0),
        }
    }

    /// Wraps columns that are already orthonormal.
    pub fn from_orthonormal(columns: DMatrix<f64>) -> Result<Self> {
        let l = columns.ncols();
        let err = (columns.transpose() * &columns - DMatrix::identity(l, l)).amax();
        if err > ORTHONORMAL_TOL {
            return Err(Error::InvalidInput(format!(
                "basis columns are not orthonormal (max deviation {err:e})"
            )));
        }
        Ok(Self { columns })
    }

    /// Orthonormalizes `columns` by twice-repeated Gram–Schmidt, dropping dependent columns.
    pub fn orthonormalize(columns: &DMatrix<f64>) -> Self {
        let n = columns.nrows();
        let mut kept: Vec<DVector<f64>> = Vec::new();
        for c in columns.column_iter() {
            let original = c.norm();
            if original == 0.0 {
                continue;
            }
            let mut v = c.into_owned();
            for _ in 0..2 {
                for k in &kept {
                    let coef = k.dot(&v);
                    v.axpy(-coef, k, 1.0);
                }
            }
            let norm = v.norm();
            if norm > 1e-10 * original {
                kept.push(v / norm);
            }
        }
        let columns = if kept.is_empty() {
            DMatrix::zeros(n, 0)
        } else {
            DMatrix::from_columns(&kept)
        };
        Self { columns }
    }

    pub fn state_dim(&self) -> usize {
        self.columns.nrows()
    }

    /// Reduced dimension `ℓ`.
    pub fn len(&self) -> usize {
        self.columns.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.ncols() == 0
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.columns
    }

    /// `max |ΨᵀΨ − I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let l = self.len();
        if l == 0 {
            return 0.0;
        }
        (self.columns.transpose() * &self.columns - DMatrix::identity(l, l)).amax()
    }

    /// First `l` columns.
    pub fn truncated(&self, l: usize) -> Self {
        Self {
            columns: self.columns.columns(0, l.min(self.len())).into_owned(),
        }
    }

    /// Appends columns and re-orthonormalizes the whole set.
    pub fn extended(&self, extra: &DMatrix<f64>) -> Self {
        let mut all = DMatrix::zeros(self.state_dim(), self.len() + extra.ncols());
        all.columns_mut(0, self.len()).copy_from(&self.columns);
        all.columns_mut(self.len(), extra.ncols()).copy_from(extra);
        let mut b = Self::orthonormalize(&all);
        fix_signs(&mut b.columns);
        b
    }

    /// `Ψᵀ x`.
    pub fn project(&self, x: &[f64]) -> DVector<f64> {
        self.columns.tr_mul(&DVector::from_column_slice(x))
    }

    /// `Ψ c`.
    pub fn lift(&self, c: &[f64]) -> DVector<f64> {
        &self.columns * DVector::from_column_slice(c)
    }
}

/// Flips columns so that the entry of largest magnitude is positive.
fn fix_signs(columns: &mut DMatrix<f64>) {
    for mut c in columns.column_iter_mut() {
        let imax = c.iamax();
        if c[imax] < 0.0 {
            c.neg_mut();
        }
    }
}

/// Relative slack in the POD energy comparison.
const ENERGY_SLACK: f64 = 1e-12;

/// Left singular vectors capturing at least `1 − energy_tol` of `Σσ²`.
pub fn pod(snapshots: &DMatrix<f64>, energy_tol: f64) -> Result<ReducedBasis> {
    if !(0.0..=1.0).contains(&energy_tol) {
        return Err(Error::InvalidInput(format!(
            "POD energy tolerance must lie in [0, 1], got {energy_tol}"
        )));
    }
    let (s, u) = linalg::left_singular(snapshots)?;
    let total: f64 = s.iter().map(|v| v * v).sum();
    if s.is_empty() || total == 0.0 {
        return Err(Error::EmptyBasis("snapshot matrix is zero".into()));
    }
    let target = ((1.0 - energy_tol) - ENERGY_SLACK * energy_tol) * total;
    let floor = 1e-14 * s[0];
    let mut kept = 0;
    let mut acc = 0.0;
    for &sigma in s.iter() {
        if sigma <= floor {
            break;
        }
        acc += sigma * sigma;
        kept += 1;
        if acc >= target {
            break;
        }
    }
    let mut columns = u.columns(0, kept.max(1)).into_owned();
    fix_signs(&mut columns);
    Ok(ReducedBasis { columns })
}

/// Galerkin projection of an ARE onto `span(Ψ)`.
pub fn project_are(prob: &AreProblem, basis: &ReducedBasis) -> AreProblem {
    let psi = basis.matrix();
    AreProblem {
        a: psi.transpose() * &prob.a * psi,
        b: psi.transpose() * &prob.b,
        q: psi.transpose() * &prob.q * psi,
        r: prob.r.clone(),
        discount: prob.discount,
    }
}

/// Reduced ARE solution `Z` lifted to `Ψ Z Ψᵀ`.
pub fn reduced_are_solution(prob: &AreProblem, basis: &ReducedBasis) -> Result<DMatrix<f64>> {
    let n = prob.state_dim();
    if basis.is_empty() {
        return Ok(DMatrix::zeros(n, n));
    }
    let reduced = project_are(prob, basis);
    let z = riccati::solve_are(&reduced)?.p;
    let psi = basis.matrix();
    Ok(psi * z * psi.transpose())
}

/// `‖ℛ(Ψ Z Ψᵀ)‖_F / ‖Q‖_F`, or `+∞` when the reduced ARE cannot be solved.
pub fn error_indicator(prob: &AreProblem, basis: &ReducedBasis) -> f64 {
    let q_norm = prob.q.norm();
    let q_norm = if q_norm > 0.0 { q_norm } else { 1.0 };
    if basis.is_empty() {
        return prob.q.norm() / q_norm;
    }
    let reduced = project_are(prob, basis);
    let z = match riccati::solve_are(&reduced) {
        Ok(sol) => sol.p,
        Err(e) => {
            log::debug!("reduced ARE failed: {e}");
            return f64::INFINITY;
        }
    };
    // ℛ(ΨZΨᵀ) = F S Fᵀ + Q with F = [Ψ, A_sᵀΨ].
    let psi = basis.matrix();
    let l = psi.ncols();
    let n = prob.state_dim();
    let shifted_t_psi = prob.shifted_drift().tr_mul(psi);
    let bt_psi = prob.b.tr_mul(psi);
    let r_inv = prob
        .r
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .unwrap_or_else(|| DMatrix::from_element(prob.r.nrows(), prob.r.ncols(), f64::NAN));
    let g_hat = bt_psi.transpose() * r_inv * &bt_psi;
    let mut f = DMatrix::zeros(n, 2 * l);
    f.columns_mut(0, l).copy_from(psi);
    f.columns_mut(l, l).copy_from(&shifted_t_psi);
    let mut s = DMatrix::zeros(2 * l, 2 * l);
    s.view_mut((0, 0), (l, l)).copy_from(&(-(&z * g_hat * &z)));
    s.view_mut((0, l), (l, l)).copy_from(&z);
    s.view_mut((l, 0), (l, l)).copy_from(&z);
    let residual = &f * s * f.transpose() + &prob.q;
    residual.norm() / q_norm
}

/// Parameter-dependent linearized control problem.
pub trait LinearizedFamily {
    fn problem(&self, mu: &[f64]) -> Result<AreProblem>;
}

impl<F: Fn(&[f64]) -> Result<AreProblem>> LinearizedFamily for F {
    fn problem(&self, mu: &[f64]) -> Result<AreProblem> {
        self(mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyConfig {
    /// Greedy tolerance `ε` on the maximal indicator.
    pub tol: f64,
    /// POD energy tolerance `ε_POD`.
    pub pod_tol: f64,
    /// Largest admissible basis size `ℓ_max`.
    pub max_size: usize,
}

impl GreedyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("greedy tolerance must be > 0, got {}", self.tol)));
        }
        if !(0.0..=1.0).contains(&self.pod_tol) {
            return Err(Error::InvalidInput(format!(
                "POD tolerance must lie in [0, 1], got {}",
                self.pod_tol
            )));
        }
        if self.max_size == 0 {
            return Err(Error::InvalidInput("maximal basis size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Outcome of one LRFG run.
#[derive(Debug, Clone)]
pub struct GreedyResult {
    pub basis: ReducedBasis,
    /// Maximal indicator over the training set for the returned basis.
    pub max_indicator: f64,
    pub iterations: usize,
    /// Maximal indicator before each enrichment and after the last one.
    pub history: Vec<f64>,
    /// Selected training parameters, in order.
    pub selected: Vec<Vec<f64>>,
}

fn mu_key(mu: &[f64]) -> Vec<u64> {
    mu.iter().map(|v| v.to_bits()).collect()
}

/// Memoizes full-order ARE solutions by parameter.
#[derive(Default)]
pub struct AreCache {
    solutions: HashMap<Vec<u64>, AreSolution>,
}

impl AreCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn solve(&mut self, family: &dyn LinearizedFamily, mu: &[f64]) -> Result<&AreSolution> {
        let key = mu_key(mu);
        if !self.solutions.contains_key(&key) {
            let prob = family.problem(mu)?;
            let sol = riccati::solve_are(&prob).map_err(|e| {
                Error::Riccati(format!("full-order ARE at parameter {mu:?} failed: {e}"))
            })?;
            self.solutions.insert(key.clone(), sol);
        }
        Ok(&self.solutions[&key])
    }

    pub fn len(&self) -> usize {
        self.solutions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.solutions.is_empty()
    }
}

fn indicators(
    family: &dyn LinearizedFamily,
    train: &[Vec<f64>],
    basis: &ReducedBasis,
) -> Result<Vec<f64>> {
    train
        .iter()
        .map(|mu| Ok(error_indicator(&family.problem(mu)?, basis)))
        .collect()
}

/// Index of the largest value, lowest index on ties; NaN counts as largest.
fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 || (v.is_nan() && !best.1.is_nan()) {
            best = (i, v);
        }
    }
    best
}

/// Low-rank factor greedy over `train`.
pub fn lrfg(
    cfg: &GreedyConfig,
    train: &[Vec<f64>],
    initial: ReducedBasis,
    family: &dyn LinearizedFamily,
    cache: &mut AreCache,
) -> Result<GreedyResult> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set must be non-empty".into()));
    }
    let mut basis = initial;
    let mut history = Vec::new();
    let mut selected = Vec::new();
    let mut iterations = 0;
    loop {
        let values = indicators(family, train, &basis)?;
        let (imax, dmax) = argmax(&values);
        history.push(dmax);
        if dmax <= cfg.tol || basis.len() >= cfg.max_size {
            return Ok(GreedyResult {
                basis,
                max_indicator: dmax,
                iterations,
                history,
                selected,
            });
        }
        let mu_star = &train[imax];
        let p = &cache.solve(family, mu_star)?.p;
        check_dim("ARE solution", basis.state_dim(), p.nrows())?;
        let psi = basis.matrix();
        let deflated = if basis.is_empty() {
            p.clone()
        } else {
            p - psi * psi.tr_mul(p)
        };
        let fresh = match pod(&deflated, cfg.pod_tol) {
            Ok(b) => b,
            Err(Error::EmptyBasis(_)) => {
                return Ok(GreedyResult {
                    basis,
                    max_indicator: dmax,
                    iterations,
                    history,
                    selected,
                })
            }
            Err(e) => return Err(e),
        };
        let room = cfg.max_size - basis.len();
        let take = fresh.len().min(room);
        let before = basis.len();
        basis = basis.extended(&fresh.matrix().columns(0, take).into_owned());
        debug_assert!(basis.orthonormality_error() <= 1e-12);
        iterations += 1;
        selected.push(mu_star.clone());
        log::debug!(
            "LRFG iteration {iterations}: max indicator {dmax:e} at {mu_star:?}, basis {before} -> {}",
            basis.len()
        );
        if basis.len() == before {
            // Numerically dependent directions only; nothing left to add.
            let values = indicators(family, train, &basis)?;
            let (_, dmax) = argmax(&values);
            history.push(dmax);
            return Ok(GreedyResult {
                basis,
                max_indicator: dmax,
                iterations,
                history,
                selected,
            });
        }
    }
}

/// Closed axis-aligned sub-box of the parameter domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Number of bisections that produced this box.
    pub depth: usize,
}

impl ParameterBox {
    pub fn barycenter(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn volume(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).product()
    }

    pub fn contains(&self, mu: &[f64]) -> bool {
        mu.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(m, (l, u))| *l <= *m && *m <= *u)
    }

    pub fn as_domain(&self) -> ParameterDomain {
        ParameterDomain::new(self.lower.clone(), self.upper.clone())
            .expect("boxes are non-degenerate")
    }

    /// The `2^q` halves, ordered lexicographically with the first axis slowest.
    pub fn bisect(&self) -> Vec<ParameterBox> {
        let q = self.lower.len();
        let mid = self.barycenter();
        (0..1usize << q)
            .map(|c| {
                let mut lower = self.lower.clone();
                let mut upper = self.upper.clone();
                for j in 0..q {
                    if (c >> (q - 1 - j)) & 1 == 0 {
                        upper[j] = mid[j];
                    } else {
                        lower[j] = mid[j];
                    }
                }
                ParameterBox {
                    lower,
                    upper,
                    depth: self.depth + 1,
                }
            })
            .collect()
    }
}

/// Leaf boxes with their bases, in depth-first order.
#[derive(Debug, Clone)]
pub struct ParameterPartition {
    pub domain: ParameterDomain,
    pub boxes: Vec<ParameterBox>,
    pub bases: Vec<ReducedBasis>,
    pub indicators: Vec<f64>,
}

impl ParameterPartition {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn max_depth(&self) -> usize {
        self.boxes.iter().map(|b| b.depth).max().unwrap_or(0)
    }

    /// Index of the box containing `mu`; the smallest index wins on shared faces.
    pub fn locate(&self, mu: &[f64]) -> Result<usize> {
        check_dim("parameter", self.domain.dim(), mu.len())?;
        if !self.domain.contains(mu) {
            return Err(Error::InvalidInput(format!("parameter {mu:?} lies outside the domain")));
        }
        self.boxes
            .iter()
            .position(|b| b.contains(mu))
            .ok_or_else(|| Error::InvalidInput(format!("no box contains {mu:?}")))
    }
}

/// Basis proposal for one box.
#[derive(Debug, Clone)]
pub struct BoxBasis {
    pub basis: ReducedBasis,
    pub max_indicator: f64,
}

/// Recursive bisection driven by `build`; a box is accepted once its
/// indicator is at most `tol` or it sits at depth `max_refine`.
pub fn partition_with(
    domain: &ParameterDomain,
    tol: f64,
    max_refine: usize,
    mut build: impl FnMut(&ParameterBox) -> Result<BoxBasis>,
) -> Result<ParameterPartition> {
    let root = ParameterBox {
        lower: domain.lower().to_vec(),
        upper: domain.upper().to_vec(),
        depth: 0,
    };
    let mut boxes = Vec::new();
    let mut bases = Vec::new();
    let mut values = Vec::new();
    let mut stack = vec![root];
    while let Some(current) = stack.pop() {
        let proposal = build(&current)?;
        if proposal.max_indicator <= tol || current.depth >= max_refine {
            log::debug!(
                "accepting box {:?}..{:?} at depth {} (indicator {:e}, size {})",
                current.lower,
                current.upper,
                current.depth,
                proposal.max_indicator,
                proposal.basis.len()
            );
            boxes.push(current);
            bases.push(proposal.basis);
            values.push(proposal.max_indicator);
        } else {
            let mut children = current.bisect();
            children.reverse();
            stack.extend(children);
        }
    }
    Ok(ParameterPartition {
        domain: domain.clone(),
        boxes,
        bases,
        indicators: values,
    })
}

/// Adaptive partition with an LRFG basis per box, trained on a tensor grid of
/// `train_per_axis` points per axis of the box.
pub fn adaptive_partition(
    domain: &ParameterDomain,
    cfg: &GreedyConfig,
    train_per_axis: usize,
    max_refine: usize,
    family: &dyn LinearizedFamily,
) -> Result<ParameterPartition> {
    cfg.validate()?;
    let n = family.problem(domain.lower())?.state_dim();
    let mut cache = AreCache::new();
    partition_with(domain, cfg.tol, max_refine, |b| {
        let train = b.as_domain().tensor_samples(train_per_axis);
        let result = lrfg(cfg, &train, ReducedBasis::empty(n), family, &mut cache)?;
        Ok(BoxBasis {
            basis: result.basis,
            max_indicator: result.max_indicator,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_problem(n: usize, seed: u64) -> AreProblem {
        let a = random_matrix(n, n, seed) - DMatrix::identity(n, n) * 2.0;
        let b = random_matrix(n, 1, seed + 1);
        let c = random_matrix(2, n, seed + 2);
        AreProblem::new(a, b, c.transpose() * c, DMatrix::identity(1, 1), 0.01).unwrap()
    }

    /// Diffusion-like family `A(μ) = μ₀ L − I` on a 1D chain.
    fn chain_family(n: usize) -> impl Fn(&[f64]) -> Result<AreProblem> {
        move |mu: &[f64]| {
            let lap = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
                0 => -2.0,
                1 => 1.0,
                _ => 0.0,
            });
            let adv = DMatrix::from_fn(n, n, |i, j| {
                if i == j + 1 {
                    1.0
                } else if j == i + 1 {
                    -1.0
                } else {
                    0.0
                }
            });
            let a = lap * mu[0] + adv * mu.get(1).copied().unwrap_or(0.0);
            let b = DMatrix::from_fn(n, 1, |i, _| if i < n / 3 { 1.0 } else { 0.0 });
            let c = DMatrix::from_fn(1, n, |_, j| if j >= 2 * n / 3 { 1.0 } else { 0.0 });
            AreProblem::new(a, b, c.transpose() * c * 10.0, DMatrix::identity(1, 1), 1e-3)
        }
    }

    #[test]
    fn pod_of_rank_one_is_normalized_column() {
        let v = DVector::from_vec(vec![1.0, 2.0, -2.0]);
        let x = DMatrix::from_columns(&[v.clone(), v.clone() * 3.0]);
        let b = pod(&x, 0.0).unwrap();
        assert_eq!(b.len(), 1);
        let expect = &v / v.norm();
        let got = b.matrix().column(0);
        assert!((got - &expect).norm() < 1e-14 || (got + &expect).norm() < 1e-14);
    }

    #[test]
    fn pod_energy_threshold_is_inclusive() {
        let x = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        assert_eq!(pod(&x, 0.2).unwrap().len(), 1);
        assert_eq!(pod(&x, 0.19).unwrap().len(), 2);
    }

    #[test]
    fn pod_rejects_zero_input() {
        assert!(matches!(pod(&DMatrix::zeros(3, 2), 0.1), Err(Error::EmptyBasis(_))));
    }

    #[test]
    fn pod_reconstruction_error_is_singular_tail() {
        let x = random_matrix(10, 6, 3);
        let b = pod(&x, 0.1).unwrap();
        let psi = b.matrix();
        let err = (&x - psi * psi.tr_mul(&x)).norm_squared();
        let (s, _) = linalg::left_singular(&x).unwrap();
        let tail: f64 = s.iter().skip(b.len()).map(|v| v * v).sum();
        assert!((err - tail).abs() < 1e-10);
    }

    #[test]
    fn indicator_of_empty_basis_is_one() {
        let prob = random_problem(5, 1);
        assert_eq!(error_indicator(&prob, &ReducedBasis::empty(5)), 1.0);
    }

    #[test]
    fn indicator_of_full_basis_is_tiny() {
        let prob = random_problem(6, 2);
        let q = ReducedBasis::orthonormalize(&random_matrix(6, 6, 8));
        assert_eq!(q.len(), 6);
        assert!(error_indicator(&prob, &q) <= 1e-8);
    }

    #[test]
    fn indicator_matches_lifted_residual_oracle() {
        let prob = random_problem(6, 4);
        let basis = ReducedBasis::orthonormalize(&random_matrix(6, 3, 5));
        let lifted = reduced_are_solution(&prob, &basis).unwrap();
        let oracle = riccati::are_residual(&prob, &lifted).norm() / prob.q.norm();
        let got = error_indicator(&prob, &basis);
        assert!((got - oracle).abs() <= 1e-12 * oracle.max(1.0));
    }

    #[test]
    fn lrfg_loop_guard_returns_initial_basis() {
        let family = chain_family(8);
        let cfg = GreedyConfig {
            tol: 2.0,
            pod_tol: 1e-8,
            max_size: 4,
        };
        let mut cache = AreCache::new();
        let r = lrfg(&cfg, &[vec![1.0]], ReducedBasis::empty(8), &family, &mut cache).unwrap();
        assert_eq!(r.iterations, 0);
        assert!(r.basis.is_empty());
        assert!(cache.is_empty());
    }

    #[test]
    fn lrfg_single_parameter_converges_in_one_step() {
        let family = chain_family(10);
        let cfg = GreedyConfig {
            tol: 1e-6,
            pod_tol: 0.0,
            max_size: 10,
        };
        let mut cache = AreCache::new();
        let r = lrfg(&cfg, &[vec![0.7]], ReducedBasis::empty(10), &family, &mut cache).unwrap();
        assert_eq!(r.iterations, 1, "{:?}", r.history);
        let recomputed = error_indicator(&family(&[0.7]).unwrap(), &r.basis);
        assert!(recomputed < 1e-6, "{recomputed}");
        assert!(r.basis.orthonormality_error() <= 1e-12);
    }

    #[test]
    fn lrfg_first_selection_is_exhaustive_argmax() {
        let family = chain_family(12);
        let train = vec![vec![0.05, 0.0], vec![2.0, 3.0]];
        let cfg = GreedyConfig {
            tol: 1e-3,
            pod_tol: 1e-2,
            max_size: 6,
        };
        let base = ReducedBasis::orthonormalize(&random_matrix(12, 1, 6));
        let oracle: Vec<f64> =
            train.iter().map(|mu| error_indicator(&family(mu).unwrap(), &base)).collect();
        let expect = if oracle[1] > oracle[0] { 1 } else { 0 };
        let mut cache = AreCache::new();
        let r = lrfg(&cfg, &train, base, &family, &mut cache).unwrap();
        assert_eq!(r.selected[0], train[expect]);
    }

    #[test]
    fn lrfg_keeps_orthonormality_and_monotone_indicator() {
        let family = chain_family(14);
        let train = ParameterDomain::new(vec![0.2, 0.0], vec![1.0, 2.0])
            .unwrap()
            .tensor_samples(3);
        let cfg = GreedyConfig {
            tol: 1e-9,
            pod_tol: 0.3,
            max_size: 9,
        };
        let mut cache = AreCache::new();
        let mut basis = ReducedBasis::empty(14);
        let mut history = Vec::new();
        // One enrichment per call exposes every intermediate basis.
        for size in 1..=9 {
            let step_cfg = GreedyConfig {
                max_size: size,
                ..cfg.clone()
            };
            let r = lrfg(&step_cfg, &train, basis.clone(), &family, &mut cache).unwrap();
            assert!(r.basis.orthonormality_error() <= 1e-12);
            basis = r.basis;
            history.push(r.max_indicator);
        }
        for w in history.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{history:?}");
        }
    }

    #[test]
    fn partition_root_accepted() {
        let d = ParameterDomain::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let p = partition_with(&d, 0.5, 3, |_| {
            Ok(BoxBasis {
                basis: ReducedBasis::empty(1),
                max_indicator: 0.1,
            })
        })
        .unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.boxes[0].lower, vec![0.0, 0.0]);
        assert_eq!(p.locate(&[0.3, 0.9]).unwrap(), 0);
    }

    #[test]
    fn synthetic_indicator_gives_full_depth_two_tree() {
        for q in 1..=3 {
            let d = ParameterDomain::new(vec![0.0; q], vec![2.0; q]).unwrap();
            let p = partition_with(&d, 0.5, 5, |b| {
                let width = b.upper[0] - b.lower[0];
                Ok(BoxBasis {
                    basis: ReducedBasis::empty(1),
                    max_indicator: if width <= 2.0 / 4.0 { 0.0 } else { 1.0 },
                })
            })
            .unwrap();
            assert_eq!(p.len(), 4usize.pow(q as u32));
            assert!(p.boxes.iter().all(|b| b.depth == 2));
        }
    }

    #[test]
    fn max_refine_caps_depth() {
        let d = ParameterDomain::new(vec![0.0], vec![1.0]).unwrap();
        let p = partition_with(&d, 0.5, 2, |_| {
            Ok(BoxBasis {
                basis: ReducedBasis::empty(1),
                max_indicator: f64::INFINITY,
            })
        })
        .unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.max_depth(), 2);
    }

    #[test]
    fn locate_ties_prefer_smaller_index() {
        let d = ParameterDomain::new(vec![0.0], vec![1.0]).unwrap();
        let p = partition_with(&d, 0.5, 1, |_| {
            Ok(BoxBasis {
                basis: ReducedBasis::empty(1),
                max_indicator: 1.0,
            })
        })
        .unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.locate(&[0.25]).unwrap(), 0);
        assert_eq!(p.locate(&[0.75]).unwrap(), 1);
        for _ in 0..3 {
            assert_eq!(p.locate(&[0.5]).unwrap(), 0);
        }
        assert!(p.locate(&[1.5]).is_err());
    }

    #[test]
    fn children_are_lexicographic() {
        let b = ParameterBox {
            lower: vec![0.0, 0.0],
            upper: vec![1.0, 1.0],
            depth: 0,
        };
        let c = b.bisect();
        assert_eq!(c[0].lower, vec![0.0, 0.0]);
        assert_eq!(c[1].lower, vec![0.0, 0.5]);
        assert_eq!(c[2].lower, vec![0.5, 0.0]);
        assert_eq!(c[3].lower, vec![0.5, 0.5]);
    }

    #[test]
    fn adaptive_partition_respects_size_and_depth() {
        let family = chain_family(10);
        let d = ParameterDomain::new(vec![0.1, 0.0], vec![1.0, 3.0]).unwrap();
        let cfg = GreedyConfig {
            tol: 1e-4,
            pod_tol: 0.5,
            max_size: 3,
        };
        let p = adaptive_partition(&d, &cfg, 2, 2, &family).unwrap();
        assert!(p.max_depth() <= 2);
        assert!(p.bases.iter().all(|b| b.len() <= 3 && !b.is_empty()));
        let vol: f64 = p.boxes.iter().map(|b| b.volume()).sum();
        assert!((vol - d.volume()).abs() <= 1e-12 * d.volume());
    }

    proptest! {
        #[test]
        fn random_partitions_tile_the_domain(seed in 0u64..50) {
            let d = ParameterDomain::new(vec![0.05, 2.0], vec![0.1, 4.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = partition_with(&d, 0.5, 3, |_| Ok(BoxBasis {
                basis: ReducedBasis::empty(1),
                max_indicator: rng.random_range(0.0..1.0),
            })).unwrap();
            let vol: f64 = p.boxes.iter().map(|b| b.volume()).sum();
            prop_assert!((vol - d.volume()).abs() <= 1e-12 * d.volume());
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            for _ in 0..200 {
                let mu = [rng.random_range(0.05..=0.1), rng.random_range(2.0..=4.0)];
                let i = p.locate(&mu).unwrap();
                prop_assert!(p.boxes[i].contains(&mu));
            }
        }
    }
}
