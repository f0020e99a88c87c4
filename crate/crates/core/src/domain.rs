//! Data-driven reduced computational domains: snapshot statistics in reduced
//! coordinates turned into non-uniform tensor grids with equal probability
//! mass between neighbouring nodes.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::{ParameterPartition, ReducedBasis};
use crate::error::{check_dim, Error, Result};
use crate::model::{Controller, GaussianSampler, SeparableControlSystem, Stepper, StepperConfig};

/// Smallest admissible fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

/// Default probability mass left outside the grid on each tail.
pub const DEFAULT_COVERAGE: f64 = 0.005;

/// Zero-mean Gaussian fitted to one reduced coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComponentDistribution {
    pub std: f64,
    pub sample_count: usize,
}

/// Root-mean-square fit with the mean pinned at zero.
pub fn fit_component(samples: &[f64]) -> Result<ComponentDistribution> {
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 samples to fit a distribution, got {}",
            samples.len()
        )));
    }
    let rms = (samples.iter().map(|v| v * v).sum::<f64>() / samples.len() as f64).sqrt();
    let std = if rms < STD_FLOOR {
        log::warn!("degenerate reduced coordinate (rms {rms:e}); flooring std at {STD_FLOOR:e}");
        STD_FLOOR
    } else {
        rms
    };
    Ok(ComponentDistribution {
        std,
        sample_count: samples.len(),
    })
}

/// Strictly increasing nodes along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnivariateGrid {
    nodes: Vec<f64>,
}

impl UnivariateGrid {
    pub fn new(nodes: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InvalidInput("grid axis must have at least one node".into()));
        }
        if nodes.iter().any(|v| !v.is_finite()) || nodes.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("grid nodes must be finite and strictly increasing".into()));
        }
        Ok(Self { nodes })
    }

    /// `h` equispaced nodes on `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, h: usize) -> Result<Self> {
        if h < 2 {
            return Self::new(vec![0.5 * (lo + hi)]);
        }
        Self::new(
            (0..h)
                .map(|k| {
                    if k == h - 1 {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (h - 1) as f64
                    }
                })
                .collect(),
        )
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn lower(&self) -> f64 {
        self.nodes[0]
    }

    pub fn upper(&self) -> f64 {
        self.nodes[self.nodes.len() - 1]
    }
}

fn require_odd(h: usize) -> Result<()> {
    if h < 3 || h % 2 == 0 {
        return Err(Error::InvalidInput(format!("grid size must be odd and >= 3, got {h}")));
    }
    Ok(())
}

/// Quantile nodes at levels `α + k(1 − 2α)/(H − 1)`, `k = 0..H−1`.
///
/// The negative half is mirrored, so the grid is exactly symmetric and its
/// middle node is exactly zero.
pub fn equal_mass_grid(
    dist: &ComponentDistribution,
    h: usize,
    coverage: f64,
) -> Result<UnivariateGrid> {
    require_odd(h)?;
    if !(coverage > 0.0 && coverage < 0.5) {
        return Err(Error::InvalidInput(format!("coverage must lie in (0, 0.5), got {coverage}")));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mid = h / 2;
    let step = (1.0 - 2.0 * coverage) / (h - 1) as f64;
    let mut nodes = vec![0.0; h];
    for k in 0..mid {
        let level = coverage + k as f64 * step;
        let s = dist.std * normal.inverse_cdf(level);
        nodes[k] = s;
        nodes[h - 1 - k] = -s;
    }
    UnivariateGrid::new(nodes)
}

/// Cartesian product of axes, enumerated row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorGrid {
    axes: Vec<UnivariateGrid>,
}

impl TensorGrid {
    pub fn new(axes: Vec<UnivariateGrid>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidInput("tensor grid needs at least one axis".into()));
        }
        Ok(Self { axes })
    }

    pub fn axes(&self) -> &[UnivariateGrid] {
        &self.axes
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.axes.iter().map(UnivariateGrid::len).product()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(UnivariateGrid::len).collect()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for j in (0..self.dim().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * self.axes[j + 1].len();
        }
        strides
    }

    pub fn multi_index(&self, mut k: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for j in (0..self.dim()).rev() {
            let h = self.axes[j].len();
            idx[j] = k % h;
            k /= h;
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.axes)
            .fold(0, |acc, (&i, axis)| acc * axis.len() + i)
    }

    /// Coordinates of node `k`.
    pub fn node_into(&self, mut k: usize, out: &mut [f64]) {
        for j in (0..self.dim()).rev() {
            let h = self.axes[j].len();
            out[j] = self.axes[j].nodes[k % h];
            k /= h;
        }
    }

    pub fn node(&self, k: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.node_into(k, &mut out);
        out
    }

    /// All nodes as an `ℓ × H` matrix.
    pub fn node_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim(), self.num_nodes());
        let mut buf = vec![0.0; self.dim()];
        for k in 0..self.num_nodes() {
            self.node_into(k, &mut buf);
            m.column_mut(k).copy_from_slice(&buf);
        }
        m
    }

    /// Per-axis `(lower, upper)` of the bounding box.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.axes.iter().map(|a| (a.lower(), a.upper())).collect()
    }

    /// Equidistant grid on the same bounding box with `h` nodes per axis.
    pub fn equidistant_like(&self, h: usize) -> Result<Self> {
        Self::new(
            self.axes
                .iter()
                .map(|a| UnivariateGrid::uniform(a.lower(), a.upper(), h))
                .collect::<Result<_>>()?,
        )
    }
}

/// Tensor grid of equal-mass axes.
pub fn tensor_grid(
    dists: &[ComponentDistribution],
    sizes: &[usize],
    coverage: f64,
) -> Result<TensorGrid> {
    check_dim("grid sizes", dists.len(), sizes.len())?;
    TensorGrid::new(
        dists
            .iter()
            .zip(sizes)
            .map(|(d, &h)| equal_mass_grid(d, h, coverage))
            .collect::<Result<_>>()?,
    )
}

/// Full-order states collected from an ensemble of trajectories.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    /// `n × (runs · |T|)`, grouped by run.
    pub matrix: DMatrix<f64>,
    /// Runs dropped because they diverged.
    pub skipped: usize,
}

/// Simulates `n_train` ensemble draws at `mu` and records the states at `times`.
#[allow(clippy::too_many_arguments)]
pub fn collect_snapshots(
    sys: &SeparableControlSystem,
    sampler: &GaussianSampler,
    mu: &[f64],
    controller: &mut dyn Controller,
    cfg: StepperConfig,
    times: &[f64],
    n_train: usize,
    seed: u64,
) -> Result<SnapshotSet> {
    if n_train < 2 {
        return Err(Error::InvalidInput(format!("need at least 2 training runs, got {n_train}")));
    }
    if times.is_empty() {
        return Err(Error::InvalidInput("snapshot times must be non-empty".into()));
    }
    let steps: Vec<usize> = times
        .iter()
        .map(|&t| {
            let k = (t / cfg.dt).round();
            if k < 0.0 || (k * cfg.dt - t).abs() > 1e-9 * t.abs().max(1.0) {
                Err(Error::InvalidInput(format!(
                    "snapshot time {t} is not a non-negative multiple of {}",
                    cfg.dt
                )))
            } else {
                Ok(k as usize)
            }
        })
        .collect::<Result<_>>()?;
    if steps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput("snapshot times must be sorted".into()));
    }
    let n = sys.state_dim();
    let last = *steps.last().expect("non-empty");
    let mut stepper = Stepper::new(sys, mu, cfg)?;
    let initial = sampler.sample(n_train, seed);
    let mut columns: Vec<f64> = Vec::with_capacity(n * n_train * steps.len());
    let mut skipped = 0;
    let mut u = vec![0.0; sys.control_dim()];
    let mut next = vec![0.0; n];
    'runs: for x in &initial {
        let mut y = x.as_slice().to_vec();
        let mut run = Vec::with_capacity(n * steps.len());
        let mut wanted = steps.iter().peekable();
        for k in 0..=last {
            while wanted.peek().is_some_and(|&&s| s == k) {
                run.extend_from_slice(&y);
                wanted.next();
            }
            if k == last {
                break;
            }
            let t = k as f64 * cfg.dt;
            controller.control(t, &y, &mut u)?;
            if let Err(e) = stepper.step_into(&y, &u, &mut next) {
                log::warn!("snapshot run skipped: {e}");
                skipped += 1;
                continue 'runs;
            }
            std::mem::swap(&mut y, &mut next);
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm <= crate::model::DIVERGENCE_GUARD) {
                log::warn!("snapshot run skipped: diverged at t = {t}");
                skipped += 1;
                continue 'runs;
            }
        }
        columns.extend_from_slice(&run);
    }
    let cols = columns.len() / n;
    Ok(SnapshotSet {
        matrix: DMatrix::from_vec(n, cols, columns),
        skipped,
    })
}

/// Fits one distribution per reduced coordinate of `Ψᵀ Y`.
pub fn fit_reduced(snapshots: &DMatrix<f64>, basis: &ReducedBasis) -> Result<Vec<ComponentDistribution>> {
    check_dim("snapshot rows", basis.state_dim(), snapshots.nrows())?;
    let reduced = basis.matrix().tr_mul(snapshots);
    reduced
        .row_iter()
        .map(|row| fit_component(&row.iter().copied().collect::<Vec<_>>()))
        .collect()
}

/// Settings of the data-driven grid construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Nodes per axis, one entry per requested grid level (e.g. coarse then fine).
    pub sizes: Vec<usize>,
    pub coverage: f64,
    pub n_train: usize,
    /// Snapshot times, multiples of the simulation step.
    pub times: Vec<f64>,
}

/// Grids of one parameter box.
#[derive(Debug, Clone)]
pub struct BoxGrids {
    pub distributions: Vec<ComponentDistribution>,
    /// One grid per entry of `GridConfig::sizes`.
    pub grids: Vec<TensorGrid>,
    pub skipped: usize,
}

/// Builds the grids of every box from uncontrolled runs at its barycenter.
pub fn build_grids(
    partition: &ParameterPartition,
    sys: &SeparableControlSystem,
    sampler: &GaussianSampler,
    stepper: StepperConfig,
    cfg: &GridConfig,
    seed: u64,
) -> Result<Vec<BoxGrids>> {
    for &h in &cfg.sizes {
        require_odd(h)?;
    }
    partition
        .boxes
        .iter()
        .zip(&partition.bases)
        .map(|(b, basis)| {
            let snaps = collect_snapshots(
                sys,
                sampler,
                &b.barycenter(),
                &mut crate::model::ZeroControl,
                stepper,
                &cfg.times,
                cfg.n_train,
                seed,
            )?;
            if snaps.matrix.ncols() < 2 {
                return Err(Error::InvalidInput("every snapshot run diverged".into()));
            }
            let distributions = fit_reduced(&snaps.matrix, basis)?;
            let grids = cfg
                .sizes
                .iter()
                .map(|&h| tensor_grid(&distributions, &vec![h; distributions.len()], cfg.coverage))
                .collect::<Result<_>>()?;
            Ok(BoxGrids {
                distributions,
                grids,
                skipped: snaps.skipped,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        constant, BoundaryWeight, DriftTerm, GaussianEnsemble, Operator, Scheme, StateField,
        ZeroControl,
    };
    use nalgebra::DVector;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal as Gauss};

    fn unit(std: f64) -> ComponentDistribution {
        ComponentDistribution {
            std,
            sample_count: 2,
        }
    }

    #[test]
    fn rms_fit() {
        assert_eq!(fit_component(&[-1.0, 1.0]).unwrap().std, 1.0);
        assert_eq!(fit_component(&[0.0; 5]).unwrap().std, STD_FLOOR);
        assert!(fit_component(&[1.0]).is_err());
    }

    #[test]
    fn monte_carlo_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = Gauss::new(0.0, 2.0).unwrap();
        let s: Vec<f64> = (0..100_000).map(|_| g.sample(&mut rng)).collect();
        let std = fit_component(&s).unwrap().std;
        assert!((1.98..=2.02).contains(&std), "{std}");
    }

    #[test]
    fn three_point_quantiles() {
        // Φ⁻¹(0.75) from an independent high-precision evaluation.
        let q75 = 0.6744897501960817;
        let g = equal_mass_grid(&unit(1.0), 3, 0.25).unwrap();
        assert!((g.nodes()[0] + q75).abs() < 1e-12);
        assert_eq!(g.nodes()[1], 0.0);
        assert!((g.nodes()[2] - q75).abs() < 1e-12);
    }

    #[test]
    fn scaling_and_even_rejection() {
        let a = equal_mass_grid(&unit(1.0), 9, 0.01).unwrap();
        let b = equal_mass_grid(&unit(2.0), 9, 0.01).unwrap();
        for (x, y) in a.nodes().iter().zip(b.nodes()) {
            assert_eq!(2.0 * x, *y);
        }
        assert!(equal_mass_grid(&unit(1.0), 4, 0.01).is_err());
        assert!(equal_mass_grid(&unit(1.0), 1, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn equal_mass_properties(std in 1e-3f64..10.0, half in 1usize..15, coverage in 1e-3f64..0.2) {
            let h = 2 * half + 1;
            let g = equal_mass_grid(&unit(std), h, coverage).unwrap();
            let s = g.nodes();
            prop_assert_eq!(s[half], 0.0);
            for k in 0..h {
                prop_assert_eq!(s[k], -s[h - 1 - k]);
            }
            let normal = Normal::new(0.0, std).unwrap();
            let masses: Vec<f64> = s.windows(2).map(|w| normal.cdf(w[1]) - normal.cdf(w[0])).collect();
            let mean = masses.iter().sum::<f64>() / masses.len() as f64;
            for m in &masses {
                prop_assert!((m - mean).abs() <= 1e-10);
            }
            prop_assert!((mean - (1.0 - 2.0 * coverage) / (h - 1) as f64).abs() <= 1e-10);
            // Spacing grows away from zero.
            for k in half..h - 2 {
                prop_assert!(s[k + 2] - s[k + 1] > s[k + 1] - s[k]);
            }
        }

        #[test]
        fn sign_flip_invariance(samples in proptest::collection::vec(-5.0f64..5.0, 2..50)) {
            let flipped: Vec<f64> = samples.iter().map(|v| -v).collect();
            let a = fit_component(&samples).unwrap();
            let b = fit_component(&flipped).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn enumeration_round_trip() {
        let g = tensor_grid(&[unit(1.0), unit(2.0), unit(0.5)], &[3, 5, 7], 0.01).unwrap();
        assert_eq!(g.num_nodes(), 105);
        for k in 0..g.num_nodes() {
            let idx = g.multi_index(k);
            assert_eq!(g.linear_index(&idx), k);
            let node = g.node(k);
            for j in 0..3 {
                assert_eq!(node[j], g.axes()[j].nodes()[idx[j]]);
            }
        }
        // Row-major: last axis fastest.
        assert_eq!(g.multi_index(1), vec![0, 0, 1]);
        assert_eq!(g.strides(), vec![35, 7, 1]);
    }

    #[test]
    fn fifteen_point_axes_give_225_nodes() {
        let g = tensor_grid(&[unit(1.0), unit(0.3)], &[15, 15], DEFAULT_COVERAGE).unwrap();
        assert_eq!(g.num_nodes(), 225);
    }

    fn zero_system(n: usize) -> SeparableControlSystem {
        SeparableControlSystem::new(
            n,
            1,
            vec![DriftTerm {
                coefficient: constant(0.0),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(n, n))),
            }],
            vec![],
        )
        .unwrap()
    }

    fn ensemble(n: usize) -> GaussianEnsemble {
        GaussianEnsemble::new(
            (0..n).map(|i| vec![i as f64 / n as f64]).collect(),
            DVector::zeros(n),
            1.0,
            1.0,
            BoundaryWeight::One,
        )
        .unwrap()
    }

    #[test]
    fn snapshots_of_zero_field_are_initial_states() {
        let sys = zero_system(3);
        let ens = ensemble(3);
        let sampler = ens.sampler().unwrap();
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        let snaps =
            collect_snapshots(&sys, &sampler, &[], &mut ZeroControl, cfg, &[0.0], 4, 7).unwrap();
        let expect = sampler.sample(4, 7);
        assert_eq!(snaps.matrix.ncols(), 4);
        for (k, x) in expect.iter().enumerate() {
            assert_eq!(snaps.matrix.column(k).into_owned(), *x);
        }
    }

    #[test]
    fn snapshot_count_excludes_diverged_runs() {
        // ẏ = 1e3 y blows up; ẏ = 0 does not.
        let unstable = SeparableControlSystem::new(
            2,
            1,
            vec![DriftTerm {
                coefficient: constant(1e3),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(2, 2))),
            }],
            vec![],
        )
        .unwrap();
        let sampler = ensemble(2).sampler().unwrap();
        let cfg = StepperConfig::new(Scheme::ExplicitEuler, 0.1).unwrap();
        let times = [0.0, 0.5, 1.0];
        let snaps =
            collect_snapshots(&unstable, &sampler, &[], &mut ZeroControl, cfg, &times, 5, 1)
                .unwrap();
        assert_eq!(snaps.skipped, 5);
        assert_eq!(snaps.matrix.ncols(), 0);
        let stable = zero_system(2);
        let snaps =
            collect_snapshots(&stable, &sampler, &[], &mut ZeroControl, cfg, &times, 5, 1).unwrap();
        assert_eq!(snaps.matrix.ncols(), 5 * 3 - 3 * snaps.skipped);
    }

    #[test]
    fn one_dimensional_grid_contains_zero() {
        let snaps = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 0.5, 3.0, 0.0, 0.0, 0.0, 0.0]);
        let basis = ReducedBasis::from_orthonormal(DMatrix::from_column_slice(2, 1, &[1.0, 0.0]))
            .unwrap();
        let d = fit_reduced(&snaps, &basis).unwrap();
        let g = tensor_grid(&d, &[3], DEFAULT_COVERAGE).unwrap();
        let nodes = g.axes()[0].nodes();
        assert_eq!(nodes.len(), 3);
        assert!(nodes[0] < nodes[1] && nodes[1] < nodes[2]);
        assert_eq!(nodes[1], 0.0);
    }
}
