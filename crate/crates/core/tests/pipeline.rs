use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use parahjb::basis::GreedyConfig;
use parahjb::domain::{GridConfig, DEFAULT_COVERAGE};
use parahjb::hjb::SlConfig;
use parahjb::model::{
    component, constant, BoundaryWeight, ControlGrid, ControlTerm, DriftTerm, GaussianEnsemble,
    Horizon, InputField, Operator, ParameterDomain, QuadraticCost, Scheme, SeparableControlSystem,
    StateField, StateWeight, StepperConfig,
};
use parahjb::pipeline::{offline_build, online_query, OfflineBundle, OfflineConfig, OnlineConfig, Problem};
use parahjb::Error;

/// Diffusion on a chain of `n` nodes with a diffusivity in `[0.5, 1.5]` and
/// a weak destabilizing reaction.
fn chain(n: usize) -> Problem {
    let h2 = ((n + 1) as f64).powi(2);
    let lap = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            -2.0 * h2
        } else if i.abs_diff(j) == 1 {
            h2
        } else {
            0.0
        }
    }) * 0.01;
    let system = SeparableControlSystem::new(
        n,
        1,
        vec![
            DriftTerm {
                coefficient: component(0),
                field: StateField::Linear(Operator::Dense(lap)),
            },
            DriftTerm {
                coefficient: constant(0.2),
                field: StateField::Linear(Operator::Dense(DMatrix::identity(n, n))),
            },
        ],
        vec![ControlTerm {
            coefficient: constant(1.0),
            field: InputField::Constant(DMatrix::from_element(n, 1, 1.0 / (n as f64).sqrt())),
        }],
    )
    .unwrap();
    let cost = QuadraticCost::new(
        StateWeight::Terms(vec![(constant(1.0), Operator::Dense(DMatrix::identity(n, n)))]),
        Arc::new(|_mu: &[f64]| DMatrix::from_element(1, 1, 0.1)),
        0.1,
    )
    .unwrap();
    let nodes: Vec<Vec<f64>> = (1..=n).map(|i| vec![i as f64 / (n + 1) as f64]).collect();
    Problem {
        name: "chain".into(),
        system,
        cost,
        domain: ParameterDomain::new(vec![0.5], vec![1.5]).unwrap(),
        controls: ControlGrid::scalar(&(0..=10).map(|i| -1.0 + 0.2 * i as f64).collect::<Vec<_>>())
            .unwrap(),
        ensemble: GaussianEnsemble::new(nodes, DVector::zeros(n), 0.5, 2.0, BoundaryWeight::Tent)
            .unwrap(),
        stepper: StepperConfig::new(Scheme::ImplicitEuler, 0.01).unwrap(),
    }
}

fn config(coarse: usize, fine: usize) -> OfflineConfig {
    OfflineConfig {
        greedy: GreedyConfig {
            tol: 1e-2,
            pod_tol: 1e-6,
            max_size: 2,
        },
        train_per_axis: 3,
        max_refine: 0,
        grid: GridConfig {
            sizes: vec![coarse, fine],
            coverage: DEFAULT_COVERAGE,
            n_train: 20,
            times: vec![0.0, 0.1, 0.5],
        },
        sl: SlConfig {
            vi_tol: 1e-9,
            ..SlConfig::new(0.05, 0.1).unwrap()
        },
    }
}

fn spec() -> serde_json::Value {
    serde_json::json!({ "n": 6 })
}

#[test]
fn single_box_bundle() {
    let p = chain(6);
    let b = offline_build(&p, &config(5, 9), 3, spec()).unwrap();
    assert_eq!(b.partition.len(), 1);
    assert_eq!(b.boxes.len(), 1);
    let data = &b.boxes[0];
    assert_eq!(data.table.num_nodes(), data.fine.num_nodes());
    assert_eq!(data.field.values().len(), data.coarse.num_nodes());
    assert!(data.vi_converged);
    assert!(b.meta.timings.total() >= 0.0);
}

#[test]
fn serialization_round_trip_is_byte_identical() {
    let p = chain(6);
    let b = offline_build(&p, &config(5, 9), 3, spec()).unwrap();
    let first = b.to_files().unwrap();
    let back = OfflineBundle::from_files(&first).unwrap();
    assert_eq!(back.to_files().unwrap(), first);

    let dir = tempfile::tempdir().unwrap();
    b.save(dir.path()).unwrap();
    let loaded = OfflineBundle::load(dir.path()).unwrap();
    assert_eq!(loaded.to_files().unwrap(), first);

    let victim = dir.path().join("box0_values.bin");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    assert!(matches!(OfflineBundle::load(dir.path()), Err(Error::Checksum { .. })));
}

#[test]
fn failing_phase_is_named() {
    let p = chain(6);
    let err = offline_build(&p, &config(4, 9), 3, spec()).unwrap_err();
    match err {
        Error::Phase { phase, .. } => assert_eq!(phase, "grids"),
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn online_query_at_barycenter_is_self_consistent() {
    let p = chain(6);
    let b = offline_build(&p, &config(9, 9), 5, spec()).unwrap();
    let mu = b.partition.boxes[0].barycenter();
    let x0 = p.ensemble.sample_initial(2, 11).unwrap();
    let cfg = OnlineConfig {
        horizon: Horizon::fixed(5.0),
        references: true,
    };
    let r = online_query(&b, &p, &mu, &x0, &cfg).unwrap();
    assert!(r.pi_converged);
    assert!(r.pi_iterations <= 2, "{}", r.pi_iterations);
    assert_eq!(r.pi_full_evaluations, 0);
    for run in &r.runs {
        assert!(run.hjb.cost.is_finite());
        assert!(run.hjb.cost <= run.uncontrolled.unwrap().cost);
    }
}

#[test]
fn online_query_is_deterministic() {
    let p = chain(6);
    let b = offline_build(&p, &config(5, 9), 5, spec()).unwrap();
    let x0 = p.ensemble.sample_initial(2, 1).unwrap();
    let cfg = OnlineConfig {
        horizon: Horizon::fixed(2.0),
        references: false,
    };
    let a = online_query(&b, &p, &[0.8], &x0, &cfg).unwrap();
    let c = online_query(&b, &p, &[0.8], &x0, &cfg).unwrap();
    assert_eq!(a.box_index, c.box_index);
    assert_eq!(a.field, c.field);
    assert_eq!(a.pi_iterations, c.pi_iterations);
    assert_eq!(a.runs, c.runs);
    assert_eq!(a.pi_full_evaluations, 0);
}
