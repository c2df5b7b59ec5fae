use mobifl::analysis::{estimate_constants, ProbeSettings};
use mobifl::datasets::{synth_gaussian_classes, LabeledDataset, Shard};
use mobifl::fedcore::AggregationWeights;
use mobifl::models::{ModelSpec, QuadraticBowl};
use mobifl::rng::{stream, Purpose};

fn settings(rho: f64) -> ProbeSettings {
    ProbeSettings { batch_size: 5, batches_per_user: 3, rho }
}

#[test]
fn identical_shards_have_no_divergence() {
    let spec = ModelSpec::softmax(4, 3);
    let data = synth_gaussian_classes(30, 4, 3, 2.0, &mut stream(1, Purpose::Data)).unwrap();
    let shards: Vec<Shard> = (0..4).map(|owner| Shard { owner, indices: (0..30).collect() }).collect();
    let weights = AggregationWeights::uniform(&[0, 0, 1, 1], 2).unwrap();
    let probes = vec![vec![0.1; spec.param_count()], vec![-0.2; spec.param_count()]];
    let est =
        estimate_constants(&spec, &data, &shards, &weights, &probes, settings(0.01), &mut stream(1, Purpose::Probe))
            .unwrap();
    assert!(est.eps_c_hat < 1e-12 && est.eps_g_hat < 1e-12, "{est:?}");
    assert!(est.eps_mc_hat.unwrap() < 1e-12 && est.eps_mg_hat.unwrap() < 1e-12);
    assert!(est.sigma_hat > 0.0 && est.g_hat > 0.0);
}

#[test]
fn quadratic_recovers_unit_smoothness() {
    let obj = QuadraticBowl { dim: 3 };
    let features = vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0, 1.0, 1.0, 1.0];
    let data = LabeledDataset::new(features, 3, vec![0; 4], 1).unwrap();
    let shards = vec![Shard { owner: 0, indices: vec![0, 1] }, Shard { owner: 1, indices: vec![2, 3] }];
    let weights = AggregationWeights::uniform(&[0, 1], 2).unwrap();
    let probes = vec![vec![0.0; 3], vec![1.0, -2.0, 0.5], vec![4.0, 4.0, 4.0]];
    let est =
        estimate_constants(&obj, &data, &shards, &weights, &probes, settings(0.0), &mut stream(2, Purpose::Probe))
            .unwrap();
    assert!((est.l_hat.unwrap() - 1.0).abs() < 1e-12);
    // one user per cluster: only the cluster-to-global spread is nonzero
    assert!(est.eps_g_hat > 0.0);
    assert_eq!(est.eps_c_hat, 0.0);
    assert!(est.sigma_m_hat.is_none());
}

#[test]
fn single_probe_has_no_smoothness_estimate() {
    let obj = QuadraticBowl { dim: 2 };
    let data = LabeledDataset::new(vec![0.0, 1.0, 2.0, 3.0], 2, vec![0, 0], 1).unwrap();
    let shards = vec![Shard { owner: 0, indices: vec![0, 1] }];
    let weights = AggregationWeights::uniform(&[0], 1).unwrap();
    let est = estimate_constants(
        &obj,
        &data,
        &shards,
        &weights,
        &[vec![0.0, 0.0]],
        settings(0.0),
        &mut stream(3, Purpose::Probe),
    )
    .unwrap();
    assert!(est.l_hat.is_none());
}
