use fedmaba::allocator::{AllocatorConfig, WeightVector};
use fedmaba::data::{self, ClientTestMode, Dataset, FederatedDataset, PartitionSpec};
use fedmaba::engine::{self, AggregationStrategy, ClientUpdate, Simulation, SimulationConfig};
use fedmaba::models::ModelSpec;
use fedmaba::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_federation(n_clients: usize, partition: PartitionSpec, seed: u64) -> FederatedDataset {
    let base = data::generate_synthetic(n_clients, 4, 5, 40, 2.5, seed).unwrap();
    data::build_federated(base, n_clients, &partition, ClientTestMode::Matched, seed).unwrap()
}

fn softmax(data: &FederatedDataset) -> ModelSpec {
    ModelSpec::SoftmaxRegression {
        n_features: data.train.n_features,
        n_classes: data.train.n_classes,
    }
}

fn fedmaba(alpha: f64) -> AggregationStrategy {
    AggregationStrategy::FedMaba {
        alpha,
        allocator: AllocatorConfig::default(),
        eta_s: 1.0,
    }
}

fn config(rounds: usize, participation: f64, seed: u64) -> SimulationConfig {
    SimulationConfig {
        rounds,
        participation,
        batch_size: 10,
        eval_every: 5,
        seed,
        ..SimulationConfig::default()
    }
}

fn random_updates(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<ClientUpdate> {
    (0..n)
        .map(|i| ClientUpdate {
            client_id: i,
            delta: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            reported_loss: rng.random_range(0.1..3.0),
            sample_count: rng.random_range(1..100),
        })
        .collect()
}

#[test]
fn sampling_frequency_matches_fraction() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut hits = [0usize; 10];
    let draws = 10_000;
    for _ in 0..draws {
        let chosen = engine::sample_clients(10, 0.3, &mut rng).unwrap();
        assert_eq!(chosen.len(), 3);
        assert!(chosen.windows(2).all(|w| w[0] < w[1]));
        for c in chosen {
            hits[c] += 1;
        }
    }
    for h in hits {
        let freq = h as f64 / draws as f64;
        assert!((freq - 0.3).abs() <= 0.02, "frequency {freq}");
    }
}

#[test]
fn out_of_range_fraction_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(engine::sample_clients(10, 0.0, &mut rng), Err(Error::Config { .. })));
    assert!(matches!(engine::sample_clients(10, 1.5, &mut rng), Err(Error::Config { .. })));
}

#[test]
fn fedavg_matches_hand_rolled_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let updates = random_updates(&mut rng, 20, 7);
    let server: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let mut expected = server.clone();
    for u in &updates {
        for (e, d) in expected.iter_mut().zip(&u.delta) {
            *e += 0.7 * u.sample_count as f64 / total * d;
        }
    }
    let got = engine::aggregate_fedavg(&server, &updates, 0.7).unwrap();
    for (a, b) in got.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn aggregation_is_independent_of_update_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let updates = random_updates(&mut rng, 12, 9);
    let mut shuffled = updates.clone();
    shuffled.shuffle(&mut rng);
    let server = vec![0.25; 9];
    let p = WeightVector::normalized(&(0..12).map(|i| 1.0 + i as f64).collect::<Vec<_>>()).unwrap();
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12);

    let a = engine::aggregate_fedavg(&server, &updates, 1.0).unwrap();
    let b = engine::aggregate_fedavg(&server, &shuffled, 1.0).unwrap();
    assert!(close(&a, &b));

    let a = engine::aggregate_qffl(&server, &updates, 2.0, 1.0).unwrap();
    let b = engine::aggregate_qffl(&server, &shuffled, 2.0, 1.0).unwrap();
    assert!(close(&a, &b));

    let cfg = AllocatorConfig::default();
    let (ma, pa, _) = engine::aggregate_fedmaba(&server, &updates, &p, 0.6, &cfg, 1.0).unwrap();
    let (mb, pb, _) = engine::aggregate_fedmaba(&server, &shuffled, &p, 0.6, &cfg, 1.0).unwrap();
    assert!(close(&ma, &mb));
    assert!(close(pa.as_slice(), pb.as_slice()));
}

#[test]
fn single_client_keeps_singleton_weight() {
    let data = small_federation(1, PartitionSpec::Iid, 2);
    let spec = softmax(&data);
    let mut sim = Simulation::new(&data, spec, fedmaba(0.8), config(5, 1.0, 3)).unwrap();
    for _ in 0..5 {
        let before = sim.model().values.clone();
        let plan = sim.plan().unwrap();
        let updates = sim.train_clients(&plan, &plan.selected_clients).unwrap();
        let record = sim.run_round().unwrap();
        assert_eq!(record.weights.as_deref(), Some(&[1.0][..]));
        for ((after, b), d) in sim.model().values.iter().zip(&before).zip(&updates[0].delta) {
            assert!((after - (b + d)).abs() <= 1e-12);
        }
    }
}

#[test]
fn identical_clients_keep_uniform_weights() {
    let base = data::generate_synthetic(1, 3, 4, 30, 2.0, 6).unwrap();
    let n = base.train.len();
    let mut train: Dataset = base.train.clone();
    train.features.extend_from_slice(&base.train.features);
    train.labels.extend_from_slice(&base.train.labels);
    let data = FederatedDataset {
        client_test: vec![(0..base.test.len()).collect(); 2],
        train,
        test: base.test,
        partition: vec![(0..n).collect(), (n..2 * n).collect()],
    };
    let cfg = SimulationConfig {
        batch_size: n,
        ..config(20, 1.0, 1)
    };
    let mut sim = Simulation::new(&data, softmax(&data), fedmaba(1.0), cfg).unwrap();
    for _ in 0..20 {
        let r = sim.run_round().unwrap();
        let w = r.weights.unwrap();
        assert!((w[0] - 0.5).abs() <= 1e-12 && (w[1] - 0.5).abs() <= 1e-12, "{w:?}");
    }
}

#[test]
fn weights_stay_on_the_simplex_under_partial_participation() {
    let data = small_federation(10, PartitionSpec::Dirichlet { alpha: 0.3 }, 5);
    let mut sim = Simulation::new(&data, softmax(&data), fedmaba(0.8), config(40, 0.3, 9)).unwrap();
    for _ in 0..40 {
        let r = sim.run_round().unwrap();
        let w = r.weights.unwrap();
        assert!(w.iter().all(|&v| v >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert_eq!(r.selected.len(), 3);
    }
}

#[test]
fn alpha_zero_tracks_uniform_fedavg_with_partial_participation() {
    let data = small_federation(8, PartitionSpec::Shards { shards_per_client: 2 }, 1);
    let spec = softmax(&data);
    let cfg = config(30, 0.5, 12);
    let mut a = Simulation::new(&data, spec, fedmaba(0.0), cfg).unwrap();
    let mut b = Simulation::new(&data, spec, AggregationStrategy::FedAvg { eta_s: 1.0 }, cfg).unwrap();
    for _ in 0..30 {
        a.run_round().unwrap();
        b.run_round().unwrap();
        let dist = a
            .model()
            .values
            .iter()
            .zip(&b.model().values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist <= 1e-12, "distance {dist:e}");
    }
}

#[test]
fn fixed_seed_reproduces_the_record_stream() {
    let data = small_federation(6, PartitionSpec::Dirichlet { alpha: 0.5 }, 7);
    let run = || {
        let mut sim = Simulation::new(&data, softmax(&data), fedmaba(0.5), config(50, 0.5, 77)).unwrap();
        serde_json::to_string(&sim.run().unwrap()).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn learning_rate_decays_per_round() {
    let data = small_federation(2, PartitionSpec::Iid, 0);
    let mut sim =
        Simulation::new(&data, softmax(&data), AggregationStrategy::FedAvg { eta_s: 1.0 }, config(3, 1.0, 0)).unwrap();
    let lrs: Vec<f64> = sim.run().unwrap().iter().map(|r| r.client_lr).collect();
    assert_eq!(lrs, vec![0.1, 0.1 * 0.999, 0.1 * 0.999f64.powi(2)]);
}

#[test]
fn loss_clip_caps_reported_losses() {
    let data = small_federation(4, PartitionSpec::Iid, 3);
    let cfg = SimulationConfig {
        loss_clip: Some(0.05),
        ..config(5, 1.0, 0)
    };
    let mut sim = Simulation::new(&data, softmax(&data), fedmaba(0.5), cfg).unwrap();
    let records = sim.run().unwrap();
    assert!(records.iter().all(|r| r.mean_reported_loss <= 0.05));
    let eval = records.last().unwrap().eval.as_ref().unwrap();
    assert_eq!(eval.bound_c, 0.05);
    assert_eq!(eval.bound_c_source, "clip");
}

#[test]
fn dataset_dimension_mismatch_is_rejected() {
    let data = small_federation(2, PartitionSpec::Iid, 0);
    let spec = ModelSpec::SoftmaxRegression {
        n_features: 99,
        n_classes: 4,
    };
    let err = Simulation::new(&data, spec, fedmaba(0.5), config(1, 1.0, 0)).err().unwrap();
    assert!(matches!(err, Error::Dimension { .. }));
}
