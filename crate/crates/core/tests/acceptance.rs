//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fedmaba::allocator::{self, AllocatorConfig, WeightVector};
use fedmaba::data::{self, Dataset, FederatedDataset};
use fedmaba::engine::{AggregationStrategy, Simulation, SimulationConfig};
use fedmaba::models::{self, Batch, ModelSpec};
use fedmaba::rng::SimRng;
use fedmaba::runner::{self, ExperimentConfig, ExperimentSummary, StrategyKind};
use fedmaba::theory;
use fedmaba::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<Outcome, String>) -> Outcome {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(Ok(o)) => o,
        Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
        Err(_) => Outcome::new(false, "panicked"),
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn criterion_1() -> Result<Outcome, String> {
    let seed = 2024;
    let started = Instant::now();
    let gaps = theory::oracle_gaps(200, seed, 100).map_err(err)?;
    let elapsed = started.elapsed().as_secs_f64();

    // replay the same instances to count how many hit the boundary
    let mut rng = SimRng::seed_from_u64(seed);
    let mut active = 0;
    for k in 0..200 {
        let (p, losses, eta_b, rho) = theory::random_instance(&mut rng, 2 + k % 3);
        let config = AllocatorConfig {
            eta_b,
            rho,
            ..AllocatorConfig::default()
        };
        if allocator::update_weights(&p, &losses, &config).map_err(err)?.1 > 0.0 {
            active += 1;
        }
    }
    let max = gaps.iter().copied().fold(0.0, f64::max);
    let median = theory::median(&gaps);
    Ok(Outcome::new(
        max <= 1e-3 && median <= 1e-5 && elapsed <= 30.0,
        format!("max gap {max:.2e}, median {median:.2e}, {active}/200 active, {elapsed:.1}s"),
    ))
}

fn criterion_2() -> Result<Outcome, String> {
    let mut rng = SimRng::seed_from_u64(77);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_slack = f64::INFINITY;
    let mut active = 0;
    let mut violations = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let (p, losses, eta_b, rho) = theory::random_instance(&mut rng, n);
        let config = AllocatorConfig {
            eta_b,
            rho,
            ..AllocatorConfig::default()
        };
        let (out, lambda) = allocator::update_weights(&p, &losses, &config).map_err(err)?;
        let residual = allocator::kl_from_uniform(out.as_slice()) - rho;
        worst_excess = worst_excess.max(residual);
        if residual > 1e-6 {
            violations += 1;
        }
        if lambda > 1e-6 {
            active += 1;
            worst_slack = worst_slack.min(residual);
            if residual < -1e-4 {
                violations += 1;
            }
        }
    }
    Ok(Outcome::new(
        violations == 0 && active > 0,
        format!("max residual {worst_excess:.2e}, min active residual {worst_slack:.2e}, {active}/1000 active"),
    ))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_3() -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let mut ok = true;

    // equal losses from uniform weights
    let mut eq_gap: f64 = 0.0;
    for eta_b in [0.1, 0.5, 1.0] {
        let p = WeightVector::uniform(7);
        let config = AllocatorConfig {
            eta_b,
            rho: 1.0,
            ..AllocatorConfig::default()
        };
        let (out, lambda) = allocator::update_weights(&p, &[0.8; 7], &config).map_err(err)?;
        eq_gap = eq_gap.max(max_abs_diff(out.as_slice(), p.as_slice()));
        ok &= lambda == 0.0;
    }
    ok &= eq_gap <= 1e-15;
    notes.push(format!("equal-loss gap {eq_gap:.1e}"));

    // loss shift
    let mut rng = SimRng::seed_from_u64(5);
    let mut shift_gap: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=10);
        let (p, losses, eta_b, rho) = theory::random_instance(&mut rng, n);
        let c = rng.random_range(-5.0..5.0);
        let shifted: Vec<f64> = losses.iter().map(|l| l + c).collect();
        let config = AllocatorConfig {
            eta_b,
            rho,
            ..AllocatorConfig::default()
        };
        let (a, la) = allocator::update_weights(&p, &losses, &config).map_err(err)?;
        let (b, lb) = allocator::update_weights(&p, &shifted, &config).map_err(err)?;
        shift_gap = shift_gap.max(max_abs_diff(a.as_slice(), b.as_slice()));
        ok &= (la - lb).abs() <= config.lambda_tolerance;
    }
    ok &= shift_gap <= 1e-12;
    notes.push(format!("shift gap {shift_gap:.1e}"));

    // unbounded multiplier
    let p = WeightVector::normalized(&[0.1, 0.2, 0.7]).map_err(err)?;
    let log_q = allocator::dual_step(&p, &[3.0, 0.0, 1.0], 1.0).map_err(err)?;
    let far = allocator::project(&log_q, 1e12).map_err(err)?;
    let far_gap = max_abs_diff(far.as_slice(), WeightVector::uniform(3).as_slice());
    let zero_rho = AllocatorConfig {
        eta_b: 1.0,
        rho: 0.0,
        ..AllocatorConfig::default()
    };
    let (flat, lambda) = allocator::update_weights(&p, &[3.0, 0.0, 1.0], &zero_rho).map_err(err)?;
    let flat_gap = max_abs_diff(flat.as_slice(), WeightVector::uniform(3).as_slice());
    ok &= far_gap <= 1e-9 && flat_gap <= 1e-15 && lambda.is_infinite();
    notes.push(format!("large-lambda gap {far_gap:.1e}, rho=0 gap {flat_gap:.1e}"));

    // alpha = 0 against FedAvg on the benchmark data
    let mut config = benchmark_config()?;
    config.federation.rounds = 50;
    let dataset = runner::build_dataset(&config, 0).map_err(err)?;
    let spec = config.model_spec(dataset.train.n_features, dataset.train.n_classes);
    let sim_config = config.simulation(0, 0.0);
    let maba = AggregationStrategy::FedMaba {
        alpha: 0.0,
        allocator: config.strategy.allocator(),
        eta_s: 1.0,
    };
    let mut a = Simulation::new(&dataset, spec, maba, sim_config).map_err(err)?;
    let mut b = Simulation::new(&dataset, spec, AggregationStrategy::FedAvg { eta_s: 1.0 }, sim_config).map_err(err)?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        a.run_round().map_err(err)?;
        b.run_round().map_err(err)?;
        let d = a
            .model()
            .values
            .iter()
            .zip(&b.model().values)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(d);
    }
    ok &= worst <= 1e-12;
    notes.push(format!("alpha=0 max model distance {worst:.1e}"));

    Ok(Outcome::new(ok, notes.join(", ")))
}

fn fd_relative_error(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Result<f64, String> {
    let mut params = models::init_params(spec, rng);
    for v in params.values.iter_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let n = 6;
    let x: Vec<f64> = (0..n * spec.n_features()).map(|_| rng.random_range(-2.0..2.0)).collect();
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.n_classes())).collect();
    let batch = Batch::new(&x, &y, spec.n_features());
    let (_, analytic) = models::loss_and_gradient(&params, spec, &batch).map_err(err)?;
    let h = 1e-5;
    let mut numeric = vec![0.0; params.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let v = params.values[i];
        params.values[i] = v + h;
        let up = models::loss_and_gradient(&params, spec, &batch).map_err(err)?.0;
        params.values[i] = v - h;
        let down = models::loss_and_gradient(&params, spec, &batch).map_err(err)?.0;
        params.values[i] = v;
        *slot = (up - down) / (2.0 * h);
    }
    let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(diff / (norm + 1e-12))
}

fn criterion_4() -> Result<Outcome, String> {
    let started = Instant::now();
    let specs = [
        ModelSpec::SoftmaxRegression {
            n_features: 8,
            n_classes: 5,
        },
        ModelSpec::Mlp2 {
            n_features: 6,
            hidden_width: 8,
            n_classes: 4,
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for spec in &specs {
        for _ in 0..25 {
            worst = worst.max(fd_relative_error(spec, &mut rng)?);
            count += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst <= 1e-4 && elapsed <= 10.0,
        format!("{count} instances, max relative error {worst:.2e}, {elapsed:.2}s"),
    ))
}

fn benchmark_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/benchmark.toml")
}

fn benchmark_config() -> Result<ExperimentConfig, String> {
    ExperimentConfig::load(&benchmark_path(), &[]).map_err(err)
}

fn run_benchmark(dir: &Path) -> Result<(ExperimentSummary, f64), String> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| e.to_string())?;
    }
    let overrides = vec![format!("--run.output_dir={}", dir.display())];
    let config = ExperimentConfig::load(&benchmark_path(), &overrides).map_err(err)?;
    let started = Instant::now();
    let summary = runner::run_experiment(&config).map_err(err)?;
    Ok((summary, started.elapsed().as_secs_f64()))
}

fn criterion_5(summary: &ExperimentSummary, elapsed: f64) -> Result<Outcome, String> {
    if !summary.all_ok() {
        return Ok(Outcome::new(false, "a benchmark cell failed"));
    }
    let mean = |kind: StrategyKind, f: fn(&fedmaba::engine::EvalRecord) -> f64| -> f64 {
        let cells: Vec<_> = summary.cells.iter().filter(|c| c.strategy == kind).collect();
        cells
            .iter()
            .map(|c| f(c.last_eval().and_then(|r| r.eval.as_ref()).expect("evaluated")))
            .sum::<f64>()
            / cells.len() as f64
    };
    let var_maba = mean(StrategyKind::Fedmaba, |e| e.fairness_variance);
    let var_avg = mean(StrategyKind::Fedavg, |e| e.fairness_variance);
    let acc_maba = mean(StrategyKind::Fedmaba, |e| e.global_accuracy);
    let acc_avg = mean(StrategyKind::Fedavg, |e| e.global_accuracy);
    let reduction = 1.0 - var_maba / var_avg;
    let acc_gap_pp = 100.0 * (acc_maba - acc_avg).abs();
    Ok(Outcome::new(
        reduction >= 0.15 && acc_gap_pp <= 1.5 && elapsed <= 300.0,
        format!(
            "variance {var_maba:.2} vs {var_avg:.2} ({:.1}% lower), accuracy {:.2}% vs {:.2}% ({acc_gap_pp:.2} pp), {elapsed:.1}s",
            100.0 * reduction,
            100.0 * acc_maba,
            100.0 * acc_avg
        ),
    ))
}

/// Client A holds noise labels, client B a well separated two-class problem.
fn asymmetric_pair(seed: u64) -> Result<FederatedDataset, String> {
    let base = data::generate_synthetic(2, 2, 2, 100, 8.0, seed).map_err(err)?;
    let mut train: Dataset = base.train;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11CE);
    let n = train.len();
    for label in train.labels.iter_mut().take(n / 2) {
        *label = rng.random_range(0..2);
    }
    let test_len = base.test.len();
    Ok(FederatedDataset {
        train,
        test: base.test,
        partition: vec![(0..n / 2).collect(), (n / 2..n).collect()],
        client_test: vec![(0..test_len).collect(); 2],
    })
}

fn criterion_6() -> Result<Outcome, String> {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut largest_drop: f64 = 0.0;
    for rho in [1.0, 0.05] {
        let mut checked_total = 0;
        let mut bound_rounds = Vec::new();
        for seed in 0..3u64 {
            let dataset = asymmetric_pair(seed)?;
            let spec = ModelSpec::SoftmaxRegression {
                n_features: 2,
                n_classes: 2,
            };
            let strategy = AggregationStrategy::FedMaba {
                alpha: 0.8,
                allocator: AllocatorConfig {
                    eta_b: 0.5,
                    rho,
                    ..AllocatorConfig::default()
                },
                eta_s: 1.0,
            };
            let config = SimulationConfig {
                rounds: 100,
                eval_every: 100,
                seed,
                ..SimulationConfig::default()
            };
            let mut sim = Simulation::new(&dataset, spec, strategy, config).map_err(err)?;
            let mut previous = 0.5;
            let mut bound_at = None;
            for t in 0..100 {
                let plan = sim.plan().map_err(err)?;
                let updates = sim.train_clients(&plan, &plan.selected_clients).map_err(err)?;
                if updates[0].reported_loss <= updates[1].reported_loss {
                    return Ok(Outcome::new(false, format!("seed {seed} round {t}: client A not the higher-loss client")));
                }
                let record = sim.run_round().map_err(err)?;
                if record.lambda_star.unwrap_or(0.0) > 0.0 {
                    bound_at = Some(t);
                    break;
                }
                let p_a = record.weights.as_ref().expect("weights")[0];
                // once p_B reaches the weight floor, p_A only moves by roundoff
                largest_drop = largest_drop.max(previous - p_a);
                if p_a < previous - allocator::WEIGHT_FLOOR {
                    ok = false;
                    notes.push(format!("rho {rho} seed {seed}: p_A fell at round {t}"));
                }
                previous = p_a;
                checked_total += 1;
            }
            bound_rounds.push(bound_at.map_or("never".to_string(), |t| t.to_string()));
        }
        notes.push(format!(
            "rho {rho}: {checked_total} rounds checked, binds at [{}]",
            bound_rounds.join(", ")
        ));
    }
    notes.push(format!("largest drop {largest_drop:.1e}"));
    Ok(Outcome::new(ok, notes.join("; ")))
}

fn criterion_7(summary: &ExperimentSummary) -> Result<Outcome, String> {
    let mut checked = 0;
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for cell in &summary.cells {
        for r in &cell.records {
            let Some(e) = &r.eval else { continue };
            checked += 1;
            if e.generalization_gap > e.bound_rhs {
                violations += 1;
            }
            tightest = tightest.min(e.bound_rhs - e.generalization_gap);
        }
    }
    Ok(Outcome::new(
        violations == 0 && checked > 0,
        format!("{checked} evaluation rounds, {violations} violations, smallest slack {tightest:.3}"),
    ))
}

fn criterion_8() -> Result<Outcome, String> {
    let table = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]];
    let exact = theory::rademacher_exact(&table).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mc = theory::rademacher_monte_carlo(&table, 100_000, &mut rng).map_err(err)?;
    let z = (mc.value - exact).abs() / mc.std_error;
    Ok(Outcome::new(
        z <= 3.0,
        format!("exact {exact:.6}, sampled {:.6} +/- {:.6} ({z:.2} SE)", mc.value, mc.std_error),
    ))
}

fn criterion_9(first: &ExperimentSummary, second_dir: &Path) -> Result<Outcome, String> {
    let (second, _) = run_benchmark(second_dir)?;
    let mut compared = 0;
    for (a, b) in first.cells.iter().zip(&second.cells) {
        let x = fs::read(a.dir.join("records.csv")).map_err(|e| e.to_string())?;
        let y = fs::read(b.dir.join("records.csv")).map_err(|e| e.to_string())?;
        if x != y || x.is_empty() {
            return Ok(Outcome::new(false, format!("{} differs", a.dir.display())));
        }
        compared += 1;
    }
    Ok(Outcome::new(compared == 6, format!("{compared} records.csv files byte-identical")))
}

fn criterion_10(dir: &Path) -> Result<Outcome, String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let pixels = [0u8, 255, 128, 64, 1, 2, 3, 254];
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    fs::write(&images, data::encode_idx_images(2, 2, &pixels)).map_err(|e| e.to_string())?;
    fs::write(&labels, data::encode_idx_labels(&[5, 9])).map_err(|e| e.to_string())?;
    let ds = data::load_idx(&images, &labels).map_err(err)?;
    let exact = ds.labels == [5, 9]
        && ds.n_features == 4
        && ds
            .features
            .iter()
            .zip(pixels)
            .all(|(v, b)| v.to_bits() == (b as f64 / 255.0).to_bits());

    let mut corrupt = data::encode_idx_images(2, 2, &pixels);
    corrupt[2] = 0x09;
    let bad = dir.join("corrupt.idx");
    fs::write(&bad, corrupt).map_err(|e| e.to_string())?;
    let rejected = matches!(data::load_idx(&bad, &labels), Err(Error::Ingestion { offset: 0, .. }));
    Ok(Outcome::new(
        exact && rejected,
        format!("fixture bit-exact: {exact}, corrupted magic rejected: {rejected}"),
    ))
}

fn main() -> ExitCode {
    let scratch = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut lines: Vec<(usize, &str, Outcome)> = vec![
        (1, "allocator matches oracle", guard(criterion_1)),
        (2, "constraint feasibility and activation", guard(criterion_2)),
        (3, "trivial-case suite", guard(criterion_3)),
        (4, "gradient correctness", guard(criterion_4)),
    ];

    let benchmark = run_benchmark(&scratch.join("benchmark-a"));
    lines.push((
        5,
        "fairness effect on the synthetic benchmark",
        guard(|| {
            let (summary, elapsed) = benchmark.as_ref().map_err(Clone::clone)?;
            criterion_5(summary, *elapsed)
        }),
    ));
    lines.push((6, "monotone attention", guard(criterion_6)));
    lines.push((
        7,
        "generalization bound holds",
        guard(|| criterion_7(&benchmark.as_ref().map_err(Clone::clone)?.0)),
    ));
    lines.push((8, "rademacher estimator", guard(criterion_8)));
    lines.push((
        9,
        "determinism",
        guard(|| criterion_9(&benchmark.as_ref().map_err(Clone::clone)?.0, &scratch.join("benchmark-b"))),
    ));
    lines.push((10, "IDX ingestion", guard(|| criterion_10(&scratch.join("idx")))));

    let mut failed = 0;
    for (id, name, outcome) in &lines {
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} [{tag}] {name}: {}", outcome.detail);
        if !outcome.passed {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
