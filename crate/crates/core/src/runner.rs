//! Experiment configuration, grid orchestration and result files.
//!
//! A run directory holds one subdirectory per `(strategy, seed)` cell with
//! `records.jsonl`, `records.csv`, `summary.csv` and `config.echo`, plus a
//! top-level `summary.csv` with one row per cell and the resolved
//! `config.echo`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::AllocatorConfig;
use crate::data::{self, BaseDataset, ClientTestMode, FederatedDataset, PartitionSpec};
use crate::engine::{AggregationStrategy, RoundRecord, Simulation, SimulationConfig};
use crate::error::{Error, Result};
use crate::models::ModelSpec;

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "FEDMABA_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_classes: usize,
    pub n_features: usize,
    pub samples_per_client: usize,
    pub class_separation: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub client_test: ClientTestMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            n_classes: 10,
            n_features: 20,
            samples_per_client: 100,
            class_separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            client_test: ClientTestMode::Matched,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Softmax,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Softmax,
            hidden_width: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub n_clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub client_lr: f64,
    pub lr_decay: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub loss_clip: Option<f64>,
    pub bound_delta: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_clients: 20,
            participation: 1.0,
            rounds: 100,
            client_lr: 0.1,
            lr_decay: 0.999,
            local_steps: 10,
            batch_size: 50,
            eval_every: 10,
            loss_clip: None,
            bound_delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Fedmaba,
    Fedavg,
    Qffl,
    /// FedAvg aggregation with proximal local training.
    Fedprox,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fedmaba => "fedmaba",
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::Qffl => "qffl",
            StrategyKind::Fedprox => "fedprox",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub grid: Vec<StrategyKind>,
    pub alpha: f64,
    pub eta_b: f64,
    pub rho: f64,
    pub eta_s: f64,
    pub q: f64,
    pub mu: f64,
    pub lambda_max_initial: f64,
    pub lambda_tolerance: f64,
    pub max_bracket_doublings: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        let allocator = AllocatorConfig::default();
        Self {
            grid: vec![StrategyKind::Fedmaba, StrategyKind::Fedavg],
            alpha: 0.5,
            eta_b: allocator.eta_b,
            rho: allocator.rho,
            eta_s: 1.0,
            q: 0.1,
            mu: 0.1,
            lambda_max_initial: allocator.lambda_max_initial,
            lambda_tolerance: allocator.lambda_tolerance,
            max_bracket_doublings: allocator.max_bracket_doublings,
        }
    }
}

impl StrategyConfig {
    pub fn allocator(&self) -> AllocatorConfig {
        AllocatorConfig {
            eta_b: self.eta_b,
            rho: self.rho,
            lambda_max_initial: self.lambda_max_initial,
            lambda_tolerance: self.lambda_tolerance,
            max_bracket_doublings: self.max_bracket_doublings,
        }
    }

    /// Aggregation rule and proximal coefficient for one grid entry.
    pub fn resolve(&self, kind: StrategyKind) -> (AggregationStrategy, f64) {
        match kind {
            StrategyKind::Fedmaba => (
                AggregationStrategy::FedMaba {
                    alpha: self.alpha,
                    allocator: self.allocator(),
                    eta_s: self.eta_s,
                },
                0.0,
            ),
            StrategyKind::Fedavg => (AggregationStrategy::FedAvg { eta_s: self.eta_s }, 0.0),
            StrategyKind::Qffl => (
                AggregationStrategy::QFfl {
                    q: self.q,
                    eta_s: self.eta_s,
                },
                0.0,
            ),
            StrategyKind::Fedprox => (AggregationStrategy::FedAvg { eta_s: self.eta_s }, self.mu),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub output_dir: Option<PathBuf>,
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0],
            output_dir: None,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub strategy: StrategyConfig,
    pub run: RunConfig,
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(key, format!("must be > 0, got {v}")))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(Error::config(key, "must be >= 1"))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Synthetic {
            at_least_one("data.n_classes", d.n_classes)?;
            at_least_one("data.n_features", d.n_features)?;
            at_least_one("data.samples_per_client", d.samples_per_client)?;
            if !(d.class_separation >= 0.0) {
                return Err(Error::config("data.class_separation", "must be >= 0"));
            }
        } else {
            for (key, path) in [
                ("data.train_images", &d.train_images),
                ("data.train_labels", &d.train_labels),
                ("data.test_images", &d.test_images),
                ("data.test_labels", &d.test_labels),
            ] {
                if path.is_none() {
                    return Err(Error::config(key, "required for idx data"));
                }
            }
        }
        self.partition.validate()?;
        if self.model.kind == ModelKind::Mlp {
            at_least_one("model.hidden_width", self.model.hidden_width)?;
        }

        let f = &self.federation;
        at_least_one("federation.n_clients", f.n_clients)?;
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config(
                "federation.participation",
                format!("must lie in (0,1], got {}", f.participation),
            ));
        }
        at_least_one("federation.rounds", f.rounds)?;
        positive("federation.client_lr", f.client_lr)?;
        positive("federation.lr_decay", f.lr_decay)?;
        at_least_one("federation.local_steps", f.local_steps)?;
        at_least_one("federation.batch_size", f.batch_size)?;
        at_least_one("federation.eval_every", f.eval_every)?;
        if let Some(c) = f.loss_clip {
            positive("federation.loss_clip", c)?;
        }
        if !(f.bound_delta > 0.0 && f.bound_delta < 1.0) {
            return Err(Error::config("federation.bound_delta", "must lie in (0,1)"));
        }

        let s = &self.strategy;
        if s.grid.is_empty() {
            return Err(Error::config("strategy.grid", "must name at least one strategy"));
        }
        if !(0.0..=1.0).contains(&s.alpha) {
            return Err(Error::config(
                "strategy.alpha",
                format!("out of range [0,1]: {}", s.alpha),
            ));
        }
        positive("strategy.eta_b", s.eta_b)?;
        if !(s.rho >= 0.0) || !s.rho.is_finite() {
            return Err(Error::config("strategy.rho", format!("must be >= 0, got {}", s.rho)));
        }
        positive("strategy.eta_s", s.eta_s)?;
        if !(s.q >= 0.0) || !s.q.is_finite() {
            return Err(Error::config("strategy.q", format!("must be >= 0, got {}", s.q)));
        }
        if !(s.mu >= 0.0) || !s.mu.is_finite() {
            return Err(Error::config("strategy.mu", format!("must be >= 0, got {}", s.mu)));
        }
        positive("strategy.lambda_max_initial", s.lambda_max_initial)?;
        positive("strategy.lambda_tolerance", s.lambda_tolerance)?;
        if self.run.seeds.is_empty() {
            return Err(Error::config("run.seeds", "must list at least one seed"));
        }
        Ok(())
    }

    pub fn model_spec(&self, n_features: usize, n_classes: usize) -> ModelSpec {
        match self.model.kind {
            ModelKind::Softmax => ModelSpec::SoftmaxRegression {
                n_features,
                n_classes,
            },
            ModelKind::Mlp => ModelSpec::Mlp2 {
                n_features,
                hidden_width: self.model.hidden_width,
                n_classes,
            },
        }
    }

    pub fn simulation(&self, seed: u64, prox_mu: f64) -> SimulationConfig {
        let f = &self.federation;
        SimulationConfig {
            participation: f.participation,
            rounds: f.rounds,
            client_lr: f.client_lr,
            lr_decay: f.lr_decay,
            local_steps: f.local_steps,
            batch_size: f.batch_size,
            prox_mu,
            loss_clip: f.loss_clip,
            eval_every: f.eval_every,
            bound_delta: f.bound_delta,
            record_timing: self.run.record_timing,
            seed,
        }
    }

    /// Resolved config as TOML. Unset optional keys are listed as comments.
    pub fn dump(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::config("<dump>", e.to_string()))?;
        let mut unset = Vec::new();
        let d = &self.data;
        for (key, v) in [
            ("data.train_images", &d.train_images),
            ("data.train_labels", &d.train_labels),
            ("data.test_images", &d.test_images),
            ("data.test_labels", &d.test_labels),
            ("run.output_dir", &self.run.output_dir),
        ] {
            if v.is_none() {
                unset.push(key);
            }
        }
        if self.federation.loss_clip.is_none() {
            unset.push("federation.loss_clip");
        }
        let mut out = String::new();
        for key in unset {
            let _ = writeln!(out, "# {key} = (unset)");
        }
        out.push_str(&body);
        Ok(out)
    }

    /// Parses TOML text after applying `section.key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        let config: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<schema>", e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let raw = raw.trim_start_matches('-');
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must look like --section.key=value"))?;
    let value: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        cursor = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{part}` is not a section")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Builds the base data for one seed.
pub fn load_base(config: &ExperimentConfig, seed: u64) -> Result<BaseDataset> {
    let d = &config.data;
    match d.source {
        DataSource::Synthetic => data::generate_synthetic(
            config.federation.n_clients,
            d.n_classes,
            d.n_features,
            d.samples_per_client,
            d.class_separation,
            seed,
        ),
        DataSource::Idx => {
            let path = |p: &Option<PathBuf>| p.clone().expect("validated");
            let mut train = data::load_idx(&path(&d.train_images), &path(&d.train_labels))?;
            let mut test = data::load_idx(&path(&d.test_images), &path(&d.test_labels))?;
            let classes = train.n_classes.max(test.n_classes);
            train.n_classes = classes;
            test.n_classes = classes;
            Ok(BaseDataset { train, test })
        }
    }
}

pub fn build_dataset(config: &ExperimentConfig, seed: u64) -> Result<FederatedDataset> {
    let base = load_base(config, seed)?;
    data::build_federated(
        base,
        config.federation.n_clients,
        &config.partition,
        config.data.client_test,
        seed,
    )
}

/// Result of one `(strategy, seed)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub dir: PathBuf,
    pub records: Vec<RoundRecord>,
    pub error: Option<String>,
    pub final_weights: Option<Vec<f64>>,
}

impl CellOutcome {
    /// Evaluated record with the highest global accuracy (earliest on ties).
    pub fn best(&self) -> Option<&RoundRecord> {
        let mut best: Option<&RoundRecord> = None;
        for r in &self.records {
            let Some(e) = &r.eval else { continue };
            if best.is_none_or(|b| e.global_accuracy > b.eval.as_ref().expect("eval").global_accuracy) {
                best = Some(r);
            }
        }
        best
    }

    pub fn last_eval(&self) -> Option<&RoundRecord> {
        self.records.iter().rev().find(|r| r.eval.is_some())
    }
}

pub fn cell_name(strategy: StrategyKind, seed: u64) -> String {
    format!("{}-seed{seed}", strategy.name())
}

/// Runs every cell of the grid in memory without writing files.
pub fn run_cell(
    config: &ExperimentConfig,
    dataset: &FederatedDataset,
    strategy: StrategyKind,
    seed: u64,
) -> CellOutcome {
    let (aggregation, mu) = config.strategy.resolve(strategy);
    let n_classes = dataset.train.n_classes;
    let spec = config.model_spec(dataset.train.n_features, n_classes);
    let mut outcome = CellOutcome {
        strategy,
        seed,
        dir: PathBuf::new(),
        records: Vec::new(),
        error: None,
        final_weights: None,
    };
    let mut sim = match Simulation::new(dataset, spec, aggregation, config.simulation(seed, mu)) {
        Ok(sim) => sim,
        Err(e) => {
            outcome.error = Some(e.to_string());
            return outcome;
        }
    };
    for _ in 0..config.federation.rounds {
        match sim.run_round() {
            Ok(r) => {
                if r.eval.is_some() {
                    outcome.records.push(r);
                }
            }
            Err(e) => {
                outcome.error = Some(e.to_string());
                break;
            }
        }
    }
    if strategy == StrategyKind::Fedmaba {
        outcome.final_weights = Some(sim.weights().as_slice().to_vec());
    }
    outcome
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(";")
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(path, std::io::Error::other(e.to_string()))
}

const RECORD_COLUMNS: [&str; 21] = [
    "round",
    "strategy",
    "seed",
    "client_lr",
    "mean_reported_loss",
    "lambda_star",
    "chi_square_uniform",
    "global_accuracy",
    "global_loss",
    "train_loss",
    "fairness_variance",
    "worst_5pct",
    "best_5pct",
    "loss_std",
    "grad_norm_sq",
    "generalization_gap",
    "bound_c",
    "bound_c_source",
    "bound_rhs",
    "wall_time_ms",
    "selected",
];

/// Flat CSV of round records. Per-client accuracies and weights become
/// `acc_<i>` and `p_<i>` columns.
pub fn write_records_csv(path: &Path, records: &[RoundRecord], n_clients: usize) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    let mut header: Vec<String> = RECORD_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..n_clients).map(|i| format!("acc_{i}")));
    header.extend((0..n_clients).map(|i| format!("p_{i}")));
    w.write_record(&header).map_err(&err)?;
    for r in records {
        let e = r.eval.as_ref();
        let ef = |f: fn(&crate::engine::EvalRecord) -> f64| fmt_opt(e.map(f));
        let mut row = vec![
            r.round.to_string(),
            r.strategy.clone(),
            r.seed.to_string(),
            fmt_f64(r.client_lr),
            fmt_f64(r.mean_reported_loss),
            fmt_opt(r.lambda_star),
            fmt_opt(r.chi_square_uniform),
            ef(|e| e.global_accuracy),
            ef(|e| e.global_loss),
            ef(|e| e.train_loss),
            ef(|e| e.fairness_variance),
            ef(|e| e.worst_5pct),
            ef(|e| e.best_5pct),
            ef(|e| e.loss_std),
            ef(|e| e.grad_norm_sq),
            ef(|e| e.generalization_gap),
            ef(|e| e.bound_c),
            e.map(|e| e.bound_c_source.clone()).unwrap_or_default(),
            ef(|e| e.bound_rhs),
            fmt_opt(r.wall_time_ms),
            r.selected.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
        ];
        for i in 0..n_clients {
            row.push(fmt_opt(e.and_then(|e| e.client_accuracy.get(i).copied())));
        }
        for i in 0..n_clients {
            row.push(fmt_opt(r.weights.as_ref().and_then(|w| w.get(i).copied())));
        }
        w.write_record(&row).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_records_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::io(path, e.into()))?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

const SUMMARY_COLUMNS: [&str; 14] = [
    "strategy",
    "seed",
    "status",
    "evaluations",
    "best_round",
    "best_global_accuracy",
    "best_global_loss",
    "best_fairness_variance",
    "best_worst_5pct",
    "best_best_5pct",
    "final_round",
    "final_global_accuracy",
    "final_fairness_variance",
    "final_weights",
];

fn summary_row(cell: &CellOutcome) -> Vec<String> {
    let best = cell.best();
    let best_eval = best.and_then(|r| r.eval.as_ref());
    let last = cell.last_eval();
    let last_eval = last.and_then(|r| r.eval.as_ref());
    vec![
        cell.strategy.name().to_string(),
        cell.seed.to_string(),
        match &cell.error {
            None => "ok".to_string(),
            Some(e) => format!("failed: {e}"),
        },
        cell.records.len().to_string(),
        best.map(|r| r.round.to_string()).unwrap_or_default(),
        fmt_opt(best_eval.map(|e| e.global_accuracy)),
        fmt_opt(best_eval.map(|e| e.global_loss)),
        fmt_opt(best_eval.map(|e| e.fairness_variance)),
        fmt_opt(best_eval.map(|e| e.worst_5pct)),
        fmt_opt(best_eval.map(|e| e.best_5pct)),
        last.map(|r| r.round.to_string()).unwrap_or_default(),
        fmt_opt(last_eval.map(|e| e.global_accuracy)),
        fmt_opt(last_eval.map(|e| e.fairness_variance)),
        cell.final_weights.as_deref().map(join_f64).unwrap_or_default(),
    ]
}

fn write_summary(path: &Path, cells: &[CellOutcome]) -> Result<()> {
    let err = csv_error(path);
    let mut w = csv::Writer::from_path(path).map_err(&err)?;
    w.write_record(SUMMARY_COLUMNS).map_err(&err)?;
    for cell in cells {
        w.write_record(summary_row(cell)).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_cell(cell: &CellOutcome, echo: &str, n_clients: usize) -> Result<()> {
    fs::create_dir_all(&cell.dir).map_err(|e| Error::io(&cell.dir, e))?;
    write_records_jsonl(&cell.dir.join("records.jsonl"), &cell.records)?;
    write_records_csv(&cell.dir.join("records.csv"), &cell.records, n_clients)?;
    write_summary(&cell.dir.join("summary.csv"), std::slice::from_ref(cell))?;
    let path = cell.dir.join("config.echo");
    fs::write(&path, echo).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl ExperimentSummary {
    pub fn all_ok(&self) -> bool {
        self.cells.iter().all(|c| c.error.is_none())
    }
}

/// Output directory: the config's `run.output_dir`, else `$FEDMABA_OUTPUT_ROOT`,
/// else `./runs`.
pub fn resolve_output_dir(config: &ExperimentConfig) -> PathBuf {
    config.run.output_dir.clone().unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
    })
}

/// Runs the `(strategy, seed)` grid and writes every cell's files.
///
/// A failing cell is recorded in the summary; sibling cells still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let output_dir = resolve_output_dir(config);
    fs::create_dir_all(&output_dir).map_err(|e| Error::io(&output_dir, e))?;
    let echo = config.dump()?;
    let echo_path = output_dir.join("config.echo");
    fs::write(&echo_path, &echo).map_err(|e| Error::io(&echo_path, e))?;

    let datasets: BTreeMap<u64, std::result::Result<FederatedDataset, String>> = config
        .run
        .seeds
        .iter()
        .map(|&seed| (seed, build_dataset(config, seed).map_err(|e| e.to_string())))
        .collect();

    let grid: Vec<(StrategyKind, u64)> = config
        .strategy
        .grid
        .iter()
        .flat_map(|&s| config.run.seeds.iter().map(move |&seed| (s, seed)))
        .collect();

    let n_clients = config.federation.n_clients;
    let cells: Vec<CellOutcome> = grid
        .par_iter()
        .map(|&(strategy, seed)| {
            let mut cell = match &datasets[&seed] {
                Ok(data) => run_cell(config, data, strategy, seed),
                Err(e) => CellOutcome {
                    strategy,
                    seed,
                    dir: PathBuf::new(),
                    records: Vec::new(),
                    error: Some(format!("dataset: {e}")),
                    final_weights: None,
                },
            };
            cell.dir = output_dir.join(cell_name(strategy, seed));
            if let Err(e) = write_cell(&cell, &echo, n_clients) {
                cell.error.get_or_insert_with(|| e.to_string());
            }
            cell
        })
        .collect();

    write_summary(&output_dir.join("summary.csv"), &cells)?;
    Ok(ExperimentSummary { output_dir, cells })
}

/// Scalar metrics exported by [`emit_plot_data`].
pub fn scalar_metrics(r: &RoundRecord) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("client_lr", r.client_lr),
        ("mean_reported_loss", r.mean_reported_loss),
    ];
    if let Some(v) = r.lambda_star {
        out.push(("lambda_star", v));
    }
    if let Some(v) = r.chi_square_uniform {
        out.push(("chi_square_uniform", v));
    }
    if let Some(v) = r.wall_time_ms {
        out.push(("wall_time_ms", v));
    }
    if let Some(e) = &r.eval {
        out.extend([
            ("global_accuracy", e.global_accuracy),
            ("global_loss", e.global_loss),
            ("train_loss", e.train_loss),
            ("fairness_variance", e.fairness_variance),
            ("worst_5pct", e.worst_5pct),
            ("best_5pct", e.best_5pct),
            ("loss_std", e.loss_std),
            ("grad_norm_sq", e.grad_norm_sq),
            ("generalization_gap", e.generalization_gap),
            ("bound_rhs", e.bound_rhs),
        ]);
    }
    out
}

pub fn read_records(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Long-format `round,strategy,seed,metric,value` CSV gathered from every
/// `records.jsonl` under `run_dir`, written to `run_dir/plot_data.csv`.
pub fn emit_plot_data(run_dir: &Path) -> Result<PathBuf> {
    if !run_dir.is_dir() {
        return Err(Error::io(
            run_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
        ));
    }
    let mut rows: Vec<(String, String, u64, usize, f64)> = Vec::new();
    for entry in walkdir::WalkDir::new(run_dir).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::io(run_dir, std::io::Error::other(e.to_string())))?;
        if entry.file_type().is_file() && entry.file_name() == "records.jsonl" {
            for r in read_records(entry.path())? {
                for (metric, value) in scalar_metrics(&r) {
                    rows.push((metric.to_string(), r.strategy.clone(), r.seed, r.round, value));
                }
            }
        }
    }
    rows.sort_by(|a, b| (&a.0, &a.1, a.2, a.3).cmp(&(&b.0, &b.1, b.2, b.3)));

    let path = run_dir.join("plot_data.csv");
    {
        let err = csv_error(&path);
        let mut w = csv::Writer::from_path(&path).map_err(&err)?;
        w.write_record(["round", "strategy", "seed", "metric", "value"]).map_err(&err)?;
        for (metric, strategy, seed, round, value) in rows {
            w.write_record([round.to_string(), strategy, seed.to_string(), metric, fmt_f64(value)])
                .map_err(&err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}
