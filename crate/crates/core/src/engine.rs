//! Simulated federated training: client sampling, local SGD, server
//! aggregation and per-round evaluation.
//!
//! Selected clients train in parallel, each from its own counter-derived
//! seed. Updates are collected in client-id order and reduced on one thread,
//! so a run is bitwise reproducible regardless of scheduling.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocator::{self, AllocatorConfig, WeightVector};
use crate::data::{Dataset, FederatedDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, ClientEvalSet, FairnessReport, GradientSource};
use crate::models::{self, Batch, ModelParams, ModelSpec};
use crate::rng::{stream_rng, Stream};

/// Floor applied to reported losses before raising them to the power `q`.
pub const QFFL_LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// `w_K - w_0` after local training.
    pub delta: Vec<f64>,
    /// Mean minibatch loss over the local steps.
    pub reported_loss: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundPlan {
    pub round_index: usize,
    pub selected_clients: Vec<usize>,
    pub client_lr: f64,
    pub local_steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AggregationStrategy {
    FedMaba {
        alpha: f64,
        allocator: AllocatorConfig,
        eta_s: f64,
    },
    FedAvg {
        eta_s: f64,
    },
    /// Simplified q-FFL: aggregation weights proportional to `n_i F_i^q`.
    QFfl {
        q: f64,
        eta_s: f64,
    },
}

impl AggregationStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AggregationStrategy::FedMaba { .. } => "fedmaba",
            AggregationStrategy::FedAvg { .. } => "fedavg",
            AggregationStrategy::QFfl { .. } => "qffl",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let eta_s = match *self {
            AggregationStrategy::FedMaba {
                alpha,
                allocator,
                eta_s,
            } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::config("strategy.alpha", format!("must lie in [0,1], got {alpha}")));
                }
                allocator.validate()?;
                eta_s
            }
            AggregationStrategy::FedAvg { eta_s } => eta_s,
            AggregationStrategy::QFfl { q, eta_s } => {
                if !(q >= 0.0) || !q.is_finite() {
                    return Err(Error::config("strategy.q", format!("must be >= 0, got {q}")));
                }
                eta_s
            }
        };
        if !(eta_s > 0.0) || !eta_s.is_finite() {
            return Err(Error::config("strategy.eta_s", format!("must be > 0, got {eta_s}")));
        }
        Ok(())
    }
}

/// Anything a client can run minibatch SGD on.
pub trait LocalObjective: Sync {
    fn n_samples(&self) -> usize;
    /// Mean loss and gradient over the samples at the given positions.
    fn loss_and_gradient(&self, params: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)>;
}

/// One client's slice of a dataset under a model spec.
#[derive(Debug, Clone, Copy)]
pub struct ClientSlice<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a Dataset,
    pub indices: &'a [usize],
}

impl ClientSlice<'_> {
    fn positions_to_rows(&self, batch: &[usize]) -> Vec<usize> {
        batch.iter().map(|&k| self.indices[k]).collect()
    }
}

impl LocalObjective for ClientSlice<'_> {
    fn n_samples(&self) -> usize {
        self.indices.len()
    }

    fn loss_and_gradient(&self, params: &[f64], batch: &[usize]) -> Result<(f64, Vec<f64>)> {
        let (features, labels) = self.data.gather(&self.positions_to_rows(batch));
        let params = ModelParams {
            values: params.to_vec(),
            shape: self.spec.layer_dims(),
        };
        models::loss_and_gradient(&params, self.spec, &Batch::new(&features, &labels, self.data.n_features))
    }
}

/// Sorted uniform sample without replacement of `round(fraction * n)` clients.
pub fn sample_clients<R: Rng + ?Sized>(n_clients: usize, fraction: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "federation.participation",
            format!("must lie in (0,1], got {fraction}"),
        ));
    }
    if n_clients == 0 {
        return Err(Error::config("federation.n_clients", "must be >= 1"));
    }
    let k = ((fraction * n_clients as f64).round() as usize).clamp(1, n_clients);
    if k == n_clients {
        return Ok((0..n_clients).collect());
    }
    let mut chosen = rand::seq::index::sample(rng, n_clients, k).into_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// `K` minibatch SGD steps over reshuffled passes of the client's data.
///
/// With `prox_mu > 0` each gradient gets the proximal term `mu (w - anchor)`.
/// The reported loss is the plain minibatch loss, averaged over steps.
pub fn local_train<O: LocalObjective, R: Rng + ?Sized>(
    model: &[f64],
    objective: &O,
    plan: &RoundPlan,
    client_id: usize,
    prox_mu: f64,
    anchor: &[f64],
    rng: &mut R,
) -> Result<ClientUpdate> {
    let n = objective.n_samples();
    let diverged = |message: String| Error::Divergence {
        round: plan.round_index,
        client: client_id,
        message,
    };
    if n == 0 {
        return Err(Error::Data(format!("client {client_id} has no samples")));
    }
    if plan.local_steps == 0 || plan.batch_size == 0 {
        return Err(Error::config("federation.local_steps", "local steps and batch size must be >= 1"));
    }
    if anchor.len() != model.len() {
        return Err(Error::Dimension {
            expected: model.len(),
            actual: anchor.len(),
        });
    }

    let mut w = model.to_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut loss_sum = 0.0;

    for _ in 0..plan.local_steps {
        if cursor >= n {
            order.shuffle(rng);
            cursor = 0;
        }
        let end = (cursor + plan.batch_size).min(n);
        let (loss, mut grad) = objective.loss_and_gradient(&w, &order[cursor..end])?;
        cursor = end;
        if !loss.is_finite() {
            return Err(diverged(format!("loss {loss}")));
        }
        if prox_mu != 0.0 {
            for ((g, wi), ai) in grad.iter_mut().zip(&w).zip(anchor) {
                *g += prox_mu * (wi - ai);
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= plan.client_lr * g;
        }
        loss_sum += loss;
    }

    Ok(ClientUpdate {
        client_id,
        delta: w.iter().zip(model).map(|(a, b)| a - b).collect(),
        reported_loss: loss_sum / plan.local_steps as f64,
        sample_count: n,
    })
}

fn check_updates(server: &[f64], updates: &[ClientUpdate]) -> Result<()> {
    if updates.is_empty() {
        return Err(Error::Aggregation("no client updates".into()));
    }
    if let Some(u) = updates.iter().find(|u| u.delta.len() != server.len()) {
        return Err(Error::Aggregation(format!(
            "client {} delta has {} entries, model has {}",
            u.client_id,
            u.delta.len(),
            server.len()
        )));
    }
    Ok(())
}

fn weighted_delta(updates: &[ClientUpdate], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; updates[0].delta.len()];
    for (u, &w) in updates.iter().zip(weights) {
        for (o, d) in out.iter_mut().zip(&u.delta) {
            *o += w * d;
        }
    }
    out
}

fn apply(server: &[f64], eta_s: f64, step: &[f64]) -> Vec<f64> {
    server.iter().zip(step).map(|(w, s)| w + eta_s * s).collect()
}

/// `w + eta_s * sum_i (n_i / sum_j n_j) delta_i`.
pub fn aggregate_fedavg(server: &[f64], updates: &[ClientUpdate], eta_s: f64) -> Result<Vec<f64>> {
    check_updates(server, updates)?;
    let total: usize = updates.iter().map(|u| u.sample_count).sum();
    if total == 0 {
        return Err(Error::Aggregation("zero total sample count".into()));
    }
    let weights: Vec<f64> = updates
        .iter()
        .map(|u| u.sample_count as f64 / total as f64)
        .collect();
    Ok(apply(server, eta_s, &weighted_delta(updates, &weights)))
}

/// Normalized `n_i F_i^q` weights, computed in log space.
pub fn qffl_weights(updates: &[ClientUpdate], q: f64) -> Vec<f64> {
    let logs: Vec<f64> = updates
        .iter()
        .map(|u| (u.sample_count as f64).ln() + q * u.reported_loss.max(QFFL_LOSS_FLOOR).ln())
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let masses: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = masses.iter().sum();
    masses.iter().map(|m| m / total).collect()
}

pub fn aggregate_qffl(server: &[f64], updates: &[ClientUpdate], q: f64, eta_s: f64) -> Result<Vec<f64>> {
    if q == 0.0 {
        return aggregate_fedavg(server, updates, eta_s);
    }
    check_updates(server, updates)?;
    Ok(apply(server, eta_s, &weighted_delta(updates, &qffl_weights(updates, q))))
}

/// Allocation details of one FedMABA aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MabaStep {
    /// Normalized weights of the participating clients, in update order.
    pub subset_weights: Vec<f64>,
    pub lambda_star: f64,
}

/// FedMABA server step.
///
/// The participating clients' entries of the persistent vector are updated by
/// the allocator on their own sub-simplex (so `N = |subset|` in the ball),
/// rescaled to keep the subset's previous total mass, and the normalized
/// subset weights are blended with the plain mean:
/// `w + eta_s * (alpha * sum_i pt_i delta_i + (1 - alpha) * mean_i delta_i)`.
pub fn aggregate_fedmaba(
    server: &[f64],
    updates: &[ClientUpdate],
    persistent_p: &WeightVector,
    alpha: f64,
    allocator_config: &AllocatorConfig,
    eta_s: f64,
) -> Result<(Vec<f64>, WeightVector, MabaStep)> {
    check_updates(server, updates)?;
    let global = persistent_p.as_slice();
    if let Some(u) = updates.iter().find(|u| u.client_id >= global.len()) {
        return Err(Error::Aggregation(format!(
            "client {} outside weight vector of length {}",
            u.client_id,
            global.len()
        )));
    }

    let subset: Vec<f64> = updates.iter().map(|u| global[u.client_id]).collect();
    let mass: f64 = subset.iter().sum();
    let local = if mass > 0.0 {
        WeightVector::normalized(&subset)?
    } else {
        WeightVector::uniform(subset.len())
    };
    let losses: Vec<f64> = updates.iter().map(|u| u.reported_loss).collect();
    let (updated, lambda_star) = allocator::update_weights(&local, &losses, allocator_config)?;

    let mut next = global.to_vec();
    for (u, &v) in updates.iter().zip(updated.as_slice()) {
        next[u.client_id] = mass * v;
    }
    // Redundant with the allocator's own normalization but kept explicit.
    let written: Vec<f64> = updates.iter().map(|u| next[u.client_id]).collect();
    let tilde = if mass > 0.0 {
        WeightVector::normalized(&written)?.into_vec()
    } else {
        updated.into_vec()
    };
    let next = WeightVector::normalized(&next)?;

    Ok((
        blended_step(server, updates, &tilde, alpha, eta_s),
        next,
        MabaStep {
            subset_weights: tilde,
            lambda_star,
        },
    ))
}

/// `w + eta_s * (alpha * sum_i tilde_i delta_i + (1 - alpha) * mean_i delta_i)`.
pub fn blended_step(server: &[f64], updates: &[ClientUpdate], tilde: &[f64], alpha: f64, eta_s: f64) -> Vec<f64> {
    let uniform = vec![1.0 / updates.len() as f64; updates.len()];
    let bandit = weighted_delta(updates, tilde);
    let mean = weighted_delta(updates, &uniform);
    let step: Vec<f64> = bandit
        .iter()
        .zip(&mean)
        .map(|(b, m)| alpha * b + (1.0 - alpha) * m)
        .collect();
    apply(server, eta_s, &step)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub participation: f64,
    pub rounds: usize,
    pub client_lr: f64,
    pub lr_decay: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub prox_mu: f64,
    pub loss_clip: Option<f64>,
    pub eval_every: usize,
    pub bound_delta: f64,
    pub record_timing: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            participation: 1.0,
            rounds: 100,
            client_lr: 0.1,
            lr_decay: 0.999,
            local_steps: 10,
            batch_size: 50,
            prox_mu: 0.0,
            loss_clip: None,
            eval_every: 10,
            bound_delta: 0.05,
            record_timing: false,
            seed: 0,
        }
    }
}

/// Evaluation snapshot of the server model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub train_loss: f64,
    pub client_accuracy: Vec<f64>,
    pub client_loss: Vec<f64>,
    pub client_train_loss: Vec<f64>,
    pub fairness_variance: f64,
    pub worst_5pct: f64,
    pub best_5pct: f64,
    pub loss_std: f64,
    /// Squared norm of the full training-data gradient.
    pub grad_norm_sq: f64,
    pub generalization_gap: f64,
    pub bound_c: f64,
    /// `"clip"` or `"max_sample_loss"`.
    pub bound_c_source: String,
    pub bound_rhs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub strategy: String,
    pub seed: u64,
    pub selected: Vec<usize>,
    pub client_lr: f64,
    pub mean_reported_loss: f64,
    /// Persistent weights after the round (FedMABA only).
    pub weights: Option<Vec<f64>>,
    pub lambda_star: Option<f64>,
    pub chi_square_uniform: Option<f64>,
    pub eval: Option<EvalRecord>,
    pub wall_time_ms: Option<f64>,
}

/// State of one federated run.
pub struct Simulation<'a> {
    data: &'a FederatedDataset,
    spec: ModelSpec,
    strategy: AggregationStrategy,
    config: SimulationConfig,
    model: ModelParams,
    weights: WeightVector,
    round: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(
        data: &'a FederatedDataset,
        spec: ModelSpec,
        strategy: AggregationStrategy,
        config: SimulationConfig,
    ) -> Result<Self> {
        spec.validate()?;
        strategy.validate()?;
        data.validate()?;
        if spec.n_features() != data.train.n_features {
            return Err(Error::Dimension {
                expected: data.train.n_features,
                actual: spec.n_features(),
            });
        }
        if config.eval_every == 0 {
            return Err(Error::config("federation.eval_every", "must be >= 1"));
        }
        let mut rng = stream_rng(config.seed, Stream::ModelInit, 0, 0);
        let model = models::init_params(&spec, &mut rng);
        Ok(Self {
            data,
            spec,
            strategy,
            config,
            model,
            weights: WeightVector::uniform(data.n_clients()),
            round: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn set_model(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.model.len() {
            return Err(Error::Dimension {
                expected: self.model.len(),
                actual: values.len(),
            });
        }
        self.model.values = values;
        Ok(())
    }

    pub fn weights(&self) -> &WeightVector {
        &self.weights
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn plan(&self) -> Result<RoundPlan> {
        let t = self.round;
        let mut rng = stream_rng(self.config.seed, Stream::Sampling, t as u64, 0);
        Ok(RoundPlan {
            round_index: t,
            selected_clients: sample_clients(self.data.n_clients(), self.config.participation, &mut rng)?,
            client_lr: self.config.client_lr * self.config.lr_decay.powi(t as i32),
            local_steps: self.config.local_steps,
            batch_size: self.config.batch_size,
        })
    }

    /// Trains the planned clients. The result is in client-id order.
    pub fn train_clients(&self, plan: &RoundPlan, clients: &[usize]) -> Result<Vec<ClientUpdate>> {
        let mut updates: Vec<ClientUpdate> = clients
            .par_iter()
            .map(|&client| {
                let slice = ClientSlice {
                    spec: &self.spec,
                    data: &self.data.train,
                    indices: &self.data.partition[client],
                };
                let mut rng = stream_rng(self.config.seed, Stream::LocalTraining, plan.round_index as u64, client as u64);
                local_train(
                    &self.model.values,
                    &slice,
                    plan,
                    client,
                    self.config.prox_mu,
                    &self.model.values,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        updates.sort_by_key(|u| u.client_id);
        Ok(updates)
    }

    fn should_evaluate(&self, t: usize) -> bool {
        (t + 1).is_multiple_of(self.config.eval_every) || t + 1 == self.config.rounds
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let started = Instant::now();
        let t = self.round;
        let plan = self.plan()?;
        let mut updates = self.train_clients(&plan, &plan.selected_clients)?;
        if let Some(clip) = self.config.loss_clip {
            for u in updates.iter_mut() {
                u.reported_loss = u.reported_loss.min(clip);
            }
        }
        let mean_reported_loss =
            updates.iter().map(|u| u.reported_loss).sum::<f64>() / updates.len() as f64;

        let (mut weights_out, mut lambda_star, mut chi) = (None, None, None);
        let next = match self.strategy {
            AggregationStrategy::FedMaba {
                alpha,
                allocator,
                eta_s,
            } => {
                let (model, p, step) =
                    aggregate_fedmaba(&self.model.values, &updates, &self.weights, alpha, &allocator, eta_s)?;
                chi = Some(metrics::chi_square_divergence(&WeightVector::uniform(p.len()), &p)?);
                weights_out = Some(p.as_slice().to_vec());
                lambda_star = Some(step.lambda_star);
                self.weights = p;
                model
            }
            AggregationStrategy::FedAvg { eta_s } => aggregate_fedavg(&self.model.values, &updates, eta_s)?,
            AggregationStrategy::QFfl { q, eta_s } => aggregate_qffl(&self.model.values, &updates, q, eta_s)?,
        };
        if let Some(i) = next.iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                round: t,
                client: updates[0].client_id,
                message: format!("server parameter {i} became non-finite"),
            });
        }
        self.model.values = next;
        self.round += 1;

        let eval = if self.should_evaluate(t) {
            Some(self.evaluate()?)
        } else {
            None
        };

        Ok(RoundRecord {
            round: t,
            strategy: self.strategy.name().to_string(),
            seed: self.config.seed,
            selected: plan.selected_clients,
            client_lr: plan.client_lr,
            mean_reported_loss,
            weights: weights_out,
            lambda_star,
            chi_square_uniform: chi,
            eval,
            wall_time_ms: self
                .config
                .record_timing
                .then(|| started.elapsed().as_secs_f64() * 1e3),
        })
    }

    /// Scores the current server model on global and per-client data.
    pub fn evaluate(&self) -> Result<EvalRecord> {
        let data = self.data;
        let spec = &self.spec;
        let global = models::evaluate(&self.model, spec, &data.test.batch())?;
        let (train_losses, _) = models::per_sample(&self.model, spec, &data.train.batch())?;
        let (test_losses, test_pred) = models::per_sample(&self.model, spec, &data.test.batch())?;
        let (_, full_grad) = models::loss_and_gradient(&self.model, spec, &data.train.batch())?;

        let mean_of = |idx: &[usize], v: &[f64]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64;
        let client_train_loss: Vec<f64> = data.partition.iter().map(|s| mean_of(s, &train_losses)).collect();
        let client_loss: Vec<f64> = data.client_test.iter().map(|s| mean_of(s, &test_losses)).collect();
        let client_accuracy: Vec<f64> = data
            .client_test
            .iter()
            .map(|s| {
                s.iter().filter(|&&i| test_pred[i] == data.test.labels[i]).count() as f64 / s.len() as f64
            })
            .collect();

        let set = ClientEvalSet {
            client_accuracy,
            client_loss,
            global_accuracy: global.accuracy,
            global_loss: global.mean_loss,
        };
        let fairness = FairnessReport::from_eval(&set)?;
        let train_loss = train_losses.iter().sum::<f64>() / train_losses.len() as f64;

        let (bound_c, bound_c_source) = match self.config.loss_clip {
            Some(c) => (c, "clip"),
            None => (
                train_losses
                    .iter()
                    .chain(&test_losses)
                    .copied()
                    .fold(f64::MIN_POSITIVE, f64::max),
                "max_sample_loss",
            ),
        };
        let bound_rhs = metrics::generalization_bound_rhs(
            &client_train_loss,
            bound_c,
            self.config.bound_delta,
            data.n_clients(),
        )?;

        Ok(EvalRecord {
            global_accuracy: set.global_accuracy,
            global_loss: set.global_loss,
            train_loss,
            client_accuracy: set.client_accuracy,
            client_loss: set.client_loss,
            client_train_loss,
            fairness_variance: fairness.variance,
            worst_5pct: fairness.worst_5pct_mean,
            best_5pct: fairness.best_5pct_mean,
            loss_std: fairness.loss_std,
            grad_norm_sq: full_grad.iter().map(|g| g * g).sum(),
            generalization_gap: set.global_loss - train_loss,
            bound_c,
            bound_c_source: bound_c_source.to_string(),
            bound_rhs,
        })
    }

    pub fn run(&mut self) -> Result<Vec<RoundRecord>> {
        (0..self.config.rounds).map(|_| self.run_round()).collect()
    }
}

/// Per-client gradients of a federated dataset, for diagnostics.
pub struct FederatedObjective<'a> {
    pub spec: &'a ModelSpec,
    pub data: &'a FederatedDataset,
    pub batch_size: usize,
}

impl GradientSource for FederatedObjective<'_> {
    fn n_clients(&self) -> usize {
        self.data.n_clients()
    }

    fn dim(&self) -> usize {
        self.spec.n_params()
    }

    fn full_gradient(&self, client: usize, params: &[f64]) -> Result<Vec<f64>> {
        let slice = ClientSlice {
            spec: self.spec,
            data: &self.data.train,
            indices: &self.data.partition[client],
        };
        let all: Vec<usize> = (0..slice.n_samples()).collect();
        Ok(slice.loss_and_gradient(params, &all)?.1)
    }

    fn minibatch_gradient(&self, client: usize, params: &[f64], rng: &mut dyn rand::RngCore) -> Result<Vec<f64>> {
        let slice = ClientSlice {
            spec: self.spec,
            data: &self.data.train,
            indices: &self.data.partition[client],
        };
        let n = slice.n_samples();
        if self.batch_size >= n {
            let all: Vec<usize> = (0..n).collect();
            return Ok(slice.loss_and_gradient(params, &all)?.1);
        }
        let batch = rand::seq::index::sample(rng, n, self.batch_size).into_vec();
        Ok(slice.loss_and_gradient(params, &batch)?.1)
    }
}
