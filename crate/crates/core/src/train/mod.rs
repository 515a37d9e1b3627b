//! Training loop, evaluation and checkpoint persistence.

pub mod checkpoint;
pub mod data;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::Model;
use crate::error::{Error, Result};
use crate::gates::{balance_loss, balance_loss_var};
use crate::moe::RoutingDecision;
use crate::scalar::Scalar;
use crate::telemetry::ExpertUsageStats;

pub use data::{load_corpus, sample_batch, split_corpus, Batch};
pub use optim::{AdamConfig, AdamState};

/// Generator streams derived from the run seed.
pub const TRAIN_STREAM: u64 = 2;
pub const EVAL_STREAM: u64 = 3;

/// Share of the corpus held out for evaluation.
pub const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    /// Weight of the auxiliary balance term; 0 disables it.
    pub balance_weight: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub eval_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 16,
            learning_rate: 3e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            balance_weight: 0.0,
            seed: 0,
            eval_every: 500,
            eval_batches: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("train.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("train.learning_rate", "must be positive and finite"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.balance_weight.is_finite() && self.balance_weight >= 0.0) {
            return Err(Error::config("train.balance_weight", "must be non-negative"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("train.eval_every", "must be positive"));
        }
        if self.eval_batches == 0 {
            return Err(Error::config("train.eval_batches", "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub task_loss: f64,
    /// Mean over MoE layers of `N Σ f_i p_i`; 0 without MoE layers.
    pub balance_loss: f64,
    pub total_loss: f64,
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub task_loss: f64,
    pub balance_loss: f64,
    pub val_loss: f64,
}

/// The training generator for `seed`, positioned at its start.
pub fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(TRAIN_STREAM);
    r
}

pub fn eval_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(EVAL_STREAM);
    r
}

/// Model, optimizer state and data generator of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub model: Model<S>,
    pub opt: AdamState<S>,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamState::new(&model.store);
        let rng = train_rng(cfg.seed);
        Ok(Trainer { model, opt, cfg, rng })
    }

    /// Completed optimizer updates.
    pub fn step(&self) -> usize {
        self.opt.step
    }

    /// Samples a batch from `train_tokens` and applies one update.
    pub fn train_step(&mut self, train_tokens: &[u8]) -> Result<StepMetrics> {
        let batch = sample_batch(train_tokens, self.cfg.batch_size, self.model.cfg.seq_len, &mut self.rng)?;
        self.train_on(&batch)
    }

    /// Forward, backward and update on a given batch.
    pub fn train_on(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let step = self.opt.step;
        let mut tape = Tape::new();
        let (loss, metrics) = task_and_balance(&self.model, &mut tape, batch, self.cfg.balance_weight, &mut self.rng)?;
        if !metrics.total_loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                what: format!("task {} balance {}", metrics.task_loss, metrics.balance_loss),
            });
        }
        self.model.store.zero_grads();
        tape.backward(loss)?;
        tape.accumulate_grads(&mut self.model.store);
        self.opt.update(&self.cfg.adam(), &mut self.model.store);
        Ok(metrics)
    }
}

/// Builds `cross_entropy + λ · mean_layers(balance)` on `tape`. With
/// `λ = 0` the balance term is only measured, never put on the tape.
pub fn task_and_balance<S: Scalar, R: rand::Rng + ?Sized>(
    model: &Model<S>,
    tape: &mut Tape<S>,
    batch: &Batch,
    balance_weight: f64,
    rng: &mut R,
) -> Result<(crate::autodiff::Var, StepMetrics)> {
    model.check_tokens(&batch.inputs)?;
    let out = model.forward(tape, &batch.inputs, batch.batch, batch.len, rng)?;
    let ce = tape.cross_entropy(out.logits, &batch.targets)?;
    let task_loss = tape.value(ce)[0].to_f64_lossy();
    let layers = out.routing.len();
    let mut balance_value = 0.0;
    let mut total = ce;
    if !task_loss.is_finite() {
        balance_value = f64::NAN;
    } else if layers > 0 {
        if balance_weight > 0.0 {
            let mut acc = None;
            for r in &out.routing {
                let p = r.mean_probabilities(tape)?;
                let b = balance_loss_var(tape, &r.expert_fractions(), p, r.num_experts)?;
                acc = Some(match acc {
                    None => b,
                    Some(a) => tape.add(a, b)?,
                });
            }
            let sum = acc.expect("at least one MoE layer");
            let mean = tape.scale(sum, S::from_f64_lossy(1.0 / layers as f64));
            balance_value = tape.value(mean)[0].to_f64_lossy();
            let weighted = tape.scale(mean, S::from_f64_lossy(balance_weight));
            total = tape.add(ce, weighted)?;
        } else {
            for r in &out.routing {
                balance_value += balance_loss(&r.balance_inputs()?, r.num_experts)?;
            }
            balance_value /= layers as f64;
        }
    }
    let total_loss = tape.value(total)[0].to_f64_lossy();
    Ok((
        total,
        StepMetrics {
            task_loss,
            balance_loss: balance_value,
            total_loss,
        },
    ))
}

/// Mean cross-entropy over `n_batches` sampled windows, recorded without
/// gradients. `sink` sees each batch's routing decisions per MoE layer.
pub fn evaluate<S, R, F>(
    model: &Model<S>,
    tokens: &[u8],
    batch: usize,
    len: usize,
    n_batches: usize,
    rng: &mut R,
    mut sink: F,
) -> Result<f64>
where
    S: Scalar,
    R: rand::Rng + ?Sized,
    F: FnMut(&[Vec<RoutingDecision<S>>]) -> Result<()>,
{
    if n_batches == 0 {
        return Err(Error::Contract("evaluation needs at least one batch".into()));
    }
    let mut total = 0.0;
    for _ in 0..n_batches {
        let b = sample_batch(tokens, batch, len, rng)?;
        model.check_tokens(&b.inputs)?;
        let mut tape = Tape::no_grad();
        let out = model.forward(&mut tape, &b.inputs, b.batch, b.len, rng)?;
        let ce = tape.cross_entropy(out.logits, &b.targets)?;
        total += tape.value(ce)[0].to_f64_lossy();
        let decisions: Vec<Vec<RoutingDecision<S>>> = out.routing.into_iter().map(|r| r.decisions).collect();
        sink(&decisions)?;
    }
    Ok(total / n_batches as f64)
}

/// [`evaluate`] folding the routing decisions into usage statistics.
pub fn evaluate_usage<S: Scalar, R: rand::Rng + ?Sized>(
    model: &Model<S>,
    tokens: &[u8],
    batch: usize,
    len: usize,
    n_batches: usize,
    rng: &mut R,
) -> Result<(f64, ExpertUsageStats)> {
    let mut stats = ExpertUsageStats::new(model.cfg.num_experts, &model.moe_blocks());
    let val = evaluate(model, tokens, batch, len, n_batches, rng, |d| stats.accumulate(d))?;
    Ok((val, stats))
}
