//! Minibatch training over aggregated user records.
//!
//! Each sample runs its own forward/backward pass (no padding across
//! samples). Per-sample gradients are computed in parallel and reduced in
//! sample order, so a run is reproducible for a fixed seed regardless of how
//! work is scheduled.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::UserSample;
use crate::engine::{AdamConfig, Gradients, Real};
use crate::error::{Error, Result};
use crate::heads::{EvalReport, PredictionRecord};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// User records per step.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    /// Evaluate on the held-out split every this many steps (`0`: once per epoch).
    pub eval_every: usize,
    /// Fraction of users held out for evaluation.
    pub eval_fraction: f64,
    /// Batch-order seed; set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            eval_every: 0,
            eval_fraction: 0.1,
            seed: 7,
        }
    }
}

impl TrainConfig {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail these checks
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("lr must be >= 0 and betas in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::Config("eval_fraction must be in [0, 1)".into()));
        }
        if !(self.clip_norm >= 0.0) || !(self.eps > 0.0) {
            return Err(Error::Config("clip_norm must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean BCE over the batch's `(exposure, task)` pairs before the update.
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalPoint>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over `window` steps starting at `from`.
    pub fn smoothed(&self, from: usize, window: usize) -> f64 {
        let xs = &self.steps[from.min(self.steps.len())..(from + window).min(self.steps.len())];
        xs.iter().map(|s| s.loss).sum::<f64>() / xs.len().max(1) as f64
    }
}

const SPLIT_SALT: u64 = 0x5eed_0001;

/// Deterministic user-level split into `(train, eval)`.
pub fn split_users(samples: &[UserSample], eval_fraction: f64, seed: u64) -> (Vec<UserSample>, Vec<UserSample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_eval = ((samples.len() as f64) * eval_fraction).round() as usize;
    let (eval, train) = idx.split_at(n_eval);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ix.into_iter().map(|i| samples[i].clone()).collect::<Vec<_>>()
    };
    (pick(train), pick(eval))
}

/// Gradient of the mean BCE over every pair in `batch`, with the loss value.
pub fn batch_gradients<T: Real>(model: &Model<T>, batch: &[&UserSample]) -> Result<(f64, Gradients<T>)> {
    let pairs: usize = batch.iter().map(|s| model.pair_count(s)).sum();
    if pairs == 0 {
        return Err(Error::NotComputable("batch has no labeled pairs".into()));
    }
    let weight = 1.0 / pairs as f64;
    let parts: Vec<(f64, Gradients<T>)> = batch
        .par_iter()
        .filter(|s| !s.exposures.is_empty())
        .map(|s| model.loss_and_grads(s, weight))
        .collect::<Result<_>>()?;
    let mut total = Gradients::zeros_like(&model.store);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss, total))
}

pub fn predict_all<T: Real>(model: &Model<T>, samples: &[UserSample]) -> Result<Vec<PredictionRecord>> {
    let per: Vec<Vec<PredictionRecord>> = samples.par_iter().map(|s| model.predict(s)).collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn evaluate<T: Real>(model: &Model<T>, samples: &[UserSample]) -> Result<EvalReport> {
    Ok(EvalReport::from_records(&model.schema, &predict_all(model, samples)?))
}

/// Trains `model` in place on `train`, evaluating on `eval` when nonempty.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train: &[UserSample],
    eval: &[UserSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<History> {
    cfg.validate()?;
    let usable: Vec<&UserSample> = train.iter().filter(|s| !s.exposures.is_empty()).collect();
    if usable.is_empty() {
        return Err(Error::Config("training set has no exposures".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let eval_every = if cfg.eval_every == 0 { batches_per_epoch } else { cfg.eval_every };
    let adam = cfg.adam();
    let mut history = History::default();
    for step in 0..cfg.steps {
        if cursor >= order.len() {
            order = (0..usable.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(order.len());
        let batch: Vec<&UserSample> = order[cursor..end].iter().map(|&i| usable[i]).collect();
        cursor = end;

        let (loss, mut grads) = batch_gradients(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let grad_norm = grads.global_norm();
        if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
            grads.scale(T::of(cfg.clip_norm / grad_norm));
        }
        model.store.set_grads(grads)?;
        match model.store.adam_step(&adam) {
            Err(Error::NonFiniteGradient(name)) => {
                log::error!("non-finite gradient in `{name}` at step {step}");
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            r => r?,
        }
        let rec = StepRecord { step, loss, grad_norm };
        on_step(&rec);
        history.steps.push(rec);
        if !eval.is_empty() && ((step + 1) % eval_every == 0 || step + 1 == cfg.steps) {
            let report = evaluate(model, eval)?;
            log::info!("step {} eval loss {:?}", step + 1, report.loss);
            history.evals.push(EvalPoint { step: step + 1, report });
        }
    }
    Ok(history)
}
