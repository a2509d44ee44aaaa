//! Two-pass glancing training for the parallel decoder, teacher-forced
//! training for the autoregressive baselines, and the shared training loop.

mod glance;

pub use glance::{glance_budget, glancing_sample, hamming_distance, GlanceSet, SampleMode};

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EncodedPair;
use crate::model::{BatchEncoding, BatchLogits, Model, ModelError, ModelKind};
use crate::tensor::{adam_step, AdamState, Graph, ParamGrads, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("gold length {gold} differs from predicted length {predicted}")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("target length {len} exceeds max_len_class {max}")]
    TargetTooLong { len: usize, max: usize },
    #[error("no training data")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub p: f64,
    pub batch_tokens: usize,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub length_weight: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Stop once training-set exact match reaches this value.
    pub early_stop_em: Option<f64>,
    /// Epochs between exact-match checks when `early_stop_em` is set.
    pub eval_every_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            p: 0.3,
            batch_tokens: 4096,
            warmup_steps: 4000,
            peak_lr: 5e-5,
            total_steps: 20_000,
            seed: 0,
            length_weight: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 1000,
            early_stop_em: None,
            eval_every_epochs: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda >= 0.0) {
            return Err("lambda must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err("p must lie in [0, 1]".into());
        }
        if self.batch_tokens == 0 || self.total_steps == 0 {
            return Err("batch_tokens and total_steps must be positive".into());
        }
        if !(self.peak_lr > 0.0) {
            return Err("peak_lr must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup to `peak`, then inverse square-root decay.
pub fn lr_schedule(step: u64, warmup: u64, peak: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    if step <= warmup {
        peak * step / warmup
    } else {
        peak * (warmup / step).sqrt()
    }
}

/// Loss nodes of one batch.
pub struct SasLoss {
    pub total: Var,
    pub token: Option<Var>,
    pub length: Option<Var>,
}

/// Mean cross-entropy over non-glanced target positions of the batch plus
/// `length_weight` times the mean length cross-entropy. When every position
/// is glanced the token term is absent.
pub fn sas_loss(
    g: &mut Graph<'_, f32>,
    out: &BatchLogits,
    targets: &[&[u32]],
    glances: &[GlanceSet],
    length_logits: Option<Var>,
    length_weight: f64,
) -> Result<SasLoss> {
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for (t, gs) in targets.iter().zip(glances) {
        for (pos, &tok) in t.iter().enumerate() {
            ids.push(tok as usize);
            mask.push(!gs.contains(pos));
        }
    }
    let token = if mask.iter().any(|&m| m) {
        Some(g.cross_entropy(out.logits, &ids, &mask)?)
    } else {
        None
    };
    let length = match length_logits {
        Some(l) => {
            let classes: Vec<usize> = targets.iter().map(|t| t.len() - 1).collect();
            let ce = g.cross_entropy(l, &classes, &vec![true; targets.len()])?;
            Some(g.scale(ce, length_weight as f32))
        }
        None => None,
    };
    let total = match (token, length) {
        (Some(a), Some(b)) => g.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => g.leaf(crate::tensor::Matrix::scalar(0.0)),
    };
    Ok(SasLoss { total, token, length })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub token_loss: f64,
    pub length_loss: f64,
    pub glance_fraction: f64,
    pub lr: f64,
    pub glanced: usize,
    pub target_tokens: usize,
    pub first_pass_correct: usize,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "step,loss,token_loss,length_loss,glance_fraction,lr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6e}",
            self.step, self.loss, self.token_loss, self.length_loss, self.glance_fraction, self.lr
        )
    }
}

fn contexts<'a>(batch: &[&'a EncodedPair]) -> Vec<&'a [u32]> {
    batch.iter().map(|e| e.context_ids.as_slice()).collect()
}

fn split_argmax(g: &Graph<'_, f32>, out: &BatchLogits) -> Vec<Vec<u32>> {
    let logits = g.value(out.logits);
    let best = logits.argmax_rows();
    out.spans.iter().map(|&(o, n)| best[o..o + n].iter().map(|&i| i as u32).collect()).collect()
}

/// Pass 1: parallel decode at gold length, no glances, evaluation mode,
/// nothing recorded for backward.
pub fn first_pass(model: &Model, batch: &[&EncodedPair]) -> Result<Vec<Vec<u32>>> {
    let mut g = Graph::new(model.params());
    let enc = model.encode_batch(&mut g, &contexts(batch))?;
    let lengths: Vec<usize> = batch.iter().map(|e| e.target_ids.len()).collect();
    let none: Vec<&[(usize, u32)]> = vec![&[]; batch.len()];
    let out = model.nar_decode_batch(&mut g, &enc, &lengths, &none)?;
    Ok(split_argmax(&g, &out))
}

pub struct SecondPass {
    pub loss: f64,
    pub token_loss: f64,
    pub length_loss: f64,
    pub grads: ParamGrads<f32>,
}

/// Pass 2: glanced decode in training mode, loss and gradients.
pub fn second_pass(
    model: &Model,
    batch: &[&EncodedPair],
    glances: &[GlanceSet],
    length_weight: f64,
    dropout_seed: u64,
) -> Result<SecondPass> {
    let mut g = Graph::training(model.params(), dropout_seed);
    let enc: BatchEncoding = model.encode_batch(&mut g, &contexts(batch))?;
    let lengths: Vec<usize> = batch.iter().map(|e| e.target_ids.len()).collect();
    let revealed: Vec<Vec<(usize, u32)>> = batch
        .iter()
        .zip(glances)
        .map(|(e, gs)| gs.positions.iter().map(|&p| (p, e.target_ids[p])).collect())
        .collect();
    let refs: Vec<&[(usize, u32)]> = revealed.iter().map(Vec::as_slice).collect();
    let out = model.nar_decode_batch(&mut g, &enc, &lengths, &refs)?;
    let targets: Vec<&[u32]> = batch.iter().map(|e| e.target_ids.as_slice()).collect();
    let loss = sas_loss(&mut g, &out, &targets, glances, enc.length_logits, length_weight)?;
    let read = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item() as f64);
    Ok(SecondPass {
        loss: g.value(loss.total).item() as f64,
        token_loss: read(loss.token),
        length_loss: read(loss.length),
        grads: g.backward(loss.total).params,
    })
}

/// Target in decoding order with the EOS terminator.
pub fn ar_target(kind: ModelKind, pair: &EncodedPair) -> Vec<u32> {
    let mut t = pair.with_eos();
    if kind == ModelKind::ArR2l {
        let n = t.len() - 1;
        t[..n].reverse();
    }
    t
}

fn ar_pass(model: &Model, batch: &[&EncodedPair], dropout_seed: u64) -> Result<SecondPass> {
    let mut g = Graph::training(model.params(), dropout_seed);
    let enc = model.encode_batch(&mut g, &contexts(batch))?;
    let targets: Vec<Vec<u32>> = batch.iter().map(|e| ar_target(model.kind(), e)).collect();
    let refs: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    let out = model.ar_decode_batch(&mut g, &enc, &refs)?;
    let ids: Vec<usize> = targets.iter().flatten().map(|&t| t as usize).collect();
    let loss = g.cross_entropy(out.logits, &ids, &vec![true; ids.len()])?;
    let value = g.value(loss).item() as f64;
    Ok(SecondPass { loss: value, token_loss: value, length_loss: 0.0, grads: g.backward(loss).params })
}

/// Per-step generator: the run seed with the step number as stream.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// One optimisation step on `batch`.
pub fn train_step(
    model: &mut Model,
    batch: &[&EncodedPair],
    adam: &mut AdamState<f32>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepMetrics> {
    let mut rng = step_rng(cfg.seed, step);
    let lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr);
    let target_tokens: usize = batch.iter().map(|e| e.target_ids.len()).sum();
    let (pass, glanced, correct) = if model.kind().is_ar() {
        (ar_pass(model, batch, rng.random())?, 0, 0)
    } else {
        for e in batch {
            let len = e.target_ids.len();
            if len > model.config().max_len_class {
                return Err(TrainError::TargetTooLong { len, max: model.config().max_len_class });
            }
        }
        let y_hat = first_pass(model, batch)?;
        let mut glances = Vec::with_capacity(batch.len());
        let mut correct = 0;
        for (e, yh) in batch.iter().zip(&y_hat) {
            correct += e.target_ids.len() - hamming_distance(&e.target_ids, yh)?;
            glances.push(glancing_sample(&e.target_ids, yh, &e.target_types, cfg.lambda, cfg.p, &mut rng)?);
        }
        let glanced = glances.iter().map(GlanceSet::len).sum();
        (second_pass(model, batch, &glances, cfg.length_weight, rng.random())?, glanced, correct)
    };
    adam_step(model.params_mut(), &pass.grads, adam, lr);
    Ok(StepMetrics {
        step,
        loss: pass.loss,
        token_loss: pass.token_loss,
        length_loss: pass.length_loss,
        glance_fraction: glanced as f64 / target_tokens.max(1) as f64,
        lr,
        glanced,
        target_tokens,
        first_pass_correct: correct,
    })
}

/// Token-count batches: shuffle, sort by length, cut at `batch_tokens`,
/// then shuffle the batch order.
pub fn make_batches<R: Rng + ?Sized>(data: &[EncodedPair], batch_tokens: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let size = |i: usize| data[i].context_ids.len() + data[i].target_ids.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| size(i));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for i in order {
        if !cur.is_empty() && tokens + size(i) > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            tokens = 0;
        }
        tokens += size(i);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub last_step: u64,
    pub mean_loss: f64,
    /// Sum of glance counts over sum of target lengths.
    pub glance_fraction: f64,
    /// Token accuracy of the first pass at gold length.
    pub first_pass_accuracy: f64,
}

/// Callbacks from [`train`]. Returning `Break` stops training.
pub trait TrainObserver {
    fn on_step(&mut self, _model: &Model, _metrics: &StepMetrics) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }

    fn on_epoch(&mut self, _model: &Model, _stats: &EpochStats) -> ControlFlow<()> {
        ControlFlow::Continue(())
    }
}

impl TrainObserver for () {}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
}

/// Runs until `total_steps` or until the observer stops it.
pub fn train(
    model: &mut Model,
    data: &[EncodedPair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut adam = AdamState::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut step = 0;
    let mut epochs = Vec::new();
    for epoch in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - epoch as u64);
        let (mut loss, mut glanced, mut tokens, mut correct, mut n) = (0.0, 0, 0, 0, 0);
        let mut stop = false;
        for batch in make_batches(data, cfg.batch_tokens, &mut rng) {
            step += 1;
            let refs: Vec<&EncodedPair> = batch.iter().map(|&i| &data[i]).collect();
            let m = train_step(model, &refs, &mut adam, cfg, step)?;
            loss += m.loss;
            glanced += m.glanced;
            tokens += m.target_tokens;
            correct += m.first_pass_correct;
            n += 1;
            if observer.on_step(model, &m).is_break() || step >= cfg.total_steps {
                stop = true;
                break;
            }
        }
        let stats = EpochStats {
            epoch,
            last_step: step,
            mean_loss: loss / n.max(1) as f64,
            glance_fraction: glanced as f64 / tokens.max(1) as f64,
            first_pass_accuracy: correct as f64 / tokens.max(1) as f64,
        };
        log::info!(
            "epoch {epoch} step {step} loss {:.4} glance {:.4} first-pass acc {:.4}",
            stats.mean_loss,
            stats.glance_fraction,
            stats.first_pass_accuracy
        );
        let flow = observer.on_epoch(model, &stats);
        epochs.push(stats);
        if stop || flow.is_break() {
            break;
        }
    }
    Ok(TrainSummary { steps: step, epochs })
}

#[cfg(test)]
mod tests;
