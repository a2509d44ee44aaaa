//! Line completion, evaluation metrics and the single-example latency bench.

mod metrics;

pub use metrics::{
    bleu, corpus_bleu, edit_similarity, exact_match, levenshtein, repetition_ratio, RepeatDef,
};

use std::ops::ControlFlow;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedPair, Vocabulary, EOS};
use crate::model::{soft_copy, Model, ModelError, ModelKind};
use crate::tensor::argmax;
use crate::train::{EpochStats, TrainObserver};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("edit similarity of two empty strings is undefined")]
    BothEmpty,
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub predicted_length: usize,
    pub tokens: Vec<u32>,
    pub latency_ns: u64,
    /// Decoder forward passes spent on this call.
    pub decoder_passes: usize,
}

fn elapsed_ns(start: Instant) -> u64 {
    (start.elapsed().as_nanos() as u64).max(1)
}

/// One encoder pass, length prediction, soft-copy and a single parallel
/// decoder pass; per-position argmax.
pub fn complete_line(model: &Model, context: &[u32]) -> Result<DecodeResult, ModelError> {
    let start = Instant::now();
    let before = model.decoder_passes();
    let enc = model.encode(context)?;
    let n = model.predict_length(&enc);
    let h = soft_copy(&enc.states, n, model.config().softcopy_tau);
    let logits = model.decode_parallel(&h, &enc.states, &[])?;
    let tokens = logits.argmax_rows().into_iter().map(|t| t as u32).collect();
    Ok(DecodeResult {
        predicted_length: n,
        tokens,
        latency_ns: elapsed_ns(start),
        decoder_passes: model.decoder_passes() - before,
    })
}

/// Greedy decoding until EOS or `max_len_class` tokens. EOS is never taken
/// at the first step, so at least one token is produced. Right-to-left
/// output is returned in left-to-right order.
pub fn complete_line_ar(model: &Model, context: &[u32]) -> Result<DecodeResult, ModelError> {
    let start = Instant::now();
    let before = model.decoder_passes();
    let enc = model.encode(context)?;
    let memory = model.ar_memory(&enc.states)?;
    let mut tokens = Vec::new();
    while tokens.len() < model.config().max_len_class {
        let mut logits = model.decode_ar_step(&tokens, &memory)?;
        if tokens.is_empty() {
            logits[EOS as usize] = f32::NEG_INFINITY;
        }
        let next = argmax(&logits) as u32;
        if next == EOS {
            break;
        }
        tokens.push(next);
    }
    if model.kind() == ModelKind::ArR2l {
        tokens.reverse();
    }
    Ok(DecodeResult {
        predicted_length: tokens.len(),
        tokens,
        latency_ns: elapsed_ns(start),
        decoder_passes: model.decoder_passes() - before,
    })
}

/// Dispatches on the model kind.
pub fn complete(model: &Model, context: &[u32]) -> Result<DecodeResult, ModelError> {
    match model.kind() {
        ModelKind::Nar => complete_line(model, context),
        ModelKind::ArL2r | ModelKind::ArR2l => complete_line_ar(model, context),
        kind => Err(ModelError::WrongKind { needed: "completion", actual: kind }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleOutcome {
    pub prediction: Vec<u32>,
    pub exact: bool,
    pub edit_similarity: f64,
    pub bleu: f64,
    pub latency_ns: u64,
    pub target_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub examples: usize,
    pub em: f64,
    pub bleu: f64,
    pub es: f64,
    pub repetition_ratio: f64,
    pub mean_latency_ns: f64,
    pub speedup_vs_ar: Option<f64>,
}

/// Scores one prediction against its gold line.
pub fn score(vocab: &Vocabulary, pred: &[u32], gold: &[u32]) -> Result<(bool, f64, f64), EvalError> {
    let es = edit_similarity(&vocab.detokenize(pred), &vocab.detokenize(gold))?;
    Ok((exact_match(pred, gold), es, bleu(pred, gold)))
}

/// Completes every example and aggregates the metrics.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    data: &[EncodedPair],
    repeat: RepeatDef,
) -> Result<(EvalReport, Vec<ExampleOutcome>), EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut outcomes = Vec::with_capacity(data.len());
    for e in data {
        let r = complete(model, &e.context_ids)?;
        let (exact, es, b) = score(vocab, &r.tokens, &e.target_ids)?;
        outcomes.push(ExampleOutcome {
            prediction: r.tokens,
            exact,
            edit_similarity: es,
            bleu: b,
            latency_ns: r.latency_ns,
            target_len: e.target_ids.len(),
        });
    }
    Ok((summarize(&outcomes, repeat), outcomes))
}

pub fn summarize(outcomes: &[ExampleOutcome], repeat: RepeatDef) -> EvalReport {
    let n = outcomes.len().max(1) as f64;
    let preds: Vec<Vec<u32>> = outcomes.iter().map(|o| o.prediction.clone()).collect();
    EvalReport {
        examples: outcomes.len(),
        em: outcomes.iter().filter(|o| o.exact).count() as f64 / n,
        bleu: outcomes.iter().map(|o| o.bleu).sum::<f64>() / n,
        es: outcomes.iter().map(|o| o.edit_similarity).sum::<f64>() / n,
        repetition_ratio: repetition_ratio(&preds, repeat),
        mean_latency_ns: outcomes.iter().map(|o| o.latency_ns as f64).sum::<f64>() / n,
        speedup_vs_ar: None,
    }
}

/// Exact-match rate without the other metrics.
pub fn exact_match_rate(model: &Model, data: &[EncodedPair]) -> Result<f64, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut hits = 0;
    for e in data {
        hits += usize::from(complete(model, &e.context_ids)?.tokens == e.target_ids);
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Stops training once exact match on `data` reaches `em_threshold` and the
/// epoch glance fraction is at most `max_glance_fraction`. Exact match is
/// measured every `every_epochs` epochs.
pub struct Convergence<'a> {
    pub data: &'a [EncodedPair],
    pub em_threshold: f64,
    pub max_glance_fraction: f64,
    pub every_epochs: usize,
    /// `(epoch, step, em)` for every check made.
    pub checks: Vec<(usize, u64, f64)>,
    pub converged: Option<EpochStats>,
}

impl<'a> Convergence<'a> {
    pub fn new(data: &'a [EncodedPair], em_threshold: f64, max_glance_fraction: f64, every_epochs: usize) -> Self {
        Self { data, em_threshold, max_glance_fraction, every_epochs: every_epochs.max(1), checks: Vec::new(), converged: None }
    }

    pub fn last_em(&self) -> Option<f64> {
        self.checks.last().map(|c| c.2)
    }
}

impl TrainObserver for Convergence<'_> {
    fn on_epoch(&mut self, model: &Model, stats: &EpochStats) -> ControlFlow<()> {
        if (stats.epoch + 1) % self.every_epochs != 0 {
            return ControlFlow::Continue(());
        }
        let em = match exact_match_rate(model, self.data) {
            Ok(em) => em,
            Err(e) => {
                log::warn!("exact-match check failed: {e}");
                return ControlFlow::Continue(());
            }
        };
        log::info!("epoch {} step {} train exact match {em:.4}", stats.epoch, stats.last_step);
        self.checks.push((stats.epoch, stats.last_step, em));
        if em >= self.em_threshold && stats.glance_fraction <= self.max_glance_fraction {
            self.converged = Some(stats.clone());
            return ControlFlow::Break(());
        }
        ControlFlow::Continue(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub target_len: usize,
    pub predicted_len: usize,
    pub latency_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub mode: ModelKind,
    pub min_target_len: usize,
    pub mean_latency_ns: f64,
    pub records: Vec<LatencyRecord>,
}

impl LatencyReport {
    /// Mean latency over records whose gold length lies in `lo..=hi`.
    pub fn bucket_mean(&self, lo: usize, hi: usize) -> Option<f64> {
        let xs: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (lo..=hi).contains(&r.target_len))
            .map(|r| r.latency_ns as f64)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn filtered(&self, min_target_len: usize) -> Option<LatencyReport> {
        let records: Vec<LatencyRecord> =
            self.records.iter().filter(|r| r.target_len >= min_target_len).cloned().collect();
        if records.is_empty() {
            return None;
        }
        let mean = records.iter().map(|r| r.latency_ns as f64).sum::<f64>() / records.len() as f64;
        Some(LatencyReport { mode: self.mode, min_target_len, mean_latency_ns: mean, records })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("target_len,predicted_len,latency_ns\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{}\n", r.target_len, r.predicted_len, r.latency_ns));
        }
        s
    }
}

/// Unbatched per-example decode timing after `warmup` untimed decodes.
/// Examples shorter than `min_target_len` are skipped.
pub fn latency_bench(
    model: &Model,
    data: &[EncodedPair],
    min_target_len: usize,
    warmup: usize,
) -> Result<LatencyReport, EvalError> {
    let selected: Vec<&EncodedPair> = data.iter().filter(|e| e.target_ids.len() >= min_target_len).collect();
    if selected.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for e in selected.iter().cycle().take(warmup) {
        complete(model, &e.context_ids)?;
    }
    let mut records = Vec::with_capacity(selected.len());
    for e in &selected {
        let r = complete(model, &e.context_ids)?;
        records.push(LatencyRecord {
            target_len: e.target_ids.len(),
            predicted_len: r.predicted_length,
            latency_ns: r.latency_ns,
        });
    }
    let mean = records.iter().map(|r| r.latency_ns as f64).sum::<f64>() / records.len() as f64;
    Ok(LatencyReport { mode: model.kind(), min_target_len, mean_latency_ns: mean, records })
}

/// `mean(baseline) / mean(candidate)`.
pub fn speedup(baseline: &LatencyReport, candidate: &LatencyReport) -> f64 {
    baseline.mean_latency_ns / candidate.mean_latency_ns
}
