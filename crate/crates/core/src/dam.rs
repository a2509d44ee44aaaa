//! Dependency analysis: a masked language model over `[target; source]` with
//! mix-attention, the attention density ratio it yields, and the
//! left-to-right versus right-to-left order study.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedPair, Vocabulary};
use crate::eval::{complete, score, EvalError};
use crate::model::{Model, ModelConfig, ModelError, ModelKind};
use crate::tensor::{adam_step, AdamState, Graph, Matrix, TensorError, Var};
use crate::train::{lr_schedule, make_batches, step_rng, train, TrainConfig, TrainError, TrainObserver};

#[derive(Debug, Error)]
pub enum DamError {
    #[error("attention row {row} has zero mass")]
    DegenerateRow { row: usize },
    #[error("empty test set")]
    EmptyTestSet,
    #[error("masking probability {0} is outside (0, 1)")]
    InvalidMaskProb(f64),
    #[error("attention row of width {width} cannot hold {n} target keys and a source key")]
    RowShape { width: usize, n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

pub type Result<T> = std::result::Result<T, DamError>;

/// How attention maps from several layers and heads become one map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnAgg {
    /// Average over every layer and head.
    #[default]
    Mean,
    /// Average over the heads of the last layer.
    LastLayer,
}

impl FromStr for AttnAgg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(Self::Mean),
            "last-layer" => Ok(Self::LastLayer),
            other => Err(format!("unknown attention aggregation `{other}` (expected mean or last-layer)")),
        }
    }
}

/// Target share of attention for one query row laid out as `n` target keys
/// followed by the source keys: `mean_t / (mean_t + mean_s)`.
pub fn attention_density(row: &[f64], n: usize) -> Result<f64> {
    if n == 0 || row.len() <= n {
        return Err(DamError::RowShape { width: row.len(), n });
    }
    let m = row.len() - n;
    let mean_t = row[..n].iter().sum::<f64>() / n as f64;
    let mean_s = row[n..].iter().sum::<f64>() / m as f64;
    let denom = mean_t + mean_s;
    if denom <= 0.0 {
        return Err(DamError::DegenerateRow { row: 0 });
    }
    Ok(mean_t / denom)
}

/// Collapses `[layer][head]` maps into one map.
pub fn aggregate_attention(maps: &[Vec<Matrix<f32>>], agg: AttnAgg) -> Matrix<f64> {
    let layers = match agg {
        AttnAgg::Mean => maps,
        AttnAgg::LastLayer => &maps[maps.len() - 1..],
    };
    let (r, c) = layers[0][0].shape();
    let mut out = Matrix::<f64>::zeros(r, c);
    let mut count = 0.0;
    for heads in layers {
        for h in heads {
            out.add_assign(&h.cast());
            count += 1.0;
        }
    }
    out.scale_assign(1.0 / count);
    out
}

/// Masks each of `n` positions with probability `p`; if none is drawn one
/// position is masked uniformly at random.
pub fn draw_mask<R: Rng + ?Sized>(n: usize, p: f64, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < p).collect();
    if picked.is_empty() && n > 0 {
        picked.push(rng.random_range(0..n));
    }
    picked
}

/// α at each masked position of each example, from already aggregated maps.
/// Every map has target rows first; `n` is the target length.
pub fn density_from_maps(examples: &[(&Matrix<f64>, usize, &[usize])]) -> Result<Vec<f64>> {
    let mut alphas = Vec::new();
    for &(map, n, masked) in examples {
        for &i in masked {
            let row = map.row(i);
            if row.iter().sum::<f64>() <= 0.0 {
                return Err(DamError::DegenerateRow { row: i });
            }
            alphas.push(attention_density(row, n)?);
        }
    }
    Ok(alphas)
}

fn sources(batch: &[&EncodedPair]) -> Vec<Vec<u32>> {
    batch.iter().map(|e| e.raw_context().to_vec()).collect()
}

/// Mean cross-entropy over the masked target positions.
pub fn masked_lm_loss(
    g: &mut Graph<'_, f32>,
    model: &Model,
    batch: &[&EncodedPair],
    masks: &[Vec<usize>],
) -> Result<Var> {
    let src = sources(batch);
    let src: Vec<&[u32]> = src.iter().map(Vec::as_slice).collect();
    let tgt: Vec<&[u32]> = batch.iter().map(|e| e.target_ids.as_slice()).collect();
    let ms: Vec<&[usize]> = masks.iter().map(Vec::as_slice).collect();
    let logits = model.dam_forward(g, &src, &tgt, &ms, None)?;
    let gold: Vec<usize> = batch
        .iter()
        .zip(masks)
        .flat_map(|(e, m)| m.iter().map(|&i| e.target_ids[i] as usize))
        .collect();
    let keep = vec![true; gold.len()];
    Ok(g.cross_entropy(logits, &gold, &keep)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamStep {
    pub step: u64,
    pub loss: f64,
    pub masked: usize,
    pub lr: f64,
}

impl DamStep {
    pub const CSV_HEADER: &'static str = "step,loss,masked,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{},{:.6e}", self.step, self.loss, self.masked, self.lr)
    }
}

/// Trains a fresh masked language model at masking probability `p`.
/// `on_step` sees every step's metrics.
pub fn train_dam(
    model_config: &ModelConfig,
    data: &[EncodedPair],
    p: f64,
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&DamStep),
) -> Result<Model> {
    if !(p > 0.0 && p < 1.0) {
        return Err(DamError::InvalidMaskProb(p));
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset.into());
    }
    let config = ModelConfig { kind: ModelKind::Dam, ..model_config.clone() };
    let mut model = Model::new(config, cfg.seed)?;
    let mut adam = AdamState::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut step = 0;
    for epoch in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX - epoch as u64);
        for batch in make_batches(data, cfg.batch_tokens, &mut rng) {
            step += 1;
            let refs: Vec<&EncodedPair> = batch.iter().map(|&i| &data[i]).collect();
            let mut srng = step_rng(cfg.seed, step);
            let masks: Vec<Vec<usize>> = refs.iter().map(|e| draw_mask(e.target_ids.len(), p, &mut srng)).collect();
            let lr = lr_schedule(step, cfg.warmup_steps, cfg.peak_lr);
            let (loss, grads) = {
                let mut g = Graph::training(model.params(), srng.random());
                let loss = masked_lm_loss(&mut g, &model, &refs, &masks)?;
                (g.value(loss).item() as f64, g.backward(loss).params)
            };
            adam_step(model.params_mut(), &grads, &mut adam, lr);
            on_step(&DamStep { step, loss, masked: masks.iter().map(Vec::len).sum(), lr });
            if step >= cfg.total_steps {
                return Ok(model);
            }
        }
    }
    unreachable!("the epoch loop only exits through total_steps")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityPoint {
    pub mask_prob: f64,
    /// Mean α over all masked target positions.
    pub ratio: f64,
    pub masked: usize,
    pub examples: usize,
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityReport {
    pub aggregation: AttnAgg,
    pub points: Vec<DensityPoint>,
}

/// α over the test set, with masks drawn at `p` from `seed`.
pub fn density_ratio(model: &Model, test: &[EncodedPair], p: f64, agg: AttnAgg, seed: u64) -> Result<DensityPoint> {
    if test.is_empty() {
        return Err(DamError::EmptyTestSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alphas = Vec::new();
    for e in test {
        let masked = draw_mask(e.target_ids.len(), p, &mut rng);
        let out = model.mix_attention_forward(e.raw_context(), &e.target_ids, &masked)?;
        let map = aggregate_attention(&out.attention, agg);
        alphas.extend(density_from_maps(&[(&map, e.target_ids.len(), &masked)])?);
    }
    Ok(DensityPoint {
        mask_prob: p,
        ratio: alphas.iter().sum::<f64>() / alphas.len() as f64,
        masked: alphas.len(),
        examples: test.len(),
        alphas,
    })
}

/// Trains one model per masking probability and measures its density ratio.
pub fn density_ratio_curve(
    model_config: &ModelConfig,
    train_data: &[EncodedPair],
    test: &[EncodedPair],
    probs: &[f64],
    cfg: &TrainConfig,
    agg: AttnAgg,
) -> Result<DensityReport> {
    if test.is_empty() {
        return Err(DamError::EmptyTestSet);
    }
    let mut points = Vec::with_capacity(probs.len());
    for &p in probs {
        let model = train_dam(model_config, train_data, p, cfg, &mut |s| {
            if s.step % 100 == 0 {
                log::info!("dam p={p} step {} loss {:.4}", s.step, s.loss);
            }
        })?;
        points.push(density_ratio(&model, test, p, agg, cfg.seed)?);
    }
    Ok(DensityReport { aggregation: agg, points })
}

/// Fractions of the test set in each agreement cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrderCells {
    pub only_l2r: f64,
    pub only_r2l: f64,
    pub both: f64,
    pub neither: f64,
}

pub fn order_buckets(l2r: &[bool], r2l: &[bool]) -> OrderCells {
    let n = l2r.len().min(r2l.len()).max(1) as f64;
    let mut c = [0usize; 4];
    for (&a, &b) in l2r.iter().zip(r2l) {
        c[match (a, b) {
            (true, false) => 0,
            (false, true) => 1,
            (true, true) => 2,
            (false, false) => 3,
        }] += 1;
    }
    OrderCells {
        only_l2r: c[0] as f64 / n,
        only_r2l: c[1] as f64 / n,
        both: c[2] as f64 / n,
        neither: c[3] as f64 / n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStudyReport {
    pub examples: usize,
    pub em: OrderCells,
    /// Cells for edit similarity above `es_threshold`.
    pub es: OrderCells,
    pub es_threshold: f64,
}

pub const ES_THRESHOLD: f64 = 0.5;

/// Compares two completion models example by example.
pub fn order_study(l2r: &Model, r2l: &Model, vocab: &Vocabulary, test: &[EncodedPair]) -> Result<OrderStudyReport> {
    if test.is_empty() {
        return Err(DamError::EmptyTestSet);
    }
    let mut em = (Vec::new(), Vec::new());
    let mut es = (Vec::new(), Vec::new());
    for e in test {
        for (k, model) in [l2r, r2l].into_iter().enumerate() {
            let pred = complete(model, &e.context_ids)?.tokens;
            let (exact, sim, _) = score(vocab, &pred, &e.target_ids)?;
            let (emv, esv) = if k == 0 { (&mut em.0, &mut es.0) } else { (&mut em.1, &mut es.1) };
            emv.push(exact);
            esv.push(sim > ES_THRESHOLD);
        }
    }
    Ok(OrderStudyReport {
        examples: test.len(),
        em: order_buckets(&em.0, &em.1),
        es: order_buckets(&es.0, &es.1),
        es_threshold: ES_THRESHOLD,
    })
}

/// Trains a left-to-right and a right-to-left model with identical settings
/// on their own training sets, then compares them on `test`.
pub fn train_order_pair(
    model_config: &ModelConfig,
    l2r_data: &[EncodedPair],
    r2l_data: &[EncodedPair],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<(Model, Model)> {
    let mut out = Vec::with_capacity(2);
    for (kind, data) in [(ModelKind::ArL2r, l2r_data), (ModelKind::ArR2l, r2l_data)] {
        let mut model = Model::new(ModelConfig { kind, ..model_config.clone() }, cfg.seed)?;
        train(&mut model, data, cfg, observer)?;
        out.push(model);
    }
    let r2l = out.pop().expect("two models");
    let l2r = out.pop().expect("two models");
    Ok((l2r, r2l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LENGTH, NUM_SPECIALS};
    use crate::lexer::SyntaxType;

    fn pair(ctx: &[u32], tgt: &[u32]) -> EncodedPair {
        EncodedPair {
            context_ids: std::iter::once(LENGTH).chain(ctx.iter().copied()).collect(),
            target_ids: tgt.to_vec(),
            target_types: vec![SyntaxType::Identifier; tgt.len()],
            true_length: tgt.len(),
        }
    }

    fn data() -> Vec<EncodedPair> {
        let b = NUM_SPECIALS as u32;
        (0..6u32)
            .map(|i| {
                let ctx: Vec<u32> = (0..4).map(|k| b + (i + k) % 20).collect();
                let tgt: Vec<u32> = (0..3 + i % 2).map(|k| b + (2 * i + k) % 20).collect();
                pair(&ctx, &tgt)
            })
            .collect()
    }

    fn dam_model() -> Model {
        Model::new(ModelConfig { kind: ModelKind::Dam, ..ModelConfig::tiny(24) }, 3).unwrap()
    }

    #[test]
    fn density_oracle_cases() {
        for (n, m) in [(1, 1), (2, 5), (7, 3)] {
            let row = vec![1.0 / (n + m) as f64; n + m];
            assert!((attention_density(&row, n).unwrap() - 0.5).abs() < 1e-12);
        }
        assert_eq!(attention_density(&[0.5, 0.5, 0.0, 0.0], 2).unwrap(), 1.0);
        assert!((attention_density(&[0.3, 0.3, 0.2, 0.2], 2).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(attention_density(&[0.0, 0.0, 0.0], 1), Err(DamError::DegenerateRow { .. })));
        assert!(matches!(attention_density(&[1.0, 0.0], 2), Err(DamError::RowShape { .. })));
    }

    #[test]
    fn hand_built_maps_average() {
        let a = Matrix::from_rows(&[
            &[0.3, 0.3, 0.2, 0.2],
            &[0.25, 0.25, 0.25, 0.25],
            &[0.0, 0.0, 0.5, 0.5],
            &[0.0, 0.0, 0.5, 0.5],
        ])
        .unwrap();
        let b = Matrix::from_rows(&[
            &[0.6, 0.4, 0.0],
            &[0.0, 0.0, 1.0],
            &[0.0, 0.0, 1.0],
        ])
        .unwrap();
        // α: 0.6, 0.5 from a; (0.5/(0.5+0)) = 1.0 from b row 0.
        let alphas = density_from_maps(&[(&a, 2, &[0, 1]), (&b, 2, &[0])]).unwrap();
        let r = alphas.iter().sum::<f64>() / alphas.len() as f64;
        assert!((r - (0.6 + 0.5 + 1.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_models_give_extreme_ratios() {
        let all_source = Matrix::from_rows(&[&[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]).unwrap();
        let all_target = Matrix::from_rows(&[&[0.5, 0.5, 0.0], &[1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(density_from_maps(&[(&all_source, 2, &[0, 1])]).unwrap(), &[0.0, 0.0]);
        assert_eq!(density_from_maps(&[(&all_target, 2, &[0, 1])]).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn aggregation_modes() {
        let a = Matrix::from_rows(&[&[1.0f32, 0.0]]).unwrap();
        let b = Matrix::from_rows(&[&[0.0f32, 1.0]]).unwrap();
        let maps = vec![vec![a.clone(), a.clone()], vec![b.clone(), a]];
        assert_eq!(aggregate_attention(&maps, AttnAgg::Mean).row(0), &[0.75, 0.25]);
        assert_eq!(aggregate_attention(&maps, AttnAgg::LastLayer).row(0), &[0.5, 0.5]);
        assert_eq!("last-layer".parse::<AttnAgg>().unwrap(), AttnAgg::LastLayer);
        assert!("first".parse::<AttnAgg>().is_err());
    }

    #[test]
    fn mask_count_matches_binomial_with_forced_minimum() {
        let (n, p, draws) = (20usize, 0.35, 100_000);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let total: usize = (0..draws).map(|_| draw_mask(n, p, &mut rng).len()).sum();
        let mean = total as f64 / draws as f64;
        // One forced mask whenever the binomial draw is empty.
        let expected = p * n as f64 + (1.0 - p).powi(n as i32);
        let sigma = (n as f64 * p * (1.0 - p) / draws as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * sigma, "{mean} vs {expected}");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert!(!draw_mask(3, 0.01, &mut rng).is_empty());
        }
        assert_eq!(draw_mask(4, 0.999999, &mut rng), vec![0, 1, 2, 3]);
    }

    #[test]
    fn loss_reaches_only_masked_logits() {
        let model = dam_model();
        let d = data();
        let batch: Vec<&EncodedPair> = d.iter().take(2).collect();
        let masks = vec![vec![1], vec![0, 2]];
        let mut g = Graph::new(model.params());
        let src = sources(&batch);
        let src: Vec<&[u32]> = src.iter().map(Vec::as_slice).collect();
        let tgt: Vec<&[u32]> = batch.iter().map(|e| e.target_ids.as_slice()).collect();
        let ms: Vec<&[usize]> = masks.iter().map(Vec::as_slice).collect();
        let (all, spans, rows) = model.dam_forward_all(&mut g, &src, &tgt, &ms).unwrap();
        let total_rows = spans.last().map(|s| s.0 + s.1).unwrap();
        let mut targets = vec![0usize; total_rows];
        let mut keep = vec![false; total_rows];
        for (e, m) in masks.iter().enumerate() {
            for &i in m {
                targets[spans[e].0 + i] = batch[e].target_ids[i] as usize;
                keep[spans[e].0 + i] = true;
            }
        }
        let loss = g.cross_entropy(all, &targets, &keep).unwrap();
        let grads = g.backward_retaining(loss, &[all]);
        let gl = grads.node(all).unwrap();
        for r in 0..total_rows {
            let zero = gl.row(r).iter().all(|&x| x == 0.0);
            assert_eq!(zero, !rows.contains(&r), "row {r}");
        }
        let mut g2 = Graph::new(model.params());
        let gathered = masked_lm_loss(&mut g2, &model, &batch, &masks).unwrap();
        assert!((g.value(loss).item() - g2.value(gathered).item()).abs() < 1e-6);
    }

    #[test]
    fn all_masked_prediction_ignores_target_tokens() {
        let model = dam_model();
        let a = model.mix_attention_forward(&[5, 6, 7], &[8, 9], &[0, 1]).unwrap();
        let b = model.mix_attention_forward(&[5, 6, 7], &[15, 4], &[0, 1]).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn trained_dam_density_in_unit_interval() {
        let cfg = TrainConfig { total_steps: 4, batch_tokens: 30, warmup_steps: 1, peak_lr: 1e-3, ..Default::default() };
        let d = data();
        let mut losses = Vec::new();
        let model = train_dam(&ModelConfig::tiny(24), &d, 0.5, &cfg, &mut |s| losses.push(s.loss)).unwrap();
        assert_eq!(losses.len(), 4);
        let point = density_ratio(&model, &d, 0.5, AttnAgg::Mean, 0).unwrap();
        assert!(point.alphas.iter().all(|a| (0.0..=1.0).contains(a)));
        assert!((0.0..=1.0).contains(&point.ratio));
        assert_eq!(point.masked, point.alphas.len());
        assert!(matches!(density_ratio(&model, &[], 0.5, AttnAgg::Mean, 0), Err(DamError::EmptyTestSet)));
        assert!(matches!(train_dam(&ModelConfig::tiny(24), &d, 1.0, &cfg, &mut |_| {}), Err(DamError::InvalidMaskProb(_))));
        let again = train_dam(&ModelConfig::tiny(24), &d, 0.5, &cfg, &mut |_| {}).unwrap();
        assert_eq!(again.params(), model.params());
    }

    #[test]
    fn bucketing_rules() {
        let c = order_buckets(&[true, true, false, false], &[false, true, true, false]);
        assert_eq!((c.only_l2r, c.only_r2l, c.both, c.neither), (0.25, 0.25, 0.25, 0.25));
        let c = order_buckets(&[true, false, false], &[false, false, false]);
        assert!((c.only_l2r - 1.0 / 3.0).abs() < 1e-15 && c.only_r2l == 0.0 && c.both == 0.0);
    }

    #[test]
    fn self_comparison_has_empty_only_cells() {
        let words: Vec<String> = (0..24).map(|i| format!("w{i}")).collect();
        let ex = crate::corpus::ExamplePair {
            context: words.clone(),
            target: words.clone(),
            target_types: vec![SyntaxType::Identifier; 24],
        };
        let vocab = crate::corpus::build_vocabulary([&ex], 100).unwrap();
        let model = Model::new(ModelConfig { kind: ModelKind::ArL2r, ..ModelConfig::tiny(24) }, 2).unwrap();
        let test = data();
        let hit = complete(&model, &test[0].context_ids).unwrap().tokens;
        let mut test = test;
        test[0].target_ids = hit;
        let r = order_study(&model, &model, &vocab, &test).unwrap();
        for cells in [r.em, r.es] {
            assert_eq!(cells.only_l2r, 0.0);
            assert_eq!(cells.only_r2l, 0.0);
            assert!((cells.both + cells.neither - 1.0).abs() < 1e-12);
        }
        assert!(r.em.both >= 1.0 / test.len() as f64);
    }
}
