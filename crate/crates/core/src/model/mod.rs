//! Transformer encoder with a length head, soft-copy decoder inputs, and the
//! parallel, autoregressive and mix-attention decoders built on [`Graph`].

mod checkpoint;

pub use checkpoint::CheckpointError;

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EOS, NUM_SPECIALS};
use crate::tensor::{argmax, AttnMask, Float, Graph, Matrix, ParamId, ParamStore, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Length head plus single-pass parallel decoder.
    #[default]
    Nar,
    /// Causal decoder, left to right.
    ArL2r,
    /// Causal decoder trained and decoded on reversed targets.
    ArR2l,
    /// Single mix-attention stack over `[target; source]`.
    Dam,
}

impl ModelKind {
    pub fn is_ar(self) -> bool {
        matches!(self, ModelKind::ArL2r | ModelKind::ArR2l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub model_width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub dropout: f64,
    pub max_len_class: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub positional: String,
    pub softcopy_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Nar,
            layers: 4,
            model_width: 256,
            heads: 4,
            ffn_width: 1024,
            dropout: 0.1,
            max_len_class: 64,
            vocab_size: 8000,
            max_positions: 256,
            positional: "sinusoidal".to_string(),
            softcopy_tau: 0.3,
        }
    }
}

impl ModelConfig {
    /// The tiny configuration used for gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            model_width: 16,
            heads: 2,
            ffn_width: 32,
            max_len_class: 8,
            vocab_size,
            max_positions: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.heads == 0 || self.model_width == 0 || self.model_width % self.heads != 0 {
            return err("model_width must be a positive multiple of heads");
        }
        if self.layers == 0 || self.ffn_width == 0 {
            return err("layers and ffn_width must be positive");
        }
        if self.max_len_class < 1 {
            return err("max_len_class must be at least 1");
        }
        if self.vocab_size <= NUM_SPECIALS {
            return err("vocab_size must exceed the special tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err("dropout must lie in [0, 1)");
        }
        if !(self.softcopy_tau > 0.0) {
            return err("softcopy_tau must be positive");
        }
        if self.positional != "sinusoidal" {
            return err("positional must be \"sinusoidal\"");
        }
        if self.max_positions == 0 {
            return err("max_positions must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} positions exceeds the positional range of {max}")]
    ContextTooLong { len: usize, max: usize },
    #[error("glance position {position} outside target of length {length}")]
    GlancePositionOutOfRange { position: usize, length: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("operation needs a {needed:?} model, this one is {actual:?}")]
    WrongKind { needed: &'static str, actual: ModelKind },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln1: Norm,
    qkv: Linear,
    out: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln1: Norm,
    qkv: Linear,
    self_out: Linear,
    ln2: Norm,
    q: Linear,
    kv: Linear,
    cross_out: Linear,
    ln3: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: ParamId,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    length: Option<Linear>,
    dec: Vec<DecLayer>,
    dec_ln: Option<Norm>,
    mask: Option<ParamId>,
    segment: Option<ParamId>,
}

struct Builder<'a, F: Float> {
    store: ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Float> Builder<'_, F> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, parts: usize) -> Linear {
        // Fused projections are initialised block by block.
        let width = fan_out / parts;
        let mut w = Matrix::zeros(fan_in, fan_out);
        for p in 0..parts {
            let block = Matrix::<F>::xavier_uniform(fan_in, width, self.rng);
            for r in 0..fan_in {
                w.row_mut(r)[p * width..(p + 1) * width].copy_from_slice(block.row(r));
            }
        }
        Linear {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            g: self.store.add(format!("{name}.g"), Matrix::filled(1, d, F::one())),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, d)),
        }
    }

    fn embedding(&mut self, name: &str, rows: usize, d: usize) -> ParamId {
        let m = Matrix::normal(rows, d, (d as f64).powf(-0.5), self.rng);
        self.store.add(name, m)
    }
}

fn build<F: Float>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore<F>, Layout) {
    let d = config.model_width;
    let f = config.ffn_width;
    let mut b = Builder { store: ParamStore::new(), rng };
    let embed = b.embedding("embed", config.vocab_size, d);
    let enc = (0..config.layers)
        .map(|l| EncLayer {
            ln1: b.norm(&format!("enc.{l}.ln1"), d),
            qkv: b.linear(&format!("enc.{l}.qkv"), d, 3 * d, 3),
            out: b.linear(&format!("enc.{l}.out"), d, d, 1),
            ln2: b.norm(&format!("enc.{l}.ln2"), d),
            ff1: b.linear(&format!("enc.{l}.ff1"), d, f, 1),
            ff2: b.linear(&format!("enc.{l}.ff2"), f, d, 1),
        })
        .collect();
    let enc_ln = b.norm("enc.ln", d);
    let mut layout = Layout {
        embed,
        enc,
        enc_ln,
        length: None,
        dec: Vec::new(),
        dec_ln: None,
        mask: None,
        segment: None,
    };
    if config.kind == ModelKind::Dam {
        layout.mask = Some(b.embedding("mask", 1, d));
        layout.segment = Some(b.embedding("segment", 2, d));
        return (b.store, layout);
    }
    if config.kind == ModelKind::Nar {
        layout.length = Some(b.linear("length", d, config.max_len_class, 1));
    }
    layout.dec = (0..config.layers)
        .map(|l| DecLayer {
            ln1: b.norm(&format!("dec.{l}.ln1"), d),
            qkv: b.linear(&format!("dec.{l}.qkv"), d, 3 * d, 3),
            self_out: b.linear(&format!("dec.{l}.self_out"), d, d, 1),
            ln2: b.norm(&format!("dec.{l}.ln2"), d),
            q: b.linear(&format!("dec.{l}.q"), d, d, 1),
            kv: b.linear(&format!("dec.{l}.kv"), d, 2 * d, 2),
            cross_out: b.linear(&format!("dec.{l}.cross_out"), d, d, 1),
            ln3: b.norm(&format!("dec.{l}.ln3"), d),
            ff1: b.linear(&format!("dec.{l}.ff1"), d, f, 1),
            ff2: b.linear(&format!("dec.{l}.ff2"), f, d, 1),
        })
        .collect();
    layout.dec_ln = Some(b.norm("dec.ln", d));
    (b.store, layout)
}

/// `pe[pos][2i] = sin(pos / 10000^(2i/d))`, `pe[pos][2i+1] = cos(...)`.
pub fn sinusoidal_table<F: Float>(positions: usize, d: usize) -> Matrix<F> {
    let mut pe = Matrix::zeros(positions, d);
    for pos in 0..positions {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe.set(pos, i, F::from_f64(angle.sin()));
            if i + 1 < d {
                pe.set(pos, i + 1, F::from_f64(angle.cos()));
            }
        }
    }
    pe
}

/// Soft-copy weights `w[j][i] = softmax_i(-|j - i| / tau)`, shape `n x m`.
pub fn soft_copy_weights<F: Float>(n: usize, m: usize, tau: f64) -> Matrix<F> {
    let mut w = Matrix::zeros(n, m);
    for j in 0..n {
        let logits: Vec<f64> = (0..m).map(|i| -(j as f64 - i as f64).abs() / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for (i, l) in logits.iter().enumerate() {
            w.set(j, i, F::from_f64((l - max).exp() / sum));
        }
    }
    w
}

/// Decoder inputs `H = W S` for a target of length `n`.
pub fn soft_copy<F: Float>(states: &Matrix<F>, n: usize, tau: f64) -> Matrix<F> {
    soft_copy_weights::<F>(n, states.rows(), tau)
        .matmul(states)
        .expect("soft-copy weights match the state count")
}

/// Encoder states and length scores for one context.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub states: Matrix<F>,
    pub length_logits: Vec<F>,
}

/// Cross-attention keys and values per decoder layer, computed once per decode.
#[derive(Debug, Clone)]
pub struct ArMemory<F> {
    kv: Vec<Matrix<F>>,
}

/// Batched graph output of the encoder.
pub struct BatchEncoding {
    pub states: Var,
    pub spans: Vec<(usize, usize)>,
    pub length_logits: Option<Var>,
}

/// Batched decoder logits; rows of example `e` are `spans[e]`.
pub struct BatchLogits {
    pub logits: Var,
    pub spans: Vec<(usize, usize)>,
}

pub struct MixOutput<F> {
    /// One row per masked position, in the order given.
    pub logits: Matrix<F>,
    /// `[layer][head]`, each `(N + M) x (N + M)` with target rows first.
    pub attention: Vec<Vec<Matrix<F>>>,
}

pub struct Model<F: Float = f32> {
    config: ModelConfig,
    params: ParamStore<F>,
    layout: Layout,
    pe: Matrix<F>,
    decoder_passes: AtomicUsize,
}

impl<F: Float> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            pe: self.pe.clone(),
            decoder_passes: AtomicUsize::new(self.decoder_passes()),
        }
    }
}

fn spans_of(lens: impl IntoIterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut off = 0;
    lens.into_iter()
        .map(|n| {
            let s = (off, n);
            off += n;
            s
        })
        .collect()
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = build(&config, &mut rng);
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore<F>, layout: Layout) -> Self {
        let pe = sinusoidal_table(config.max_positions, config.model_width);
        Self { config, params, layout, pe, decoder_passes: AtomicUsize::new(0) }
    }

    /// Rebuild a model around existing parameter values; names and shapes
    /// must match the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (fresh, layout) = build::<F>(&config, &mut rng);
        if fresh.names() != params.names() {
            return Err(ModelError::InvalidConfig("parameter names do not match config".into()));
        }
        for (a, b) in fresh.values().iter().zip(params.values()) {
            if a.shape() != b.shape() {
                return Err(ModelError::InvalidConfig("parameter shapes do not match config".into()));
            }
        }
        Ok(Self::assemble(config, params, layout))
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model::assemble(self.config.clone(), self.params.cast(), self.layout.clone())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    /// Number of decoder forward passes run so far.
    pub fn decoder_passes(&self) -> usize {
        self.decoder_passes.load(Ordering::Relaxed)
    }

    fn count_pass(&self) {
        self.decoder_passes.fetch_add(1, Ordering::Relaxed);
    }

    fn require(&self, ok: bool, needed: &'static str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(ModelError::WrongKind { needed, actual: self.config.kind })
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > self.config.max_positions {
            return Err(ModelError::ContextTooLong { len, max: self.config.max_positions });
        }
        Ok(())
    }

    fn positional(&self, lens: &[usize]) -> Matrix<F> {
        let d = self.config.model_width;
        let total: usize = lens.iter().sum();
        let mut out = Matrix::zeros(total, d);
        let mut r = 0;
        for &n in lens {
            for p in 0..n {
                out.row_mut(r).copy_from_slice(self.pe.row(p));
                r += 1;
            }
        }
        out
    }

    fn embed_scaled(&self, g: &mut Graph<'_, F>, ids: &[u32]) -> Result<Var> {
        let table = g.param(self.layout.embed);
        let e = g.embedding(table, ids)?;
        Ok(g.scale(e, F::from_f64((self.config.model_width as f64).sqrt())))
    }

    fn add_positions(&self, g: &mut Graph<'_, F>, x: Var, lens: &[usize]) -> Result<Var> {
        let pe = g.leaf(self.positional(lens));
        let x = g.add(x, pe)?;
        Ok(g.dropout(x, self.config.dropout))
    }

    fn linear(&self, g: &mut Graph<'_, F>, x: Var, l: &Linear) -> Result<Var> {
        let w = g.param(l.w);
        let b = g.param(l.b);
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(&self, g: &mut Graph<'_, F>, x: Var, n: &Norm) -> Result<Var> {
        let gamma = g.param(n.g);
        let beta = g.param(n.b);
        Ok(g.layer_norm(x, gamma, beta, LN_EPS)?)
    }

    fn ffn(&self, g: &mut Graph<'_, F>, x: Var, a: &Linear, b: &Linear) -> Result<Var> {
        let h = self.linear(g, x, a)?;
        let h = g.relu(h);
        self.linear(g, h, b)
    }

    fn residual(&self, g: &mut Graph<'_, F>, x: Var, y: Var) -> Result<Var> {
        let y = g.dropout(y, self.config.dropout);
        Ok(g.add(x, y)?)
    }

    /// Multi-head scaled dot-product attention, one block per example and head.
    /// `cols` gives the column offsets of q, k and v in their matrices.
    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        g: &mut Graph<'_, F>,
        (q, k, v): (Var, Var, Var),
        cols: [usize; 3],
        q_spans: &[(usize, usize)],
        k_spans: &[(usize, usize)],
        mask: &dyn Fn(usize) -> AttnMask,
        mut record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let heads = self.config.heads;
        let dh = self.config.model_width / heads;
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut rows = Vec::with_capacity(q_spans.len());
        for (e, (&(qo, qn), &(ko, kn))) in q_spans.iter().zip(k_spans).enumerate() {
            let m = mask(e);
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qb = g.block(q, qo, cols[0] + h * dh, qn, dh)?;
                let kb = g.block(k, ko, cols[1] + h * dh, kn, dh)?;
                let vb = g.block(v, ko, cols[2] + h * dh, kn, dh)?;
                let s = g.matmul_t(qb, kb, false, true, scale)?;
                let p = g.softmax(s, &m);
                if let Some(r) = record.as_deref_mut() {
                    r.push(p);
                }
                outs.push(g.matmul(p, vb)?);
            }
            rows.push(g.concat_cols(&outs)?);
        }
        Ok(g.concat_rows(&rows)?)
    }

    fn encoder_layer(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        l: &EncLayer,
        spans: &[(usize, usize)],
        mask: &dyn Fn(usize) -> AttnMask,
        record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let d = self.config.model_width;
        let h = self.norm(g, x, &l.ln1)?;
        let qkv = self.linear(g, h, &l.qkv)?;
        let a = self.attend(g, (qkv, qkv, qkv), [0, d, 2 * d], spans, spans, mask, record)?;
        let a = self.linear(g, a, &l.out)?;
        let x = self.residual(g, x, a)?;
        let h = self.norm(g, x, &l.ln2)?;
        let f = self.ffn(g, h, &l.ff1, &l.ff2)?;
        self.residual(g, x, f)
    }

    fn decoder_layer(
        &self,
        g: &mut Graph<'_, F>,
        x: Var,
        l: &DecLayer,
        spans: &[(usize, usize)],
        kv: Var,
        mem_spans: &[(usize, usize)],
        self_mask: &AttnMask,
    ) -> Result<Var> {
        let d = self.config.model_width;
        let h = self.norm(g, x, &l.ln1)?;
        let qkv = self.linear(g, h, &l.qkv)?;
        let mask = |_| self_mask.clone();
        let a = self.attend(g, (qkv, qkv, qkv), [0, d, 2 * d], spans, spans, &mask, None)?;
        let a = self.linear(g, a, &l.self_out)?;
        let x = self.residual(g, x, a)?;
        let h = self.norm(g, x, &l.ln2)?;
        let q = self.linear(g, h, &l.q)?;
        let open = |_| AttnMask::None;
        let c = self.attend(g, (q, kv, kv), [0, 0, d], spans, mem_spans, &open, None)?;
        let c = self.linear(g, c, &l.cross_out)?;
        let x = self.residual(g, x, c)?;
        let h = self.norm(g, x, &l.ln3)?;
        let f = self.ffn(g, h, &l.ff1, &l.ff2)?;
        self.residual(g, x, f)
    }

    /// Per-layer cross-attention keys/values `[K | V]` from encoder states.
    fn cross_memory(&self, g: &mut Graph<'_, F>, states: Var) -> Result<Vec<Var>> {
        self.layout.dec.iter().map(|l| self.linear(g, states, &l.kv)).collect()
    }

    fn decoder_stack(
        &self,
        g: &mut Graph<'_, F>,
        mut x: Var,
        spans: &[(usize, usize)],
        kv: &[Var],
        mem_spans: &[(usize, usize)],
    ) -> Result<Var> {
        let mask = if self.config.kind.is_ar() { AttnMask::Causal } else { AttnMask::None };
        for (l, &kv) in self.layout.dec.iter().zip(kv) {
            x = self.decoder_layer(g, x, l, spans, kv, mem_spans, &mask)?;
        }
        self.count_pass();
        let ln = self.layout.dec_ln.as_ref().expect("decoder present");
        self.norm(g, x, ln)
    }

    /// Vocabulary logits through the tied embedding table.
    fn project(&self, g: &mut Graph<'_, F>, x: Var) -> Result<Var> {
        let table = g.param(self.layout.embed);
        Ok(g.matmul_t(x, table, false, true, F::one())?)
    }

    /// Encode a batch of contexts (each beginning with the LENGTH id).
    pub fn encode_batch(&self, g: &mut Graph<'_, F>, contexts: &[&[u32]]) -> Result<BatchEncoding> {
        self.require(self.config.kind != ModelKind::Dam, "encoder-decoder")?;
        for c in contexts {
            self.check_len(c.len())?;
        }
        let lens: Vec<usize> = contexts.iter().map(|c| c.len()).collect();
        let spans = spans_of(lens.iter().copied());
        let ids: Vec<u32> = contexts.concat();
        let x = self.embed_scaled(g, &ids)?;
        let mut x = self.add_positions(g, x, &lens)?;
        let open = |_| AttnMask::None;
        for l in &self.layout.enc {
            x = self.encoder_layer(g, x, l, &spans, &open, None)?;
        }
        let states = self.norm(g, x, &self.layout.enc_ln)?;
        let length_logits = match &self.layout.length {
            Some(head) => {
                let rows: Vec<usize> = spans.iter().map(|s| s.0).collect();
                let first = g.gather(states, &rows)?;
                Some(self.linear(g, first, head)?)
            }
            None => None,
        };
        Ok(BatchEncoding { states, spans, length_logits })
    }

    /// Soft-copied decoder inputs with glanced rows replaced by token
    /// embeddings, plus positional encodings. Glance positions are 0-based.
    fn nar_inputs(
        &self,
        g: &mut Graph<'_, F>,
        enc: &BatchEncoding,
        lengths: &[usize],
        glances: &[&[(usize, u32)]],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let d = self.config.model_width;
        let mut parts = Vec::with_capacity(lengths.len());
        for (&(off, m), &n) in enc.spans.iter().zip(lengths) {
            self.check_len(n)?;
            let s = g.block(enc.states, off, 0, m, d)?;
            let w = g.leaf(soft_copy_weights(n, m, self.config.softcopy_tau));
            parts.push(g.matmul(w, s)?);
        }
        let mut h = g.concat_rows(&parts)?;
        let spans = spans_of(lengths.iter().copied());
        let mut map = Vec::new();
        let mut ids = Vec::new();
        for (e, gl) in glances.iter().enumerate() {
            let (off, n) = spans[e];
            for &(pos, tok) in gl.iter() {
                if pos >= n {
                    return Err(ModelError::GlancePositionOutOfRange { position: pos, length: n });
                }
                map.push((off + pos, ids.len()));
                ids.push(tok);
            }
        }
        if !ids.is_empty() {
            let emb = self.embed_scaled(g, &ids)?;
            h = g.overwrite_rows(h, emb, &map)?;
        }
        Ok((self.add_positions(g, h, lengths)?, spans))
    }

    /// One parallel decoder pass over a batch at the given target lengths.
    pub fn nar_decode_batch(
        &self,
        g: &mut Graph<'_, F>,
        enc: &BatchEncoding,
        lengths: &[usize],
        glances: &[&[(usize, u32)]],
    ) -> Result<BatchLogits> {
        self.require(self.config.kind == ModelKind::Nar, "non-autoregressive")?;
        let (x, spans) = self.nar_inputs(g, enc, lengths, glances)?;
        let kv = self.cross_memory(g, enc.states)?;
        let y = self.decoder_stack(g, x, &spans, &kv, &enc.spans)?;
        Ok(BatchLogits { logits: self.project(g, y)?, spans })
    }

    /// Teacher-forced causal decoding. `targets` are already in decoding
    /// order and end with EOS; inputs are `[EOS] + target[..n-1]`.
    pub fn ar_decode_batch(
        &self,
        g: &mut Graph<'_, F>,
        enc: &BatchEncoding,
        targets: &[&[u32]],
    ) -> Result<BatchLogits> {
        self.require(self.config.kind.is_ar(), "autoregressive")?;
        let lens: Vec<usize> = targets.iter().map(|t| t.len()).collect();
        for &n in &lens {
            self.check_len(n)?;
        }
        let ids: Vec<u32> = targets
            .iter()
            .flat_map(|t| std::iter::once(EOS).chain(t[..t.len() - 1].iter().copied()))
            .collect();
        let x = self.embed_scaled(g, &ids)?;
        let x = self.add_positions(g, x, &lens)?;
        let spans = spans_of(lens.iter().copied());
        let kv = self.cross_memory(g, enc.states)?;
        let y = self.decoder_stack(g, x, &spans, &kv, &enc.spans)?;
        Ok(BatchLogits { logits: self.project(g, y)?, spans })
    }

    /// Evaluation-mode encoding of a single context.
    pub fn encode(&self, context: &[u32]) -> Result<EncoderOutput<F>> {
        let mut g = Graph::new(&self.params);
        let enc = self.encode_batch(&mut g, &[context])?;
        Ok(EncoderOutput {
            states: g.value(enc.states).clone(),
            length_logits: enc.length_logits.map_or_else(Vec::new, |l| g.value(l).data().to_vec()),
        })
    }

    /// Predicted target length, `argmax + 1`, within `[1, max_len_class]`.
    pub fn predict_length(&self, enc: &EncoderOutput<F>) -> usize {
        if enc.length_logits.is_empty() {
            return 1;
        }
        (argmax(&enc.length_logits) + 1).clamp(1, self.config.max_len_class)
    }

    /// Parallel decode from soft-copied inputs `h` and encoder states `s`.
    /// Returns `|h| x vocab` logits.
    pub fn decode_parallel(
        &self,
        h: &Matrix<F>,
        s: &Matrix<F>,
        glanced: &[(usize, u32)],
    ) -> Result<Matrix<F>> {
        self.require(self.config.kind == ModelKind::Nar, "non-autoregressive")?;
        let n = h.rows();
        self.check_len(n)?;
        let mut g = Graph::new(&self.params);
        let mut x = g.leaf(h.clone());
        if !glanced.is_empty() {
            let mut map = Vec::with_capacity(glanced.len());
            for (k, &(pos, _)) in glanced.iter().enumerate() {
                if pos >= n {
                    return Err(ModelError::GlancePositionOutOfRange { position: pos, length: n });
                }
                map.push((pos, k));
            }
            let ids: Vec<u32> = glanced.iter().map(|&(_, t)| t).collect();
            let emb = self.embed_scaled(&mut g, &ids)?;
            x = g.overwrite_rows(x, emb, &map)?;
        }
        let x = self.add_positions(&mut g, x, &[n])?;
        let states = g.leaf(s.clone());
        let kv = self.cross_memory(&mut g, states)?;
        let y = self.decoder_stack(&mut g, x, &[(0, n)], &kv, &[(0, s.rows())])?;
        let logits = self.project(&mut g, y)?;
        Ok(g.value(logits).clone())
    }

    pub fn ar_memory(&self, s: &Matrix<F>) -> Result<ArMemory<F>> {
        self.require(self.config.kind.is_ar(), "autoregressive")?;
        let mut g = Graph::new(&self.params);
        let states = g.leaf(s.clone());
        let kv = self.cross_memory(&mut g, states)?;
        Ok(ArMemory { kv: kv.into_iter().map(|v| g.value(v).clone()).collect() })
    }

    /// Next-token logits after `prefix` (in decoding order). The prefix is
    /// re-run through the causal decoder; only the cross-attention memory is
    /// cached.
    pub fn decode_ar_step(&self, prefix: &[u32], memory: &ArMemory<F>) -> Result<Vec<F>> {
        self.require(self.config.kind.is_ar(), "autoregressive")?;
        let n = prefix.len() + 1;
        self.check_len(n)?;
        let mut g = Graph::new(&self.params);
        let ids: Vec<u32> = std::iter::once(EOS).chain(prefix.iter().copied()).collect();
        let x = self.embed_scaled(&mut g, &ids)?;
        let x = self.add_positions(&mut g, x, &[n])?;
        let kv: Vec<Var> = memory.kv.iter().map(|m| g.leaf(m.clone())).collect();
        let m = memory.kv.first().map_or(0, Matrix::rows);
        let y = self.decoder_stack(&mut g, x, &[(0, n)], &kv, &[(0, m)])?;
        let last = g.block(y, n - 1, 0, 1, self.config.model_width)?;
        let logits = self.project(&mut g, last)?;
        Ok(g.value(logits).data().to_vec())
    }

    /// Mix-attention stack over `[target; source]` for a batch. Masked target
    /// inputs take the learned MASK vector. Returns logits for the masked
    /// positions of every example, in order; `record` collects the attention
    /// probability nodes as `[layer][example][head]` in push order.
    pub fn dam_forward(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[&[u32]],
        targets: &[&[u32]],
        masks: &[&[usize]],
        record: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let (y, _, rows) = self.dam_stack(g, sources, targets, masks, record)?;
        let picked = g.gather(y, &rows)?;
        self.project(g, picked)
    }

    /// Like [`Model::dam_forward`] but projects every row of every example.
    /// Returns the logits, the per-example `(offset, N + M)` spans and the
    /// global row index of each masked position.
    pub fn dam_forward_all(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[&[u32]],
        targets: &[&[u32]],
        masks: &[&[usize]],
    ) -> Result<(Var, Vec<(usize, usize)>, Vec<usize>)> {
        let (y, spans, rows) = self.dam_stack(g, sources, targets, masks, None)?;
        Ok((self.project(g, y)?, spans, rows))
    }

    fn dam_stack(
        &self,
        g: &mut Graph<'_, F>,
        sources: &[&[u32]],
        targets: &[&[u32]],
        masks: &[&[usize]],
        mut record: Option<&mut Vec<Var>>,
    ) -> Result<(Var, Vec<(usize, usize)>, Vec<usize>)> {
        self.require(self.config.kind == ModelKind::Dam, "dam")?;
        let mut lens = Vec::with_capacity(sources.len());
        let mut ids = Vec::new();
        let mut segs = Vec::new();
        let mut allowed = Vec::with_capacity(sources.len());
        for (s, t) in sources.iter().zip(targets) {
            let (n, m) = (t.len(), s.len());
            self.check_len(n + m)?;
            lens.push(n + m);
            ids.extend_from_slice(t);
            ids.extend_from_slice(s);
            segs.extend(std::iter::repeat_n(0u32, n).chain(std::iter::repeat_n(1, m)));
            let total = n + m;
            let flags: Vec<bool> = (0..total * total).map(|k| k / total < n || k % total >= n).collect();
            allowed.push(AttnMask::Allowed(std::rc::Rc::new(flags)));
        }
        let spans = spans_of(lens.iter().copied());
        let mut x = self.embed_scaled(g, &ids)?;
        let mut rows = Vec::new();
        for (e, ms) in masks.iter().enumerate() {
            let n = targets[e].len();
            for &p in ms.iter() {
                if p >= n {
                    return Err(ModelError::GlancePositionOutOfRange { position: p, length: n });
                }
                rows.push(spans[e].0 + p);
            }
        }
        let mask_vec = g.param(self.layout.mask.expect("dam layout"));
        let map: Vec<(usize, usize)> = rows.iter().map(|&r| (r, 0)).collect();
        x = g.overwrite_rows(x, mask_vec, &map)?;
        let seg_table = g.param(self.layout.segment.expect("dam layout"));
        let seg = g.embedding(seg_table, &segs)?;
        x = g.add(x, seg)?;
        let mut x = self.add_positions(g, x, &lens)?;
        let mask = |e: usize| allowed[e].clone();
        for l in &self.layout.enc {
            x = self.encoder_layer(g, x, l, &spans, &mask, record.as_deref_mut())?;
        }
        let y = self.norm(g, x, &self.layout.enc_ln)?;
        Ok((y, spans, rows))
    }

    /// Single-example mix-attention forward exposing attention maps.
    pub fn mix_attention_forward(
        &self,
        source: &[u32],
        target: &[u32],
        mask_positions: &[usize],
    ) -> Result<MixOutput<F>> {
        let mut g = Graph::new(&self.params);
        let mut rec = Vec::new();
        let logits = self.dam_forward(&mut g, &[source], &[target], &[mask_positions], Some(&mut rec))?;
        let heads = self.config.heads;
        let attention = rec
            .chunks(heads)
            .map(|layer| layer.iter().map(|&v| g.value(v).clone()).collect())
            .collect();
        Ok(MixOutput { logits: g.value(logits).clone(), attention })
    }
}
