use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm_into, Float, Matrix, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Matrix<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<F>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<F> {
        &mut self.values[id.0]
    }

    pub fn get_index(&self, i: usize) -> &Matrix<F> {
        &self.values[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix<F>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix<F>] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn cast<G: Float>(&self) -> ParamStore<G> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Matrix::cast).collect() }
    }
}

/// Per-parameter gradients; `None` means the parameter was not reached.
#[derive(Debug, Clone)]
pub struct ParamGrads<F> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Float> ParamGrads<F> {
    pub fn empty(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            grads: store.values().iter().map(|v| Some(Matrix::zeros(v.rows(), v.cols()))).collect(),
        }
    }

    pub fn get(&self, i: usize) -> Option<&Matrix<F>> {
        self.grads.get(i).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix<F>> {
        self.get(id.0)
    }

    pub fn set(&mut self, i: usize, g: Matrix<F>) {
        self.grads[i] = Some(g);
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&x| x.to_f64() * x.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: F) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys each query row may attend to.
#[derive(Debug, Clone)]
pub enum AttnMask {
    None,
    /// Row `i` sees columns `0..=i`.
    Causal,
    /// Row-major allowed flags with the same shape as the scores.
    Allowed(Rc<Vec<bool>>),
}

impl AttnMask {
    fn allowed(&self, r: usize, c: usize, cols: usize) -> bool {
        match self {
            AttnMask::None => true,
            AttnMask::Causal => c <= r,
            AttnMask::Allowed(m) => m[r * cols + c],
        }
    }
}

enum Op<F> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool, alpha: F },
    Add { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    Scale { x: Var, s: F },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<F> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix<F>, inv_std: Vec<F> },
    Gather { x: Var, rows: Vec<usize> },
    Overwrite { base: Var, src: Var, map: Vec<(usize, usize)> },
    Block { x: Var, r0: usize, c0: usize },
    ConcatCols { parts: Vec<Var> },
    ConcatRows { parts: Vec<Var> },
    Softmax { x: Var },
    Nll { logits: Var, targets: Vec<usize>, weights: Vec<F>, probs: Matrix<F> },
}

struct Node<F> {
    value: Option<Matrix<F>>,
    op: Op<F>,
    needs_grad: bool,
}

/// Reverse-mode tape over a borrowed parameter store.
///
/// Nodes are appended in evaluation order, so backward is a single reverse
/// sweep. Dropout is active only when the graph was built in train mode.
pub struct Graph<'p, F: Float> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: ChaCha8Rng,
}

fn mismatch(op: &'static str, l: (usize, usize), r: (usize, usize)) -> TensorError {
    TensorError::ShapeMismatch { op, left: l, right: r }
}

impl<'p, F: Float> Graph<'p, F> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self::with_mode(params, false, 0)
    }

    /// Training-mode graph with a seeded dropout stream.
    pub fn training(params: &'p ParamStore<F>, seed: u64) -> Self {
        Self::with_mode(params, true, seed)
    }

    fn with_mode(params: &'p ParamStore<F>, train: bool, seed: u64) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix<F>) -> Var {
        self.nodes.push(Node { value: Some(value), op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// The node for a parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false, F::one())
    }

    /// `alpha * op(a) op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool, alpha: F) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(mismatch("matmul", (m, k), (k2, n)));
        }
        let mut out = Matrix::zeros(m, n);
        gemm_into(&mut out, alpha, self.value(a), ta, self.value(b), tb, F::zero());
        Ok(self.push(out, Op::MatMul { a, b, ta, tb, alpha }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(mismatch("add_row", (r, c), self.shape(row)));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&bias) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(F::zero()));
        self.push(out, Op::Relu { x }, &[x])
    }

    /// Inverted dropout; identity outside train mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        let keep = F::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).len();
        let mask: Vec<F> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { F::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gamma) != (1, c) || self.shape(beta) != (1, c) {
            return Err(mismatch("layer_norm", (r, c), self.shape(gamma)));
        }
        let eps = F::from_f64(eps);
        let n = F::from_f64(c as f64);
        let xv = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Matrix::zeros(r, c);
        let mut out = Matrix::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(i);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.row(i).to_vec();
            for (j, o) in out.row_mut(i).iter_mut().enumerate() {
                *o = g[j] * xh[j] + b[j];
            }
        }
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    /// Selects rows of `x` (embedding lookup when `x` is a table).
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = Matrix::zeros(rows.len(), c);
        for (i, &src) in rows.iter().enumerate() {
            if src >= r {
                return Err(TensorError::IndexOutOfRange { index: src, len: r });
            }
            out.row_mut(i).copy_from_slice(self.value(x).row(src));
        }
        Ok(self.push(out, Op::Gather { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather(table, &rows)
    }

    /// Copy of `base` with row `dst` replaced by `src[s]` for each `(dst, s)`.
    pub fn overwrite_rows(&mut self, base: Var, src: Var, map: &[(usize, usize)]) -> Result<Var> {
        let (br, bc) = self.shape(base);
        let (sr, sc) = self.shape(src);
        if bc != sc {
            return Err(mismatch("overwrite_rows", (br, bc), (sr, sc)));
        }
        let mut out = self.value(base).clone();
        for &(d, s) in map {
            if d >= br {
                return Err(TensorError::IndexOutOfRange { index: d, len: br });
            }
            if s >= sr {
                return Err(TensorError::IndexOutOfRange { index: s, len: sr });
            }
            out.row_mut(d).copy_from_slice(self.value(src).row(s));
        }
        Ok(self.push(out, Op::Overwrite { base, src, map: map.to_vec() }, &[base, src]))
    }

    /// Sub-matrix `rows x cols` starting at `(r0, c0)`.
    pub fn block(&mut self, x: Var, r0: usize, c0: usize, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r0 + rows > r || c0 + cols > c {
            return Err(mismatch("block", (r, c), (r0 + rows, c0 + cols)));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            out.row_mut(i).copy_from_slice(&xv.row(r0 + i)[c0..c0 + cols]);
        }
        Ok(self.push(out, Op::Block { x, r0, c0 }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let w = pv.cols();
            for i in 0..rows {
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
            }
            off += w;
        }
        Ok(self.push(out, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(mismatch("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += self.shape(p).0;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Matrix::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Row softmax; masked-out entries get exactly zero probability.
    pub fn softmax(&mut self, x: Var, mask: &AttnMask) -> Var {
        let mut out = self.value(x).clone();
        let (r, c) = out.shape();
        for i in 0..r {
            let row = out.row_mut(i);
            let mut max = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mask.allowed(i, j, c) && v > max {
                    max = v;
                }
            }
            let mut sum = F::zero();
            for (j, v) in row.iter_mut().enumerate() {
                if mask.allowed(i, j, c) {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = F::zero();
                }
            }
            if sum > F::zero() {
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        self.push(out, Op::Softmax { x }, &[x])
    }

    /// `sum_r weights[r] * -log softmax(logits[r])[targets[r]]` as a 1x1 node.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || weights.len() != r {
            return Err(mismatch("nll", (r, c), (targets.len(), weights.len())));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = F::zero();
        for i in 0..r {
            let t = targets[i];
            if t >= c {
                return Err(TensorError::IndexOutOfRange { index: t, len: c });
            }
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
            if weights[i] != F::zero() {
                let log_p = self.value(logits).get(i, t) - max - sum.ln();
                loss -= weights[i] * log_p;
            }
        }
        let op = Op::Nll { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(Matrix::scalar(loss), op, &[logits]))
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::AllPositionsMasked);
        }
        let w = F::one() / F::from_f64(count as f64);
        let weights: Vec<F> = mask.iter().map(|&m| if m { w } else { F::zero() }).collect();
        self.weighted_nll(logits, targets, &weights)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<F> {
        self.backward_retaining(loss, &[])
    }

    /// Like [`Graph::backward`] but also keeps the gradients of `retain`.
    pub fn backward_retaining(&self, loss: Var, retain: &[Var]) -> Grads<F> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Matrix<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Matrix::scalar(F::one()));
        let mut params = ParamGrads::empty(self.params.len());
        let mut kept = Vec::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if retain.contains(&Var(i)) {
                kept.push((Var(i), g.clone()));
            }
            self.backprop_node(i, g, &mut grads, &mut params);
        }
        Grads { params, kept }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Matrix<F>>], v: Var) -> Option<&'g mut Matrix<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.shape(v);
            *slot = Some(Matrix::zeros(r, c));
        }
        slot.as_mut()
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Matrix<F>,
        grads: &mut [Option<Matrix<F>>],
        params: &mut ParamGrads<F>,
    ) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => params.set(id.0, g),
            Op::MatMul { a, b, ta, tb, alpha } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    if *ta {
                        gemm_into(ga, *alpha, bv, *tb, &g, true, F::one());
                    } else {
                        gemm_into(ga, *alpha, &g, false, bv, !*tb, F::one());
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *tb {
                        gemm_into(gb, *alpha, &g, true, av, *ta, F::one());
                    } else {
                        gemm_into(gb, *alpha, av, !*ta, &g, false, F::one());
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.add_assign(&g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.add_assign(&g);
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gr) = self.acc(grads, *row) {
                    for r in 0..g.rows() {
                        for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    gx.add_assign(&g);
                }
            }
            Op::Scale { x, s } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += *s * v;
                    }
                }
            }
            Op::Relu { x } => {
                let out = self.nodes[i].value.as_ref().expect("relu value");
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &v), &y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if y > F::zero() {
                            *o += v;
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &v), &m) in gx.data_mut().iter_mut().zip(g.data()).zip(mask) {
                        *o += v * m;
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gam = self.value(*gamma).data().to_vec();
                let (rows, cols) = g.shape();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for ((o, &v), &h) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += v * h;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for (o, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = F::from_f64(cols as f64);
                    let mut dxhat = vec![F::zero(); cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..cols {
                            dxhat[j] = gr[j] * gam[j];
                            mean_d += dxhat[j];
                            mean_dh += dxhat[j] * hr[j];
                        }
                        mean_d /= n;
                        mean_dh /= n;
                        let inv = inv_std[r];
                        for (j, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o += inv * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { x, rows } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Overwrite { base, src, map } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for &(d, s) in map {
                        for (o, &v) in gs.row_mut(s).iter_mut().zip(g.row(d)) {
                            *o += v;
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *base) {
                    let mut overwritten = vec![false; g.rows()];
                    for &(d, _) in map {
                        overwritten[d] = true;
                    }
                    for (r, &skip) in overwritten.iter().enumerate() {
                        if !skip {
                            for (o, &v) in gb.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::Block { x, r0, c0 } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let w = g.cols();
                    for r in 0..g.rows() {
                        for (o, &v) in gx.row_mut(r0 + r)[*c0..*c0 + w].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..h {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(g.row(off + r)) {
                                *o += v;
                            }
                        }
                    }
                    off += h;
                }
            }
            Op::Softmax { x } => {
                let y = self.nodes[i].value.as_ref().expect("softmax value");
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((o, &gv), &yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::Nll { logits, targets, weights, probs } => {
                let up = g.item();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let scale = up * w;
                        for (j, (o, &p)) in gl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                            let onehot = if j == t { F::one() } else { F::zero() };
                            *o += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Output of a backward sweep.
pub struct Grads<F> {
    pub params: ParamGrads<F>,
    kept: Vec<(Var, Matrix<F>)>,
}

impl<F: Float> Grads<F> {
    /// Gradient of a retained node, or `None` if it was unreachable.
    pub fn node(&self, v: Var) -> Option<&Matrix<F>> {
        self.kept.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }
}
