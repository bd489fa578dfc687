//! Tape-based reverse-mode differentiation over 2-d tensors.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. `Tape::backward` walks the nodes once in reverse
//! insertion order, which is a valid reverse topological order.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, Scalar, Tensor};
use super::DiffError;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Lower bound applied to probabilities before taking logs in the
/// binary cross-entropy op.
pub const PROB_CLAMP: f64 = 1e-8;

/// Handle to a value recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    #[allow(dead_code)]
    Param(ParamId),
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Sigmoid(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: usize, mask: Vec<T> },
    GatherRows { x: usize, index: Vec<usize> },
    ConcatRows(Vec<usize>),
    Attention { qkv: usize, segments: Vec<Range<usize>>, heads: usize, probs: Vec<T> },
    RowDot(usize, usize),
    Sum(usize),
    Bce { z: usize, targets: Vec<T>, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// Inference tape: dropout is the identity.
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            bound: HashMap::new(),
            dropout_rng: None,
        }
    }

    /// Training tape: dropout masks are drawn from a generator seeded here.
    pub fn training(seed: u64) -> Self {
        Self { dropout_rng: Some(ChaCha8Rng::seed_from_u64(seed)), ..Self::new() }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize, DiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(DiffError::DetachedGraph);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[self.idx(v).expect("variable belongs to this tape")].value
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter once per tape; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    fn shape_err(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> DiffError {
        DiffError::ShapeMismatch(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul_t(false, &self.nodes[ib].value, true)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::MatMulNT(ia, ib), ng))
    }

    /// Adds a `1 × n` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, DiffError> {
        let (ix, ib) = (self.idx(x)?, self.idx(bias)?);
        let (xv, bv) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if bv.len() != xv.cols() {
            return Err(Self::shape_err("add_bias", xv, bv));
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v = *v + b;
            }
        }
        let out = Tensor::matrix(xv.rows(), cols, data)?;
        let ng = self.needs(ix) || self.needs(ib);
        Ok(self.push(out, Op::AddBias(ix, ib), ng))
    }

    fn zip_with(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>), DiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !av.same_shape(bv) {
            return Err(Self::shape_err(what, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::matrix(av.rows(), av.cols(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib, out) = self.zip_with(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Add(ia, ib), ng))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib, out) = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::Mul(ia, ib), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v * c);
        let ng = self.needs(ix);
        Ok(self.push(out, Op::Scale(ix, c), ng))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(|v| v.max(T::zero()));
        let ng = self.needs(ix);
        Ok(self.push(out, Op::Relu(ix), ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let out = self.nodes[ix].value.map(sigmoid);
        let ng = self.needs(ix);
        Ok(self.push(out, Op::Sigmoid(ix), ng))
    }

    /// Softmax over each row.
    pub fn softmax(&mut self, x: Var) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(xv.cols()) {
            softmax_in_place(row);
        }
        let out = Tensor::matrix(xv.rows(), xv.cols(), data)?;
        let ng = self.needs(ix);
        Ok(self.push(out, Op::Softmax(ix), ng))
    }

    /// Normalizes each row to zero mean and unit variance, then applies the
    /// `1 × n` affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, DiffError> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, gv, bv) = (&self.nodes[ix].value, &self.nodes[ig].value, &self.nodes[ib].value);
        let n = xv.cols();
        if gv.len() != n || bv.len() != n {
            return Err(Self::shape_err("layer_norm", xv, gv));
        }
        let nf = T::of(n as f64);
        let eps = T::of(eps);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.rows());
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g + b);
            }
        }
        let out = Tensor::matrix(xv.rows(), n, out)?;
        let ng = self.needs(ix) || self.needs(ig) || self.needs(ib);
        Ok(self.push(out, Op::LayerNorm { x: ix, gamma: ig, beta: ib, xhat, inv_std }, ng))
    }

    /// Inverted dropout. Identity on inference tapes or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        if p <= 0.0 {
            return Ok(x);
        }
        let Some(rng) = self.dropout_rng.as_mut() else {
            return Ok(x);
        };
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.nodes[ix].value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let xv = &self.nodes[ix].value;
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::matrix(xv.rows(), xv.cols(), data)?;
        let ng = self.needs(ix);
        Ok(self.push(out, Op::Dropout { x: ix, mask }, ng))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let xv = &self.nodes[ix].value;
        let cols = xv.cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= xv.rows() {
                return Err(DiffError::ShapeMismatch(format!("row {r} of a {}-row tensor", xv.rows())));
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::matrix(index.len(), cols, data)?;
        let ng = self.needs(ix);
        Ok(self.push(out, Op::GatherRows { x: ix, index: index.to_vec() }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(DiffError::ShapeMismatch("concat of zero tensors".into()));
        };
        let cols = self.nodes[first].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.cols() != cols {
                return Err(Self::shape_err("concat_rows", &self.nodes[first].value, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = idx.iter().any(|&i| self.needs(i));
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(idx), ng))
    }

    /// Scaled dot-product attention over packed `[Q | K | V]` rows
    /// (`N × 3d`). Each segment is an independent token set; no masking
    /// and no positional information. Returns the concatenated heads (`N × d`).
    pub fn attention(&mut self, qkv: Var, segments: &[Range<usize>], heads: usize) -> Result<Var, DiffError> {
        let iq = self.idx(qkv)?;
        let qv = &self.nodes[iq].value;
        let width = qv.cols();
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(DiffError::ShapeMismatch(format!("{width} columns cannot hold 3 x {heads} heads")));
        }
        let n = qv.rows();
        if segments.iter().any(|s| s.start >= s.end || s.end > n) {
            return Err(DiffError::ShapeMismatch(format!("attention segments out of range for {n} tokens")));
        }
        let d = width / 3;
        let hd = d / heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        let data = qv.data();
        let mut out = vec![T::zero(); n * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s.len() * s.len()).sum::<usize>() * heads);
        let w = width as isize;
        for seg in segments {
            let len = seg.len();
            for h in 0..heads {
                let q_off = seg.start * width + h * hd;
                let k_off = q_off + d;
                let v_off = q_off + 2 * d;
                let mut s = vec![T::zero(); len * len];
                T::gemm(len, hd, len, scale, &data[q_off..], (w, 1), &data[k_off..], (1, w), T::zero(), &mut s, (len as isize, 1));
                for row in s.chunks_mut(len) {
                    softmax_in_place(row);
                }
                let o_off = seg.start * d + h * hd;
                T::gemm(len, len, hd, T::one(), &s, (len as isize, 1), &data[v_off..], (w, 1), T::zero(), &mut out[o_off..], (d as isize, 1));
                probs.extend_from_slice(&s);
            }
        }
        let out = Tensor::matrix(n, d, out)?;
        let ng = self.needs(iq);
        Ok(self.push(out, Op::Attention { qkv: iq, segments: segments.to_vec(), heads, probs }, ng))
    }

    /// Row-wise inner products: `n × k`, `n × k` → `n × 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if !av.same_shape(bv) {
            return Err(Self::shape_err("row_dot", av, bv));
        }
        let k = av.cols();
        let data = av.data().chunks(k).zip(bv.data().chunks(k)).map(|(x, y)| dot(x, y)).collect();
        let out = Tensor::matrix(av.rows(), 1, data)?;
        let ng = self.needs(ia) || self.needs(ib);
        Ok(self.push(out, Op::RowDot(ia, ib), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let ix = self.idx(x)?;
        let s = self.nodes[ix].value.data().iter().copied().sum();
        let ng = self.needs(ix);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Weighted binary cross-entropy on logits:
    /// `Σ wᵢ·[−tᵢ·log p̃ᵢ − (1−tᵢ)·log(1−p)̃ᵢ]` with `p = σ(z)` and both
    /// probabilities clamped below at [`PROB_CLAMP`]. Evaluated in 64-bit.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[T], weights: &[T]) -> Result<Var, DiffError> {
        let iz = self.idx(z)?;
        let zv = &self.nodes[iz].value;
        if targets.len() != zv.len() || weights.len() != zv.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "bce over {} logits with {} targets and {} weights",
                zv.len(),
                targets.len(),
                weights.len()
            )));
        }
        let mut total = 0.0f64;
        for ((&z, &t), &w) in zv.data().iter().zip(targets).zip(weights) {
            let (z, t, w) = (z.f64(), t.f64(), w.f64());
            let p = sigmoid_f64(z).max(PROB_CLAMP);
            let q = sigmoid_f64(-z).max(PROB_CLAMP);
            total -= w * (t * p.ln() + (1.0 - t) * q.ln());
        }
        let ng = self.needs(iz);
        let op = Op::Bce { z: iz, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(T::of(total)), op, ng))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, DiffError> {
        let root = self.idx(loss)?;
        let lv = &self.nodes[root].value;
        if lv.len() != 1 {
            return Err(DiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![T::one()]);
        for i in (0..=root).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.bound.iter().map(|(&p, v)| (p, v.index)).collect();
        Ok(Gradients { tape: self.id, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), grads, params })
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let mut acc = |j: usize, f: &dyn Fn(&mut [T])| {
            if !self.nodes[j].needs_grad {
                return;
            }
            let buf = grads[j].get_or_insert_with(|| vec![T::zero(); self.nodes[j].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                acc(*a, &|ga| gemm_acc(g, n, false, bv.data(), n, true, ga, m, n, k, T::one()));
                acc(*b, &|gb| gemm_acc(av.data(), k, true, g, n, false, gb, k, m, n, T::one()));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                acc(*a, &|ga| gemm_acc(g, n, false, bv.data(), k, false, ga, m, n, k, T::one()));
                acc(*b, &|gb| gemm_acc(g, n, true, av.data(), k, false, gb, n, m, k, T::one()));
            }
            Op::AddBias(x, b) => {
                let cols = val(*x).cols();
                acc(*x, &|gx| add_into(gx, g));
                acc(*b, &|gb| {
                    for row in g.chunks(cols) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|ga| add_into(ga, g));
                acc(*b, &|gb| add_into(gb, g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &|ga| {
                    for ((o, &gi), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + gi * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((o, &gi), &x) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + gi * x;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|gx| {
                for (o, &gi) in gx.iter_mut().zip(g) {
                    *o = *o + gi * *c;
                }
            }),
            Op::Relu(x) => {
                let xv = val(*x).data();
                acc(*x, &|gx| {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o = *o + gi;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|gx| {
                    for ((o, &gi), &s) in gx.iter_mut().zip(g).zip(y) {
                        *o = *o + gi * s * (T::one() - s);
                    }
                });
            }
            Op::Softmax(x) => {
                let cols = node.value.cols();
                let y = node.value.data();
                acc(*x, &|gx| {
                    for ((o, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        softmax_backward_acc(o, gr, yr, T::one());
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = val(*x).cols();
                let gamma_v = val(*gamma).data();
                acc(*beta, &|gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
                acc(*gamma, &|gg| {
                    for (row, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((o, &gi), &h) in gg.iter_mut().zip(row).zip(hrow) {
                            *o = *o + gi * h;
                        }
                    }
                });
                let nf = T::of(n as f64);
                acc(*x, &|gx| {
                    for (((o, row), hrow), &inv) in gx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).zip(inv_std) {
                        let dh: Vec<T> = row.iter().zip(gamma_v).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((oi, &d), &h) in o.iter_mut().zip(&dh).zip(hrow) {
                            *oi = *oi + inv / nf * (nf * d - sum_dh - h * sum_dh_h);
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &|gx| {
                for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *o = *o + gi * m;
                }
            }),
            Op::GatherRows { x, index } => {
                let cols = val(*x).cols();
                acc(*x, &|gx| {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &|gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Attention { qkv, segments, heads, probs } => {
                let data = val(*qkv).data();
                let width = val(*qkv).cols();
                acc(*qkv, &|gq| attention_backward(data, width, segments, *heads, probs, g, gq));
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = av.cols();
                acc(*a, &|ga| {
                    for ((o, y), &gi) in ga.chunks_mut(k).zip(bv.data().chunks(k)).zip(g) {
                        for (oi, &yi) in o.iter_mut().zip(y) {
                            *oi = *oi + gi * yi;
                        }
                    }
                });
                acc(*b, &|gb| {
                    for ((o, x), &gi) in gb.chunks_mut(k).zip(av.data().chunks(k)).zip(g) {
                        for (oi, &xi) in o.iter_mut().zip(x) {
                            *oi = *oi + gi * xi;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &|gx| {
                for o in gx.iter_mut() {
                    *o = *o + g[0];
                }
            }),
            Op::Bce { z, targets, weights } => {
                let zv = val(*z).data();
                let g0 = g[0].f64();
                acc(*z, &|gz| {
                    for (((o, &zi), &t), &w) in gz.iter_mut().zip(zv).zip(targets).zip(weights) {
                        let (zi, t, w) = (zi.f64(), t.f64(), w.f64());
                        let p = sigmoid_f64(zi);
                        let q = sigmoid_f64(-zi);
                        // d(-log p)/dz = -(1-p), d(-log(1-p))/dz = p; zero where clamped
                        let pos = if p > PROB_CLAMP { -q } else { 0.0 };
                        let neg = if q > PROB_CLAMP { p } else { 0.0 };
                        *o = *o + T::of(g0 * w * (t * pos + (1.0 - t) * neg));
                    }
                });
            }
        }
    }
}

fn attention_backward<T: Scalar>(
    data: &[T],
    width: usize,
    segments: &[Range<usize>],
    heads: usize,
    probs: &[T],
    g: &[T],
    gq: &mut [T],
) {
    let d = width / 3;
    let hd = d / heads;
    let scale = T::of(1.0 / (hd as f64).sqrt());
    let w = width as isize;
    let mut p_off = 0;
    for seg in segments {
        let len = seg.len();
        let l = len as isize;
        for h in 0..heads {
            let a = &probs[p_off..p_off + len * len];
            p_off += len * len;
            let q_off = seg.start * width + h * hd;
            let k_off = q_off + d;
            let v_off = q_off + 2 * d;
            let o_off = seg.start * d + h * hd;
            // dA = dO · Vᵀ
            let mut da = vec![T::zero(); len * len];
            T::gemm(len, hd, len, T::one(), &g[o_off..], (d as isize, 1), &data[v_off..], (1, w), T::zero(), &mut da, (l, 1));
            // dV += Aᵀ · dO
            T::gemm(len, len, hd, T::one(), a, (1, l), &g[o_off..], (d as isize, 1), T::one(), &mut gq[v_off..], (w, 1));
            // dS = scale · A ⊙ (dA − rowsum(dA ⊙ A))
            let mut ds = vec![T::zero(); len * len];
            for ((o, gr), yr) in ds.chunks_mut(len).zip(da.chunks(len)).zip(a.chunks(len)) {
                softmax_backward_acc(o, gr, yr, scale);
            }
            // dQ += dS · K, dK += dSᵀ · Q
            T::gemm(len, len, hd, T::one(), &ds, (l, 1), &data[k_off..], (w, 1), T::one(), &mut gq[q_off..], (w, 1));
            T::gemm(len, len, hd, T::one(), &ds, (1, l), &data[q_off..], (w, 1), T::one(), &mut gq[k_off..], (w, 1));
        }
    }
}

fn softmax_backward_acc<T: Scalar>(out: &mut [T], g: &[T], y: &[T], scale: T) {
    let inner = g.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
    for ((o, &gi), &yi) in out.iter_mut().zip(g).zip(y) {
        *o = *o + scale * yi * (gi - inner);
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::of(sigmoid_f64(v.f64()))
}

pub fn sigmoid_f64(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of a reverse pass.
pub struct Gradients<T> {
    tape: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        assert_eq!(v.tape, self.tape, "variable from a different tape");
        self.tensor_at(v.index)
    }

    fn tensor_at(&self, i: usize) -> Tensor<T> {
        let shape = &self.shapes[i];
        match &self.grads[i] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shaped like its node"),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient of a parameter, `None` if it was never bound on the tape.
    pub fn param(&self, id: ParamId) -> Option<Tensor<T>> {
        self.params.get(&id).map(|&i| self.tensor_at(i))
    }

    /// Moves out per-parameter gradients indexed by `ParamId`.
    pub fn into_param_grads(mut self, n_params: usize) -> Vec<Option<Vec<T>>> {
        let mut out: Vec<Option<Vec<T>>> = (0..n_params).map(|_| None).collect();
        for (&p, &i) in &self.params {
            if p.0 < n_params {
                out[p.0] = Some(self.grads[i].take().unwrap_or_else(|| vec![T::zero(); self.shapes[i].iter().product()]));
            }
        }
        out
    }
}
