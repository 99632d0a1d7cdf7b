//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! A [`Graph`] borrows the parameter store immutably while the forward pass
//! is recorded; [`Graph::backward`] returns a [`Gradients`] set that the
//! caller folds back into the store. Attention and micro matching are fused
//! operations with hand-derived backward passes; everything else is
//! elementwise or a matrix product.

#![allow(clippy::needless_range_loop)]

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::mask::AttentionMask;
use super::matrix::{axpy, dot, gemm, Matrix};
use super::param::{ParamId, ParamStore};
use super::softmax::{softmax_backward, softmax_in_place};
use crate::error::{Error, Result};
use crate::matching::{ti_sensi_forward, MicroAggregation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Block-diagonal attention layout: the rows of Q/K/V are split into
/// consecutive blocks of `block_len` rows, each with its own mask.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub block_len: usize,
    pub heads: usize,
    pub masks: Vec<AttentionMask>,
}

impl AttentionLayout {
    pub fn new(heads: usize, masks: Vec<AttentionMask>) -> Result<Self> {
        let block_len = masks.first().map_or(0, AttentionMask::size);
        if masks.iter().any(|m| m.size() != block_len) {
            return Err(Error::InvalidArgument("masks of differing size".into()));
        }
        if heads == 0 {
            return Err(Error::InvalidArgument("zero attention heads".into()));
        }
        Ok(AttentionLayout {
            block_len,
            heads,
            masks,
        })
    }

    pub fn blocks(&self) -> usize {
        self.masks.len()
    }
}

/// One micro matching evaluation: the active sequence occupies rows
/// `active_block * block_len + 1 ..= + active_len` of the active tensor,
/// and likewise for the passive side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MicroItem {
    pub active_block: usize,
    pub active_len: usize,
    pub passive_block: usize,
    pub passive_len: usize,
}

struct AttentionNode {
    q: Var,
    k: Var,
    v: Var,
    layout: Arc<AttentionLayout>,
    probs: Vec<f64>,
    keep: Option<Vec<f64>>,
}

struct MicroNode {
    active: Var,
    passive: Var,
    e_p: Var,
    e_f: Var,
    alpha: Var,
    block_len: usize,
    items: Arc<Vec<MicroItem>>,
    mode: MicroAggregation,
    gammas: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

enum Op {
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Gather(Var, Arc<Vec<Option<usize>>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    RowDot(Var, Var),
    Attention(Box<AttentionNode>),
    Micro(Box<MicroNode>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// Parameter gradients produced by one backward pass.
pub struct Gradients {
    per_param: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.per_param.get(id.index()).and_then(Option::as_ref)
    }

    /// Adds every gradient into the store's accumulators.
    pub fn accumulate_into(self, store: &mut ParamStore) {
        for (i, g) in self.per_param.into_iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).grad.add_assign(&g);
            }
        }
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0] {
            Node { op: Op::Param(id), .. } => self.store.value(*id),
            Node { value, .. } => value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Constant, m)
    }

    /// A copy of `v` through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let m = self.value(v).clone();
        self.constant(m)
    }

    fn same_shape(&self, ctx: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(ctx, format!("{sa:?}"), format!("{sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    fn zip_with(&mut self, ctx: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.same_shape(ctx, a, b)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let data = ma.data().iter().zip(mb.data()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(ma.rows(), ma.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    /// Adds a 1 x cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::shape(
                "add_row",
                format!("(1, {c})"),
                format!("{:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data().to_vec();
        for i in 0..r {
            axpy(1.0, &bias, out.row_mut(i));
        }
        Ok(self.push(Op::AddRow(a, row), out))
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        let m = self.value(a);
        if factor.len() != m.len() {
            return Err(Error::shape("mul_const", m.len(), factor.len()));
        }
        let data = m.data().iter().zip(&factor).map(|(x, f)| x * f).collect();
        let out = Matrix::from_vec(m.rows(), m.cols(), data)?;
        Ok(self.push(Op::MulConst(a, factor), out))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let factor = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(a, factor)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let m = self.value(a);
        let data = m.data().iter().map(|x| x * c).collect();
        let out = Matrix::from_vec(m.rows(), m.cols(), data).expect("same shape");
        self.push(Op::Scale(a, c), out)
    }

    /// Row gather; `None` produces a zero row.
    pub fn gather(&mut self, src: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let m = self.value(src);
        let cols = m.cols();
        let mut out = Matrix::zeros(idx.len(), cols);
        for (r, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= m.rows() {
                    return Err(Error::shape("gather", format!("row < {}", m.rows()), i));
                }
                out.row_mut(r).copy_from_slice(m.row(i));
            }
        }
        Ok(self.push(Op::Gather(src, Arc::new(idx)), out))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        self.gather(src, idx.iter().map(|&i| Some(i)).collect())
    }

    /// Row-wise layer normalization with 1 x cols gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            if self.shape(p) != (1, c) {
                return Err(Error::shape(
                    "layer_norm",
                    format!("(1, {c})"),
                    format!("{:?}", self.shape(p)),
                ));
            }
        }
        let xm = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = Matrix::zeros(r, c);
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            let o = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                o[j] = g[j] * h + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Matrix {
        let m = self.value(a);
        Matrix::from_vec(m.rows(), m.cols(), m.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| gelu(x).0);
        self.push(Op::Gelu(a), out)
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.map(a, softplus);
        self.push(Op::Softplus(a), out)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x * x);
        self.push(Op::Square(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Matrix::row_vector(vec![s]))
    }

    /// Per-row dot product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ma, mb) = (self.value(a), self.value(b));
        let data = (0..ma.rows()).map(|i| dot(ma.row(i), mb.row(i))).collect();
        let out = Matrix::column_vector(data);
        Ok(self.push(Op::RowDot(a, b), out))
    }

    /// Masked multi-head scaled dot-product attention over a block layout.
    /// `dropout` applies inverted dropout to the attention probabilities.
    pub fn attention<R: Rng>(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        self.same_shape("attention k", q, k)?;
        self.same_shape("attention v", q, v)?;
        let (rows, d) = self.shape(q);
        let (l, h) = (layout.block_len, layout.heads);
        if rows != l * layout.blocks() {
            return Err(Error::shape("attention rows", l * layout.blocks(), rows));
        }
        if d % h != 0 {
            return Err(Error::InvalidArgument(format!("width {d} not divisible by {h} heads")));
        }
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; layout.blocks() * h * l * l];
        let mut keep = dropout.as_ref().map(|_| vec![1.0; probs.len()]);
        let mut drop_rng = dropout;
        let mut out = Matrix::zeros(rows, d);
        let mut logits = vec![0.0; l];
        for (b, mask) in layout.masks.iter().enumerate() {
            let base = b * l;
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..l {
                    let allow = mask.row(i);
                    let qi = &qm.row(base + i)[off..off + dh];
                    for j in 0..l {
                        logits[j] = if allow[j] {
                            scale * dot(qi, &km.row(base + j)[off..off + dh])
                        } else {
                            0.0
                        };
                    }
                    softmax_in_place(&mut logits, allow)?;
                    let pbase = ((b * h + hd) * l + i) * l;
                    probs[pbase..pbase + l].copy_from_slice(&logits);
                    if let (Some(keep), Some((rate, rng))) = (keep.as_mut(), drop_rng.as_mut()) {
                        let kp = 1.0 - *rate;
                        for j in 0..l {
                            if allow[j] {
                                let f = if rng.gen::<f64>() < kp { 1.0 / kp } else { 0.0 };
                                keep[pbase + j] = f;
                                logits[j] *= f;
                            }
                        }
                    }
                    let orow = &mut out.row_mut(base + i)[off..off + dh];
                    for j in 0..l {
                        if logits[j] != 0.0 {
                            axpy(logits[j], &vm.row(base + j)[off..off + dh], orow);
                        }
                    }
                }
            }
        }
        let node = AttentionNode {
            q,
            k,
            v,
            layout,
            probs,
            keep,
        };
        Ok(self.push(Op::Attention(Box::new(node)), out))
    }

    /// Time-sensitive co-attention matching for a batch of sequence pairs.
    /// Returns an `items x 1` column of scores.
    #[allow(clippy::too_many_arguments)]
    pub fn micro_match(
        &mut self,
        active: Var,
        passive: Var,
        e_p: Var,
        e_f: Var,
        alpha: Var,
        block_len: usize,
        items: Arc<Vec<MicroItem>>,
        mode: MicroAggregation,
    ) -> Result<Var> {
        let d = self.shape(active).1;
        if self.shape(passive).1 != d {
            return Err(Error::shape("micro_match passive width", d, self.shape(passive).1));
        }
        for e in [e_p, e_f] {
            if self.shape(e) != (items.len(), d) {
                return Err(Error::shape(
                    "micro_match embeddings",
                    format!("({}, {d})", items.len()),
                    format!("{:?}", self.shape(e)),
                ));
            }
        }
        let (am, pm) = (self.value(active), self.value(passive));
        let (epm, efm) = (self.value(e_p), self.value(e_f));
        let alpha_v = self.value(alpha).data();
        let mut out = Vec::with_capacity(items.len());
        let mut gammas = Vec::with_capacity(items.len());
        let mut deltas = Vec::with_capacity(items.len());
        for (t, it) in items.iter().enumerate() {
            if it.active_len == 0 || it.passive_len == 0 {
                return Err(Error::MicroUndefined);
            }
            if it.active_len >= block_len || it.passive_len >= block_len || it.active_len > alpha_v.len() {
                return Err(Error::shape(
                    "micro_match length",
                    block_len - 1,
                    it.active_len.max(it.passive_len),
                ));
            }
            let fwd = ti_sensi_forward(
                am,
                it.active_block * block_len + 1,
                it.active_len,
                pm,
                it.passive_block * block_len + 1,
                it.passive_len,
                epm.row(t),
                efm.row(t),
                alpha_v,
                mode,
            );
            out.push(fwd.score);
            gammas.push(fwd.gamma);
            deltas.push(fwd.delta);
        }
        let node = MicroNode {
            active,
            passive,
            e_p,
            e_f,
            alpha,
            block_len,
            items,
            mode,
            gammas,
            deltas,
        };
        Ok(self.push(Op::Micro(Box::new(node)), Matrix::column_vector(out)))
    }

    /// Back-propagates from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            return Err(Error::shape(
                "backward root",
                "(1, 1)",
                format!("{:?}", self.shape(root)),
            ));
        }
        if !self.value(root).is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::row_vector(vec![1.0]));
        let mut per_param: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Param(id) => match &mut per_param[id.index()] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                },
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut grads, *a);
                    gemm(1.0, &g, false, mb, true, 1.0, ga);
                    let gb = self.grad_slot(&mut grads, *b);
                    gemm(1.0, ma, true, &g, false, 1.0, gb);
                }
                Op::Add(a, b) => {
                    self.grad_slot(&mut grads, *a).add_assign(&g);
                    self.grad_slot(&mut grads, *b).add_assign(&g);
                }
                Op::Sub(a, b) => {
                    self.grad_slot(&mut grads, *a).add_assign(&g);
                    axpy(-1.0, g.data(), self.grad_slot(&mut grads, *b).data_mut());
                }
                Op::Mul(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    let ga = self.grad_slot(&mut grads, *a).data_mut();
                    for ((o, gi), y) in ga.iter_mut().zip(g.data()).zip(mb.data()) {
                        *o += gi * y;
                    }
                    let gb = self.grad_slot(&mut grads, *b).data_mut();
                    for ((o, gi), x) in gb.iter_mut().zip(g.data()).zip(ma.data()) {
                        *o += gi * x;
                    }
                }
                Op::AddRow(a, row) => {
                    self.grad_slot(&mut grads, *a).add_assign(&g);
                    let gr = self.grad_slot(&mut grads, *row).data_mut();
                    for i in 0..g.rows() {
                        axpy(1.0, g.row(i), gr);
                    }
                }
                Op::MulConst(a, factor) => {
                    let ga = self.grad_slot(&mut grads, *a).data_mut();
                    for ((o, gi), f) in ga.iter_mut().zip(g.data()).zip(factor) {
                        *o += gi * f;
                    }
                }
                Op::Scale(a, c) => axpy(*c, g.data(), self.grad_slot(&mut grads, *a).data_mut()),
                Op::Gather(src, idx) => {
                    let gs = self.grad_slot(&mut grads, *src);
                    for (r, i) in idx.iter().enumerate() {
                        if let Some(i) = *i {
                            axpy(1.0, g.row(r), gs.row_mut(i));
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let c = g.cols();
                    let gv = self.value(*gain).data().to_vec();
                    {
                        let gg = self.grad_slot(&mut grads, *gain).data_mut();
                        for i in 0..g.rows() {
                            for j in 0..c {
                                gg[j] += g.get(i, j) * xhat[i * c + j];
                            }
                        }
                    }
                    {
                        let gb = self.grad_slot(&mut grads, *bias).data_mut();
                        for i in 0..g.rows() {
                            axpy(1.0, g.row(i), gb);
                        }
                    }
                    let gx = self.grad_slot(&mut grads, *x);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..g.rows() {
                        let gr = g.row(i);
                        for j in 0..c {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxhat, xh) / c as f64;
                        let o = gx.row_mut(i);
                        for j in 0..c {
                            o[j] += inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::Gelu(a) => {
                    let xa = self.value(*a);
                    let ga = self.grad_slot(&mut grads, *a).data_mut();
                    for ((o, gi), &x) in ga.iter_mut().zip(g.data()).zip(xa.data()) {
                        *o += gi * gelu(x).1;
                    }
                }
                Op::Softplus(a) => {
                    let xa = self.value(*a);
                    let ga = self.grad_slot(&mut grads, *a).data_mut();
                    for ((o, gi), &x) in ga.iter_mut().zip(g.data()).zip(xa.data()) {
                        *o += gi * sigmoid(x);
                    }
                }
                Op::Square(a) => {
                    let xa = self.value(*a);
                    let ga = self.grad_slot(&mut grads, *a).data_mut();
                    for ((o, gi), &x) in ga.iter_mut().zip(g.data()).zip(xa.data()) {
                        *o += 2.0 * gi * x;
                    }
                }
                Op::Sum(a) => {
                    let s = g.get(0, 0);
                    self.grad_slot(&mut grads, *a)
                        .data_mut()
                        .iter_mut()
                        .for_each(|o| *o += s);
                }
                Op::RowDot(a, b) => {
                    let (ma, mb) = (self.value(*a), self.value(*b));
                    {
                        let ga = self.grad_slot(&mut grads, *a);
                        for i in 0..ma.rows() {
                            axpy(g.get(i, 0), mb.row(i), ga.row_mut(i));
                        }
                    }
                    let gb = self.grad_slot(&mut grads, *b);
                    for i in 0..ma.rows() {
                        axpy(g.get(i, 0), ma.row(i), gb.row_mut(i));
                    }
                }
                Op::Attention(node) => self.attention_backward(node, &g, &mut grads),
                Op::Micro(node) => self.micro_backward(node, &g, &mut grads),
            }
        }
        Ok(Gradients { per_param })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Matrix>], v: Var) -> &'g mut Matrix {
        let (r, c) = self.shape(v);
        grads[v.0].get_or_insert_with(|| Matrix::zeros(r, c))
    }

    fn attention_backward(&self, node: &AttentionNode, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let layout = &node.layout;
        let (l, h) = (layout.block_len, layout.heads);
        let d = g.cols();
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qm, km, vm) = (self.value(node.q), self.value(node.k), self.value(node.v));
        let (rows, _) = qm.shape();
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gv = Matrix::zeros(rows, d);
        let mut dp = vec![0.0; l];
        let mut ds = vec![0.0; l];
        let mut pk = vec![0.0; l];
        for (b, mask) in layout.masks.iter().enumerate() {
            let base = b * l;
            for hd in 0..h {
                let off = hd * dh;
                for i in 0..l {
                    let allow = mask.row(i);
                    let pbase = ((b * h + hd) * l + i) * l;
                    let p = &node.probs[pbase..pbase + l];
                    let gout = &g.row(base + i)[off..off + dh];
                    for j in 0..l {
                        if !allow[j] {
                            dp[j] = 0.0;
                            pk[j] = 0.0;
                            continue;
                        }
                        let f = node.keep.as_ref().map_or(1.0, |k| k[pbase + j]);
                        pk[j] = p[j] * f;
                        dp[j] = dot(gout, &vm.row(base + j)[off..off + dh]) * f;
                    }
                    for j in 0..l {
                        if pk[j] != 0.0 {
                            axpy(pk[j], gout, &mut gv.row_mut(base + j)[off..off + dh]);
                        }
                    }
                    softmax_backward(p, &dp, &mut ds);
                    let qi = &qm.row(base + i)[off..off + dh];
                    for j in 0..l {
                        if allow[j] && ds[j] != 0.0 {
                            let s = scale * ds[j];
                            axpy(
                                s,
                                &km.row(base + j)[off..off + dh],
                                &mut gq.row_mut(base + i)[off..off + dh],
                            );
                            axpy(s, qi, &mut gk.row_mut(base + j)[off..off + dh]);
                        }
                    }
                }
            }
        }
        self.grad_slot(grads, node.q).add_assign(&gq);
        self.grad_slot(grads, node.k).add_assign(&gk);
        self.grad_slot(grads, node.v).add_assign(&gv);
    }

    fn micro_backward(&self, node: &MicroNode, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let (am, pm) = (self.value(node.active), self.value(node.passive));
        let (epm, efm) = (self.value(node.e_p), self.value(node.e_f));
        let d = am.cols();
        let mut ga = Matrix::zeros(am.rows(), d);
        let mut gp = Matrix::zeros(pm.rows(), d);
        let mut gep = Matrix::zeros(epm.rows(), d);
        let mut gef = Matrix::zeros(efm.rows(), d);
        let mut galpha = vec![0.0; self.value(node.alpha).len()];
        let mut pbar = vec![0.0; d];
        let mut fbar = vec![0.0; d];
        for (t, it) in node.items.iter().enumerate() {
            let gz = g.get(t, 0);
            if gz == 0.0 {
                continue;
            }
            let a0 = it.active_block * node.block_len + 1;
            let b0 = it.passive_block * node.block_len + 1;
            let (sa, sb) = (it.active_len, it.passive_len);
            let gamma = &node.gammas[t];
            let delta = &node.deltas[t];
            // z = (sum_a delta_a P_a) . (sum_b gamma_b F_b)
            pbar.iter_mut().for_each(|x| *x = 0.0);
            fbar.iter_mut().for_each(|x| *x = 0.0);
            for a in 0..sa {
                axpy(delta[a], am.row(a0 + a), &mut pbar);
            }
            for b in 0..sb {
                axpy(gamma[b], pm.row(b0 + b), &mut fbar);
            }
            for a in 0..sa {
                axpy(gz * delta[a], &fbar, ga.row_mut(a0 + a));
            }
            for b in 0..sb {
                axpy(gz * gamma[b], &pbar, gp.row_mut(b0 + b));
            }
            if node.mode == MicroAggregation::Mean {
                continue;
            }
            // passive-dimension weights: gamma = softmax(F e_p)
            let dgamma: Vec<f64> = (0..sb).map(|b| gz * dot(pm.row(b0 + b), &pbar)).collect();
            let mut dlg = vec![0.0; sb];
            softmax_backward(gamma, &dgamma, &mut dlg);
            for b in 0..sb {
                axpy(dlg[b], epm.row(t), gp.row_mut(b0 + b));
                axpy(dlg[b], pm.row(b0 + b), gep.row_mut(t));
            }
            // active-dimension weights: delta = softmax(P e_f + alpha^tau)
            let ddelta: Vec<f64> = (0..sa).map(|a| gz * dot(am.row(a0 + a), &fbar)).collect();
            let mut dld = vec![0.0; sa];
            softmax_backward(delta, &ddelta, &mut dld);
            for a in 0..sa {
                axpy(dld[a], efm.row(t), ga.row_mut(a0 + a));
                axpy(dld[a], am.row(a0 + a), gef.row_mut(t));
                galpha[sa - 1 - a] += dld[a];
            }
        }
        self.grad_slot(grads, node.active).add_assign(&ga);
        self.grad_slot(grads, node.passive).add_assign(&gp);
        if node.mode == MicroAggregation::TimeSensitive {
            self.grad_slot(grads, node.e_p).add_assign(&gep);
            self.grad_slot(grads, node.e_f).add_assign(&gef);
            axpy(1.0, &galpha, self.grad_slot(grads, node.alpha).data_mut());
        }
    }
}
