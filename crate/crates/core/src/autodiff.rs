//! A small tensor-level tape for reverse-mode differentiation.
//!
//! Every forward op pushes one [`Node`] holding its value and the ids of its
//! inputs. [`Tape::backward`] walks the nodes in reverse and accumulates
//! vector-Jacobian products. The op set is exactly what the spiking
//! transformer needs; it is not a general autodiff engine.
//!
//! Parameter values are borrowed from the caller (`Cow::Borrowed`), so
//! building a tape per sample does not copy weights.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::spiking::{NeuronConfig, SurrogateConfig};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Affine { x: NodeId, scale: NodeId, shift: NodeId },
    Lif { x: NodeId, timesteps: usize, neuron: NeuronConfig, surrogate: SurrogateConfig, pre: Vec<f32> },
    Or(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MaskTokens { x: NodeId, mask: NodeId, timesteps: usize },
    StraightThrough { soft: NodeId },
    Im2col { x: NodeId, frames: usize, height: usize, width: usize },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    RepeatRows { x: NodeId, times: usize },
    SpikeAttention { q: NodeId, k: NodeId, v: NodeId, timesteps: usize, heads: usize, scale: f32 },
    TemporalMean { x: NodeId, timesteps: usize },
    Tanh(NodeId),
    SoftmaxRows(NodeId),
    Column { x: NodeId, col: usize },
    GumbelKeep { scores: NodeId, tau: f32 },
    TokenMeanPool { x: NodeId, mask: Option<NodeId>, timesteps: usize },
    GatherTokens { x: NodeId, idx: Vec<usize>, timesteps: usize, total: usize },
    ScatterTokens { x: NodeId, idx: Vec<usize>, timesteps: usize },
    CrossEntropy { logits: NodeId, label: usize },
    MeanSquaredError { pred: NodeId, target: Matrix },
    RatioPenalty { x: NodeId, target: f32 },
    WeightedSum(Vec<(NodeId, f32)>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients for every node reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(usize, NodeId)>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Matrix> {
        self.grads.get(node.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a parameter, summed over every leaf that references it.
    pub fn param(&self, param: usize) -> Option<Matrix> {
        let mut acc: Option<Matrix> = None;
        for &(p, node) in &self.params {
            if p != param {
                continue;
            }
            if let Some(g) = self.get(node) {
                match acc.as_mut() {
                    Some(a) => a.add_assign(g),
                    None => acc = Some(g.clone()),
                }
            }
        }
        acc
    }

    /// All parameter gradients as `(param index, gradient)`, ordered by first use.
    pub fn into_param_grads(mut self) -> Vec<(usize, Matrix)> {
        let mut out: Vec<(usize, Matrix)> = Vec::new();
        for &(p, node) in &self.params {
            let Some(g) = self.grads[node.0].take() else { continue };
            match out.iter_mut().find(|(q, _)| *q == p) {
                Some((_, acc)) => acc.add_assign(&g),
                None => out.push((p, g)),
            }
        }
        out
    }
}

fn check_shape(context: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::dim(context, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Matrix>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Matrix, op: Op, parents: &[NodeId]) -> NodeId {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    /// A constant that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn input(&mut self, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// A trainable leaf bound to parameter `index`.
    pub fn param(&mut self, index: usize, value: &'a Matrix) -> NodeId {
        self.push(Cow::Borrowed(value), Op::Param(index), true)
    }

    /// A differentiable leaf that is not a model parameter (used by gradient checks).
    pub fn variable(&mut self, value: Matrix) -> NodeId {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(Error::dim("matmul", format!("inner {}", av.cols()), format!("inner {}", bv.rows())));
        }
        let mut out = Matrix::zeros(av.rows(), bv.cols());
        matmul_acc(av.as_slice(), bv.as_slice(), out.as_mut_slice(), av.rows(), av.cols(), bv.cols());
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        check_shape("add_bias", (1, xv.cols()), bv.shape())?;
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        Ok(self.push_op(out, Op::AddBias(x, bias), &[x, bias]))
    }

    /// Per-channel `x * scale + shift`.
    pub fn affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        check_shape("affine scale", (1, xv.cols()), self.value(scale).shape())?;
        check_shape("affine shift", (1, xv.cols()), self.value(shift).shape())?;
        let (g, b) = (self.value(scale).as_slice(), self.value(shift).as_slice());
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for ((o, gs), bs) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gs + bs;
            }
        }
        Ok(self.push_op(out, Op::Affine { x, scale, shift }, &[x, scale, shift]))
    }

    /// LIF neurons over `timesteps` blocks of rows, membrane carried across blocks.
    pub fn lif(&mut self, x: NodeId, timesteps: usize, neuron: NeuronConfig, surrogate: SurrogateConfig) -> Result<NodeId> {
        let xv = self.value(x);
        if timesteps == 0 || xv.rows() % timesteps != 0 {
            return Err(Error::dim("lif timesteps", format!("divisor of {}", xv.rows()), timesteps));
        }
        let per_step = xv.len() / timesteps;
        let mut spikes = Matrix::zeros(xv.rows(), xv.cols());
        let mut pre = vec![0.0f32; xv.len()];
        let mut potential = vec![0.0f32; per_step];
        let input = xv.as_slice();
        let out = spikes.as_mut_slice();
        for t in 0..timesteps {
            let base = t * per_step;
            for (i, v) in potential.iter_mut().enumerate() {
                let (h, s) = neuron.integrate(v, input[base + i]);
                pre[base + i] = h;
                out[base + i] = if s { 1.0 } else { 0.0 };
            }
        }
        Ok(self.push_op(spikes, Op::Lif { x, timesteps, neuron, surrogate, pre }, &[x]))
    }

    /// Spike-wise OR, `a + b - a * b`; binary in, binary out.
    pub fn or(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_shape("or", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(&x, &y)| x + y - x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        Ok(self.push_op(out, Op::Or(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        check_shape("mul", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(&x, &y)| x * y).collect();
        let out = Matrix::from_vec(av.rows(), av.cols(), data);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    /// Scales token `n` at every timestep by `mask[n]` (`mask: [N, 1]`).
    pub fn mask_tokens(&mut self, x: NodeId, mask: NodeId, timesteps: usize) -> Result<NodeId> {
        let (xv, mv) = (self.value(x), self.value(mask));
        let n = mv.rows();
        check_shape("mask_tokens", (timesteps * n, xv.cols()), xv.shape())?;
        check_shape("mask_tokens mask", (n, 1), mv.shape())?;
        let mut out = xv.clone();
        for t in 0..timesteps {
            for tok in 0..n {
                let m = mv.get(tok, 0);
                if m != 1.0 {
                    for o in out.row_mut(t * n + tok) {
                        *o *= m;
                    }
                }
            }
        }
        Ok(self.push_op(out, Op::MaskTokens { x, mask, timesteps }, &[x, mask]))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Matrix, soft: NodeId) -> Result<NodeId> {
        check_shape("straight_through", self.shape(soft), hard.shape())?;
        Ok(self.push_op(hard, Op::StraightThrough { soft }, &[soft]))
    }

    /// 3x3, stride 1, zero-padded patches of `[frames * H * W, C]` into `[frames * H * W, 9C]`.
    pub fn im2col3(&mut self, x: NodeId, frames: usize, height: usize, width: usize) -> Result<NodeId> {
        let xv = self.value(x);
        check_shape("im2col", (frames * height * width, xv.cols()), xv.shape())?;
        let c = xv.cols();
        let mut out = Matrix::zeros(xv.rows(), 9 * c);
        for f in 0..frames {
            let base = f * height * width;
            for y in 0..height {
                for xx in 0..width {
                    let row = out.row_mut(base + y * width + xx);
                    for ky in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let sx = xx as isize + kx as isize - 1;
                            if sx < 0 || sx >= width as isize {
                                continue;
                            }
                            let src = xv.row(base + sy as usize * width + sx as usize);
                            let off = (ky * 3 + kx) * c;
                            row[off..off + c].copy_from_slice(src);
                        }
                    }
                }
            }
        }
        Ok(self.push_op(out, Op::Im2col { x, frames, height, width }, &[x]))
    }

    /// 2x2 stride-2 max pooling over `[frames * H * W, C]`.
    pub fn max_pool2(&mut self, x: NodeId, frames: usize, height: usize, width: usize) -> Result<NodeId> {
        let xv = self.value(x);
        check_shape("max_pool2", (frames * height * width, xv.cols()), xv.shape())?;
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::dim("max_pool2 spatial", "even H and W", format!("{height}x{width}")));
        }
        let c = xv.cols();
        let (oh, ow) = (height / 2, width / 2);
        let mut out = Matrix::zeros(frames * oh * ow, c);
        let mut argmax = vec![0u32; frames * oh * ow * c];
        for f in 0..frames {
            for y in 0..oh {
                for xx in 0..ow {
                    let orow = f * oh * ow + y * ow + xx;
                    for ch in 0..c {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_row = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let r = f * height * width + (2 * y + dy) * width + 2 * xx + dx;
                                let v = xv.get(r, ch);
                                if v > best {
                                    best = v;
                                    best_row = r;
                                }
                            }
                        }
                        out.set(orow, ch, best);
                        argmax[orow * c + ch] = best_row as u32;
                    }
                }
            }
        }
        Ok(self.push_op(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Stacks `times` copies of `x` along the rows.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> NodeId {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len() * times);
        for _ in 0..times {
            data.extend_from_slice(xv.as_slice());
        }
        let out = Matrix::from_vec(xv.rows() * times, xv.cols(), data);
        self.push_op(out, Op::RepeatRows { x, times }, &[x])
    }

    /// Softmax-free attention `scale * (Q Kᵀ) V`, per timestep and head.
    pub fn spike_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, timesteps: usize, heads: usize, scale: f32) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        check_shape("attention k", qv.shape(), kv.shape())?;
        check_shape("attention v", qv.shape(), vv.shape())?;
        let d = qv.cols();
        if heads == 0 || d % heads != 0 || qv.rows() % timesteps != 0 {
            return Err(Error::dim("attention heads", format!("divisor of {d}"), heads));
        }
        let n = qv.rows() / timesteps;
        let dh = d / heads;
        let mut out = Matrix::zeros(qv.rows(), d);
        let mut scores = vec![0.0f32; n * n];
        for t in 0..timesteps {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let qi = &qv.row(t * n + i)[cols.clone()];
                    for j in 0..n {
                        let kj = &kv.row(t * n + j)[cols.clone()];
                        scores[i * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                    }
                }
                for i in 0..n {
                    let mut acc = vec![0.0f32; dh];
                    for j in 0..n {
                        let s = scores[i * n + j];
                        if s == 0.0 {
                            continue;
                        }
                        let vj = &vv.row(t * n + j)[cols.clone()];
                        for (a, b) in acc.iter_mut().zip(vj) {
                            *a += s * b;
                        }
                    }
                    let orow = &mut out.row_mut(t * n + i)[cols.clone()];
                    for (o, a) in orow.iter_mut().zip(&acc) {
                        *o = a * scale;
                    }
                }
            }
        }
        Ok(self.push_op(out, Op::SpikeAttention { q, k, v, timesteps, heads, scale }, &[q, k, v]))
    }

    /// Mean over timesteps: `[T * N, D] -> [N, D]`.
    pub fn temporal_mean(&mut self, x: NodeId, timesteps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if timesteps == 0 || xv.rows() % timesteps != 0 {
            return Err(Error::dim("temporal_mean", format!("divisor of {}", xv.rows()), timesteps));
        }
        let n = xv.rows() / timesteps;
        let mut out = Matrix::zeros(n, xv.cols());
        for t in 0..timesteps {
            for r in 0..n {
                for (o, v) in out.row_mut(r).iter_mut().zip(xv.row(t * n + r)) {
                    *o += v;
                }
            }
        }
        let inv = timesteps as f32;
        for o in out.as_mut_slice() {
            *o /= inv;
        }
        Ok(self.push_op(out, Op::TemporalMean { x, timesteps }, &[x]))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f32::tanh);
        self.push_op(out, Op::Tanh(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push_op(out, Op::SoftmaxRows(x), &[x])
    }

    pub fn column(&mut self, x: NodeId, col: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if col >= xv.cols() {
            return Err(Error::dim("column", format!("< {}", xv.cols()), col));
        }
        let out = Matrix::from_fn(xv.rows(), 1, |r, _| xv.get(r, col));
        Ok(self.push_op(out, Op::Column { x, col }, &[x]))
    }

    /// Relaxed keep probability `sigmoid((ln S0 - ln S1 + noise) / tau)` for `S: [N, 2]`,
    /// where `noise[n] = g0 - g1` is a difference of Gumbel draws.
    pub fn gumbel_keep(&mut self, scores: NodeId, noise: Vec<f32>, tau: f32) -> Result<NodeId> {
        let sv = self.value(scores);
        check_shape("gumbel_keep", (noise.len(), 2), sv.shape())?;
        let out = Matrix::from_fn(sv.rows(), 1, |r, _| {
            let z = (safe_ln(sv.get(r, 0)) - safe_ln(sv.get(r, 1)) + noise[r]) / tau;
            sigmoid(z)
        });
        Ok(self.push_op(out, Op::GumbelKeep { scores, tau }, &[scores]))
    }

    /// Head pooling: mean over masked tokens at each timestep, then mean over time.
    pub fn token_mean_pool(&mut self, x: NodeId, mask: Option<NodeId>, timesteps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if timesteps == 0 || xv.rows() % timesteps != 0 {
            return Err(Error::dim("token_mean_pool", format!("divisor of {}", xv.rows()), timesteps));
        }
        let n = xv.rows() / timesteps;
        let weights: Vec<f32> = match mask {
            Some(m) => {
                let mv = self.value(m);
                check_shape("token_mean_pool mask", (n, 1), mv.shape())?;
                mv.as_slice().to_vec()
            }
            None => vec![1.0; n],
        };
        let total: f32 = weights.iter().sum();
        if n == 0 || total <= 0.0 {
            return Err(Error::EmptyTokenSet);
        }
        let d = xv.cols();
        let mut out = Matrix::zeros(1, d);
        let mut step = vec![0.0f32; d];
        for t in 0..timesteps {
            step.iter_mut().for_each(|s| *s = 0.0);
            for (tok, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for (s, v) in step.iter_mut().zip(xv.row(t * n + tok)) {
                    *s += w * v;
                }
            }
            for (o, s) in out.as_mut_slice().iter_mut().zip(&step) {
                *o += s / total;
            }
        }
        let tf = timesteps as f32;
        for o in out.as_mut_slice() {
            *o /= tf;
        }
        let parents: Vec<NodeId> = std::iter::once(x).chain(mask).collect();
        Ok(self.push_op(out, Op::TokenMeanPool { x, mask, timesteps }, &parents))
    }

    /// Selects token rows `idx` at each timestep of a `[T * total, D]` tensor.
    pub fn gather_tokens(&mut self, x: NodeId, idx: &[usize], timesteps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let total = xv.rows() / timesteps.max(1);
        if timesteps == 0 || total * timesteps != xv.rows() || idx.iter().any(|&i| i >= total) {
            return Err(Error::dim("gather_tokens", format!("indices < {total}"), format!("{idx:?}")));
        }
        let mut out = Matrix::zeros(timesteps * idx.len(), xv.cols());
        for t in 0..timesteps {
            for (j, &i) in idx.iter().enumerate() {
                out.row_mut(t * idx.len() + j).copy_from_slice(xv.row(t * total + i));
            }
        }
        Ok(self.push_op(out, Op::GatherTokens { x, idx: idx.to_vec(), timesteps, total }, &[x]))
    }

    /// Inverse of [`Self::gather_tokens`]; positions not in `idx` are zero.
    pub fn scatter_tokens(&mut self, x: NodeId, idx: &[usize], timesteps: usize, total: usize) -> Result<NodeId> {
        let xv = self.value(x);
        check_shape("scatter_tokens", (timesteps * idx.len(), xv.cols()), xv.shape())?;
        if idx.iter().any(|&i| i >= total) {
            return Err(Error::dim("scatter_tokens", format!("indices < {total}"), format!("{idx:?}")));
        }
        let mut out = Matrix::zeros(timesteps * total, xv.cols());
        for t in 0..timesteps {
            for (j, &i) in idx.iter().enumerate() {
                out.row_mut(t * total + i).copy_from_slice(xv.row(t * idx.len() + j));
            }
        }
        Ok(self.push_op(out, Op::ScatterTokens { x, idx: idx.to_vec(), timesteps }, &[x]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rows() != 1 || label >= lv.cols() {
            return Err(Error::dim("cross_entropy", format!("[1, > {label}]"), format!("{:?}", lv.shape())));
        }
        let row = lv.row(0);
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f32>().ln();
        let out = Matrix::filled(1, 1, lse - row[label]);
        Ok(self.push_op(out, Op::CrossEntropy { logits, label }, &[logits]))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: NodeId, target: Matrix) -> Result<NodeId> {
        check_shape("mse", self.shape(pred), target.shape())?;
        let pv = self.value(pred);
        let s: f32 = pv.as_slice().iter().zip(target.as_slice()).map(|(p, t)| (p - t) * (p - t)).sum();
        let out = Matrix::filled(1, 1, s / pv.len() as f32);
        Ok(self.push_op(out, Op::MeanSquaredError { pred, target }, &[pred]))
    }

    /// `(mean(x) - target)^2`.
    pub fn ratio_penalty(&mut self, x: NodeId, target: f32) -> NodeId {
        let xv = self.value(x);
        let mean = xv.sum() / xv.len().max(1) as f32;
        let out = Matrix::filled(1, 1, (mean - target) * (mean - target));
        self.push_op(out, Op::RatioPenalty { x, target }, &[x])
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f32)>) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in &terms {
            check_shape("weighted_sum", (1, 1), self.shape(id))?;
            total += w * self.value(id).get(0, 0);
        }
        let parents: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        Ok(self.push_op(Matrix::filled(1, 1, total), Op::WeightedSum(terms), &parents))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before the forward pass was recorded".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        self.backward_with_seed(loss, Matrix::filled(1, 1, 1.0))
    }

    pub fn backward_with_seed(&self, root: NodeId, seed: Matrix) -> Result<Gradients> {
        if self.nodes.is_empty() || root.0 >= self.nodes.len() {
            return Err(Error::Usage("backward called before the forward pass was recorded".into()));
        }
        check_shape("backward seed", self.shape(root), seed.shape())?;
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(p) => Some((p, NodeId(i))),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let ga = slot(grads, *a, m, k);
                    matmul_a_bt_acc(g.as_slice(), bv.as_slice(), ga.as_mut_slice(), m, n, k);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, k, n);
                    matmul_at_b_acc(av.as_slice(), g.as_slice(), gb.as_mut_slice(), m, k, n);
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    slot(grads, *x, g.rows(), g.cols()).add_assign(g);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, 1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Affine { x, scale, shift } => {
                let xv = self.value(*x);
                let sv = self.value(*scale);
                let c = g.cols();
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.rows(), c);
                    for r in 0..g.rows() {
                        for ((o, gv), s) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(sv.as_slice()) {
                            *o += gv * s;
                        }
                    }
                }
                if self.wants(*scale) {
                    let mut acc = vec![0.0f32; c];
                    for r in 0..g.rows() {
                        for ((a, gv), xv) in acc.iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                            *a += gv * xv;
                        }
                    }
                    let gs = slot(grads, *scale, 1, c);
                    for (o, a) in gs.as_mut_slice().iter_mut().zip(&acc) {
                        *o += a;
                    }
                }
                if self.wants(*shift) {
                    let gb = slot(grads, *shift, 1, c);
                    for r in 0..g.rows() {
                        for (o, gv) in gb.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Lif { x, timesteps, neuron, surrogate, pre } => {
                if !self.wants(*x) {
                    return;
                }
                let per_step = y.len() / timesteps;
                let spikes = y.as_slice();
                let gs = g.as_slice();
                let gx = slot(grads, *x, y.rows(), y.cols());
                let gxs = gx.as_mut_slice();
                let mut carry = vec![0.0f32; per_step];
                for t in (0..*timesteps).rev() {
                    let base = t * per_step;
                    for (j, c) in carry.iter_mut().enumerate() {
                        let idx = base + j;
                        let spiked = spikes[idx] == 1.0;
                        let dh = gs[idx] * surrogate.derivative(pre[idx] - neuron.threshold)
                            + *c * neuron.reset_passthrough(spiked);
                        gxs[idx] += dh;
                        *c = dh * neuron.decay;
                    }
                }
            }
            Op::Or(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.rows(), g.cols());
                    for ((o, gv), bb) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *o += gv * (1.0 - bb);
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.rows(), g.cols());
                    for ((o, gv), aa) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *o += gv * (1.0 - aa);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, g.rows(), g.cols());
                    for ((o, gv), bb) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *o += gv * bb;
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, g.rows(), g.cols());
                    for ((o, gv), aa) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *o += gv * aa;
                    }
                }
            }
            Op::MaskTokens { x, mask, timesteps } => {
                let (xv, mv) = (self.value(*x), self.value(*mask));
                let n = mv.rows();
                if self.wants(*x) {
                    let gx = slot(grads, *x, g.rows(), g.cols());
                    for t in 0..*timesteps {
                        for tok in 0..n {
                            let m = mv.get(tok, 0);
                            if m == 0.0 {
                                continue;
                            }
                            let r = t * n + tok;
                            for (o, gv) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                                *o += gv * m;
                            }
                        }
                    }
                }
                if self.wants(*mask) {
                    let gm = slot(grads, *mask, n, 1);
                    for t in 0..*timesteps {
                        for tok in 0..n {
                            let r = t * n + tok;
                            let s: f32 = g.row(r).iter().zip(xv.row(r)).map(|(a, b)| a * b).sum();
                            gm.as_mut_slice()[tok] += s;
                        }
                    }
                }
            }
            Op::StraightThrough { soft } => {
                slot(grads, *soft, g.rows(), g.cols()).add_assign(g);
            }
            Op::Im2col { x, frames, height, width } => {
                if !self.wants(*x) {
                    return;
                }
                let c = g.cols() / 9;
                let gx = slot(grads, *x, g.rows(), c);
                for f in 0..*frames {
                    let base = f * height * width;
                    for yy in 0..*height {
                        for xx in 0..*width {
                            let grow = g.row(base + yy * width + xx);
                            for ky in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                if sy < 0 || sy >= *height as isize {
                                    continue;
                                }
                                for kx in 0..3 {
                                    let sx = xx as isize + kx as isize - 1;
                                    if sx < 0 || sx >= *width as isize {
                                        continue;
                                    }
                                    let off = (ky * 3 + kx) * c;
                                    let dst = gx.row_mut(base + sy as usize * width + sx as usize);
                                    for (o, v) in dst.iter_mut().zip(&grow[off..off + c]) {
                                        *o += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let c = g.cols();
                let gx = slot(grads, *x, xs.0, xs.1);
                for (idx, &gv) in g.as_slice().iter().enumerate() {
                    let src = argmax[idx] as usize;
                    gx.as_mut_slice()[src * c + idx % c] += gv;
                }
            }
            Op::RepeatRows { x, times } => {
                if !self.wants(*x) {
                    return;
                }
                let xs = self.shape(*x);
                let gx = slot(grads, *x, xs.0, xs.1);
                let block = xs.0 * xs.1;
                for t in 0..*times {
                    for (o, v) in gx.as_mut_slice().iter_mut().zip(&g.as_slice()[t * block..(t + 1) * block]) {
                        *o += v;
                    }
                }
            }
            Op::SpikeAttention { q, k, v, timesteps, heads, scale } => {
                self.attention_backward(*q, *k, *v, *timesteps, *heads, *scale, g, grads);
            }
            Op::TemporalMean { x, timesteps } => {
                if !self.wants(*x) {
                    return;
                }
                let n = g.rows();
                let inv = 1.0 / *timesteps as f32;
                let gx = slot(grads, *x, n * timesteps, g.cols());
                for t in 0..*timesteps {
                    for r in 0..n {
                        for (o, gv) in gx.row_mut(t * n + r).iter_mut().zip(g.row(r)) {
                            *o += gv * inv;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.rows(), g.cols());
                for ((o, gv), yv) in gx.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                    *o += gv * (1.0 - yv * yv);
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, g.rows(), g.cols());
                for r in 0..g.rows() {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let dotv: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o += yv * (gv - dotv);
                    }
                }
            }
            Op::Column { x, col } => {
                let xs = self.shape(*x);
                let gx = slot(grads, *x, xs.0, xs.1);
                for r in 0..g.rows() {
                    let cur = gx.get(r, *col);
                    gx.set(r, *col, cur + g.get(r, 0));
                }
            }
            Op::GumbelKeep { scores, tau, .. } => {
                let sv = self.value(*scores);
                let gx = slot(grads, *scores, sv.rows(), 2);
                for r in 0..g.rows() {
                    let yv = y.get(r, 0);
                    let common = g.get(r, 0) * yv * (1.0 - yv) / tau;
                    let (s0, s1) = (sv.get(r, 0).max(f32::MIN_POSITIVE), sv.get(r, 1).max(f32::MIN_POSITIVE));
                    gx.set(r, 0, gx.get(r, 0) + common / s0);
                    gx.set(r, 1, gx.get(r, 1) - common / s1);
                }
            }
            Op::TokenMeanPool { x, mask, timesteps } => {
                let xv = self.value(*x);
                let n = xv.rows() / timesteps;
                let weights: Vec<f32> = match mask {
                    Some(m) => self.value(*m).as_slice().to_vec(),
                    None => vec![1.0; n],
                };
                let total: f32 = weights.iter().sum();
                let d = xv.cols();
                let gstep: Vec<f32> = g.row(0).iter().map(|v| v / *timesteps as f32).collect();
                if self.wants(*x) {
                    let gx = slot(grads, *x, xv.rows(), d);
                    for t in 0..*timesteps {
                        for (tok, &w) in weights.iter().enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let f = w / total;
                            for (o, gv) in gx.row_mut(t * n + tok).iter_mut().zip(&gstep) {
                                *o += gv * f;
                            }
                        }
                    }
                }
                if let Some(m) = mask.filter(|m| self.wants(*m)) {
                    let mut acc = vec![0.0f32; n];
                    for t in 0..*timesteps {
                        let mut mean = vec![0.0f32; d];
                        for (tok, &w) in weights.iter().enumerate() {
                            for (s, v) in mean.iter_mut().zip(xv.row(t * n + tok)) {
                                *s += w * v;
                            }
                        }
                        mean.iter_mut().for_each(|s| *s /= total);
                        for (tok, a) in acc.iter_mut().enumerate() {
                            let row = xv.row(t * n + tok);
                            *a += (0..d).map(|c| gstep[c] * (row[c] - mean[c])).sum::<f32>() / total;
                        }
                    }
                    let gm = slot(grads, m, n, 1);
                    for (o, a) in gm.as_mut_slice().iter_mut().zip(&acc) {
                        *o += a;
                    }
                }
            }
            Op::GatherTokens { x, idx, timesteps, total } => {
                if !self.wants(*x) {
                    return;
                }
                let gx = slot(grads, *x, timesteps * total, g.cols());
                for t in 0..*timesteps {
                    for (j, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(t * total + i).iter_mut().zip(g.row(t * idx.len() + j)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterTokens { x, idx, timesteps } => {
                if !self.wants(*x) {
                    return;
                }
                let total = g.rows() / timesteps;
                let gx = slot(grads, *x, timesteps * idx.len(), g.cols());
                for t in 0..*timesteps {
                    for (j, &i) in idx.iter().enumerate() {
                        for (o, v) in gx.row_mut(t * idx.len() + j).iter_mut().zip(g.row(t * total + i)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, label } => {
                let lv = self.value(*logits);
                let mut p = lv.row(0).to_vec();
                softmax_in_place(&mut p);
                p[*label] -= 1.0;
                let s = g.get(0, 0);
                let gl = slot(grads, *logits, 1, lv.cols());
                for (o, v) in gl.as_mut_slice().iter_mut().zip(&p) {
                    *o += s * v;
                }
            }
            Op::MeanSquaredError { pred, target } => {
                let pv = self.value(*pred);
                let s = 2.0 * g.get(0, 0) / pv.len() as f32;
                let gp = slot(grads, *pred, pv.rows(), pv.cols());
                for ((o, p), t) in gp.as_mut_slice().iter_mut().zip(pv.as_slice()).zip(target.as_slice()) {
                    *o += s * (p - t);
                }
            }
            Op::RatioPenalty { x, target } => {
                let xv = self.value(*x);
                let nel = xv.len().max(1) as f32;
                let mean = xv.sum() / nel;
                let s = g.get(0, 0) * 2.0 * (mean - target) / nel;
                let gx = slot(grads, *x, xv.rows(), xv.cols());
                for o in gx.as_mut_slice() {
                    *o += s;
                }
            }
            Op::WeightedSum(terms) => {
                let s = g.get(0, 0);
                for &(id, w) in terms {
                    if self.wants(id) {
                        let gi = slot(grads, id, 1, 1);
                        gi.as_mut_slice()[0] += w * s;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        timesteps: usize,
        heads: usize,
        scale: f32,
        g: &Matrix,
        grads: &mut [Option<Matrix>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let n = qv.rows() / timesteps;
        let dh = d / heads;
        let rows = qv.rows();
        let mut gq = Matrix::zeros(rows, d);
        let mut gk = Matrix::zeros(rows, d);
        let mut gvm = Matrix::zeros(rows, d);
        let mut scores = vec![0.0f32; n * n];
        let mut dscores = vec![0.0f32; n * n];
        for t in 0..timesteps {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    let qi = &qv.row(t * n + i)[cols.clone()];
                    let gi = &g.row(t * n + i)[cols.clone()];
                    for j in 0..n {
                        let kj = &kv.row(t * n + j)[cols.clone()];
                        let vj = &vv.row(t * n + j)[cols.clone()];
                        scores[i * n + j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                        dscores[i * n + j] = scale * gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f32>();
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let ds = dscores[i * n + j];
                        let s = scores[i * n + j];
                        if ds != 0.0 {
                            let kj: Vec<f32> = kv.row(t * n + j)[cols.clone()].to_vec();
                            let qi: Vec<f32> = qv.row(t * n + i)[cols.clone()].to_vec();
                            for (o, kk) in gq.row_mut(t * n + i)[cols.clone()].iter_mut().zip(&kj) {
                                *o += ds * kk;
                            }
                            for (o, qq) in gk.row_mut(t * n + j)[cols.clone()].iter_mut().zip(&qi) {
                                *o += ds * qq;
                            }
                        }
                        if s != 0.0 {
                            let gi: Vec<f32> = g.row(t * n + i)[cols.clone()].to_vec();
                            for (o, gg) in gvm.row_mut(t * n + j)[cols.clone()].iter_mut().zip(&gi) {
                                *o += scale * s * gg;
                            }
                        }
                    }
                }
            }
        }
        for (id, m) in [(q, gq), (k, gk), (v, gvm)] {
            if self.wants(id) {
                slot(grads, id, rows, d).add_assign(&m);
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], id: NodeId, rows: usize, cols: usize) -> &mut Matrix {
    grads[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

#[inline]
pub(crate) fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
fn safe_ln(p: f32) -> f32 {
    p.max(f32::MIN_POSITIVE).ln()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
