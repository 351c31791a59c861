//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in construction order, which is
//! also a topological order. [`Graph::backward`] walks the tape in reverse
//! and accumulates gradients in that fixed order, so results are
//! bit-reproducible.

mod gradcheck;

pub use gradcheck::{grad_check, relative_error, GradReport, InputError, DEFAULT_STEP};

use crate::error::{Error, Result};
use crate::fusion::{check_split, mix_channels, pixel_shift, pixel_shift_adjoint, ShiftSpec};
use crate::norm::{affine, norm_backward, standardize};
use crate::tensor::{
    self, check_labels, conv2d, conv2d_backward, embed_channels, expect_same_shape, slice_zero_based,
    softmax_channels, upsample2x_backward, LabelMap, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv { stride: usize, pad: usize },
    Add,
    Mul,
    Relu,
    Sigmoid,
    Scale(f64),
    Concat,
    Slice { start: usize },
    BatchConcat,
    BatchSlice { lo: usize },
    Mix { split: usize },
    Upsample,
    Shift(ShiftSpec),
    Norm { xhat: Tensor, inv_std: Vec<f64>, batch: bool },
    SoftmaxCe { labels: LabelMap, ignore: Option<u8>, probs: Tensor, count: usize },
    Softmax,
    Mixture,
    Nll { labels: LabelMap, ignore: Option<u8>, count: usize },
    Kl { target: Tensor, q: Tensor },
    Dot { weights: Tensor },
    Sum,
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    relu_margin: f64,
    relu_pattern: u64,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<tensor::Shape>,
}

impl Gradients {
    /// Gradient of `id`; zero when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Tensor {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[id.0]))
    }

    pub fn get_ref(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_margin: f64::INFINITY,
            relu_pattern: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Smallest `|x|` seen at any relu input so far.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Hash of the sign of every relu input so far. Two evaluations with
    /// equal patterns took the same linear piece of every relu.
    pub fn relu_pattern(&self) -> u64 {
        self.relu_pattern
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or input we want gradients for).
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            requires_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant leaf; backward never computes its gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: t,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let y = conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv { stride, pad }, inputs, y))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul, vec![a, b], y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let start = self.relu_margin;
        let v = self.value(x);
        let margin = v.data().iter().fold(start, |m, a| m.min(a.abs()));
        let mut h = self.relu_pattern;
        for &a in v.data() {
            h = (h ^ (a > 0.0) as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let y = tensor::relu(v);
        self.relu_margin = margin;
        self.relu_pattern = h;
        self.push(Op::Relu, vec![x], y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = tensor::sigmoid(self.value(x));
        self.push(Op::Sigmoid, vec![x], y)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let y = tensor::scale(self.value(x), factor);
        self.push(Op::Scale(factor), vec![x], y)
    }

    pub fn channel_concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let y = tensor::channel_concat(self.value(a), self.value(b))?;
        Ok(self.push(Op::Concat, vec![a, b], y))
    }

    /// Channels `lo..=hi`, 1-based inclusive.
    pub fn channel_slice(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let y = tensor::channel_slice(self.value(x), lo, hi)?;
        Ok(self.push(Op::Slice { start: lo - 1 }, vec![x], y))
    }

    /// Stacks tensors along the batch axis.
    pub fn batch_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::stack_batch(&vals)?;
        Ok(self.push(Op::BatchConcat, parts.to_vec(), y))
    }

    /// Samples `[lo, hi)` along the batch axis.
    pub fn batch_slice(&mut self, x: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let y = self.value(x).batch_slice(lo, hi)?;
        Ok(self.push(Op::BatchSlice { lo }, vec![x], y))
    }

    /// Channels `[0, split)` from `a` and `[split, C)` from `b`; one half of
    /// a channel shuffle.
    pub fn mix_channels(&mut self, a: NodeId, b: NodeId, split: usize) -> Result<NodeId> {
        expect_same_shape("channel_shuffle", self.value(a), self.value(b))?;
        check_split(self.value(a), split)?;
        let y = mix_channels(self.value(a), self.value(b), split);
        Ok(self.push(Op::Mix { split }, vec![a, b], y))
    }

    /// Both outputs of a channel shuffle.
    pub fn channel_shuffle(&mut self, a: NodeId, b: NodeId, split: usize) -> Result<(NodeId, NodeId)> {
        Ok((self.mix_channels(a, b, split)?, self.mix_channels(b, a, split)?))
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let y = tensor::upsample2x(self.value(x));
        self.push(Op::Upsample, vec![x], y)
    }

    pub fn pixel_shift(&mut self, x: NodeId, spec: &ShiftSpec) -> Result<NodeId> {
        let y = pixel_shift(self.value(x), spec)?;
        Ok(self.push(Op::Shift(*spec), vec![x], y))
    }

    /// `gamma * (x - mean) / sqrt(var + eps) + beta`. When `batch` is set the
    /// statistics are treated as functions of `x`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        batch: bool,
    ) -> Result<NodeId> {
        let c = self.value(x).c();
        for (id, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(id).shape() != [1, c, 1, 1] {
                return Err(Error::dim("modality_norm", axis, c, self.value(id).len()));
            }
        }
        let (xhat, inv_std) = standardize(self.value(x), mean, var, eps);
        let y = affine(&xhat, self.value(gamma), self.value(beta));
        Ok(self.push(Op::Norm { xhat, inv_std, batch }, vec![x, gamma, beta], y))
    }

    /// Mean softmax cross-entropy over non-ignored pixels (scalar node).
    pub fn softmax_ce(&mut self, logits: NodeId, labels: &LabelMap, ignore: Option<u8>) -> Result<NodeId> {
        let (probs, loss) = tensor::softmax_ce(self.value(logits), labels, ignore)?;
        let count = check_labels("softmax_ce", self.value(logits).shape(), labels, ignore)?;
        Ok(self.push(
            Op::SoftmaxCe {
                labels: labels.clone(),
                ignore,
                probs,
                count,
            },
            vec![logits],
            Tensor::scalar(loss),
        ))
    }

    pub fn softmax(&mut self, logits: NodeId) -> NodeId {
        let y = softmax_channels(self.value(logits));
        self.push(Op::Softmax, vec![logits], y)
    }

    /// `sum_s softmax(w)_s * p_s` where `w` is `1 x S x 1 x 1`.
    pub fn mixture(&mut self, w: NodeId, parts: &[NodeId]) -> Result<NodeId> {
        let wv = self.value(w);
        if wv.shape() != [1, parts.len(), 1, 1] {
            return Err(Error::dim("mixture", "weights", parts.len(), wv.len()));
        }
        let alpha = softmax_vec(wv.data());
        let first = self.value(parts[0]).clone();
        let mut out = vec![0.0; first.len()];
        for (&p, a) in parts.iter().zip(&alpha) {
            expect_same_shape("mixture", &first, self.value(p))?;
            for (o, v) in out.iter_mut().zip(self.value(p).data()) {
                *o += a * v;
            }
        }
        let mut inputs = vec![w];
        inputs.extend_from_slice(parts);
        Ok(self.push(Op::Mixture, inputs, Tensor::from_parts(first.shape(), out)))
    }

    /// `-mean log p[label]` for a probability map.
    pub fn nll(&mut self, probs: NodeId, labels: &LabelMap, ignore: Option<u8>) -> Result<NodeId> {
        let p = self.value(probs);
        let count = check_labels("nll", p.shape(), labels, ignore)?;
        let [_, c, h, w] = p.shape();
        let hw = h * w;
        let mut loss = 0.0;
        for (i, &l) in labels.data.iter().enumerate() {
            if Some(l) == ignore {
                continue;
            }
            let (n, px) = (i / hw, i % hw);
            loss -= p.data()[(n * c + l as usize) * hw + px].ln();
        }
        let loss = if count == 0 { 0.0 } else { loss / count as f64 };
        Ok(self.push(
            Op::Nll {
                labels: labels.clone(),
                ignore,
                count,
            },
            vec![probs],
            Tensor::scalar(loss),
        ))
    }

    /// `KL(target || softmax(logits))` averaged over pixels. `target` is a
    /// constant: no gradient flows into it.
    pub fn kl_to_target(&mut self, logits: NodeId, target: &Tensor) -> Result<NodeId> {
        expect_same_shape("kl", self.value(logits), target)?;
        let q = softmax_channels(self.value(logits));
        let [n_, _, h, w] = q.shape();
        let mut kl = 0.0;
        for (t, qv) in target.data().iter().zip(q.data()) {
            if *t > 0.0 {
                kl += t * (t.ln() - qv.ln());
            }
        }
        let value = Tensor::scalar(kl / (n_ * h * w) as f64);
        Ok(self.push(
            Op::Kl {
                target: target.clone(),
                q,
            },
            vec![logits],
            value,
        ))
    }

    /// `sum(weights * x)` with constant weights.
    pub fn dot(&mut self, x: NodeId, weights: &Tensor) -> Result<NodeId> {
        expect_same_shape("dot", self.value(x), weights)?;
        let v: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(
            Op::Dot {
                weights: weights.clone(),
            },
            vec![x],
            Tensor::scalar(v),
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(v))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.input_grads(node, &g)? {
                if self.nodes[input.0].requires_grad {
                    accumulate(&mut grads[input.0], gi);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn input_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let ins = &node.inputs;
        let val = |k: usize| &self.nodes[ins[k].0].value;
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv { stride, pad } => {
                let grads = conv2d_backward(val(0), val(1), g, *stride, *pad, self.needs(ins[0]))?;
                let mut v = vec![(ins[1], grads.dw)];
                if let Some(dx) = grads.dx {
                    v.push((ins[0], dx));
                }
                if ins.len() == 3 {
                    v.push((ins[2], grads.db));
                }
                v
            }
            Op::Add => vec![(ins[0], g.clone()), (ins[1], g.clone())],
            Op::Mul => vec![
                (ins[0], tensor::mul(g, val(1))?),
                (ins[1], tensor::mul(g, val(0))?),
            ],
            Op::Relu => {
                let x = val(0);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(ins[0], Tensor::from_parts(x.shape(), d))]
            }
            Op::Sigmoid => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                vec![(ins[0], Tensor::from_parts(y.shape(), d))]
            }
            Op::Scale(f) => vec![(ins[0], tensor::scale(g, *f))],
            Op::Concat => {
                let ca = val(0).c();
                vec![
                    (ins[0], slice_zero_based(g, 0, ca)),
                    (ins[1], slice_zero_based(g, ca, g.c())),
                ]
            }
            Op::Slice { start } => vec![(ins[0], embed_channels(val(0).shape(), *start, g))],
            Op::BatchConcat => {
                let mut lo = 0;
                ins.iter()
                    .enumerate()
                    .map(|(i, &id)| {
                        let n = val(i).n();
                        let part = g.batch_slice(lo, lo + n).expect("within the stacked batch");
                        lo += n;
                        (id, part)
                    })
                    .collect()
            }
            Op::BatchSlice { lo } => {
                let src = val(0);
                let per = src.len() / src.n();
                let mut full = Tensor::zeros(src.shape());
                full.data_mut()[lo * per..lo * per + g.len()].copy_from_slice(g.data());
                vec![(ins[0], full)]
            }
            Op::Mix { split } => {
                let s = g.shape();
                vec![
                    (ins[0], embed_channels(s, 0, &slice_zero_based(g, 0, *split))),
                    (ins[1], embed_channels(s, *split, &slice_zero_based(g, *split, s[1]))),
                ]
            }
            Op::Upsample => vec![(ins[0], upsample2x_backward(g))],
            Op::Shift(spec) => vec![(ins[0], pixel_shift_adjoint(g, spec))],
            Op::Norm { xhat, inv_std, batch } => {
                let r = norm_backward(g, xhat, inv_std, val(1), *batch);
                vec![(ins[0], r.dx), (ins[1], r.dgamma), (ins[2], r.dbeta)]
            }
            Op::SoftmaxCe {
                labels,
                ignore,
                probs,
                count,
            } => {
                let scale = if *count == 0 { 0.0 } else { g.item() / *count as f64 };
                let [_, c, h, w] = probs.shape();
                let hw = h * w;
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.data.iter().enumerate() {
                    let (n, px) = (i / hw, i % hw);
                    if Some(l) == *ignore {
                        for k in 0..c {
                            d[(n * c + k) * hw + px] = 0.0;
                        }
                    } else {
                        d[(n * c + l as usize) * hw + px] -= 1.0;
                    }
                }
                d.iter_mut().for_each(|v| *v *= scale);
                vec![(ins[0], Tensor::from_parts(probs.shape(), d))]
            }
            Op::Softmax => {
                let p = &node.value;
                let [n_, c, h, w] = p.shape();
                let hw = h * w;
                let mut d = vec![0.0; p.len()];
                for n in 0..n_ {
                    for px in 0..hw {
                        let idx = |k: usize| (n * c + k) * hw + px;
                        let dotp: f64 = (0..c).map(|k| g.data()[idx(k)] * p.data()[idx(k)]).sum();
                        for k in 0..c {
                            d[idx(k)] = p.data()[idx(k)] * (g.data()[idx(k)] - dotp);
                        }
                    }
                }
                vec![(ins[0], Tensor::from_parts(p.shape(), d))]
            }
            Op::Mixture => {
                let alpha = softmax_vec(val(0).data());
                let parts = &ins[1..];
                let dalpha: Vec<f64> = parts
                    .iter()
                    .map(|p| {
                        self.nodes[p.0]
                            .value
                            .data()
                            .iter()
                            .zip(g.data())
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();
                let mean: f64 = alpha.iter().zip(&dalpha).map(|(a, d)| a * d).sum();
                let dw: Vec<f64> = alpha.iter().zip(&dalpha).map(|(a, d)| a * (d - mean)).collect();
                let mut v = vec![(ins[0], Tensor::from_parts(val(0).shape(), dw))];
                for (p, a) in parts.iter().zip(&alpha) {
                    v.push((*p, tensor::scale(g, *a)));
                }
                v
            }
            Op::Nll { labels, ignore, count } => {
                let p = val(0);
                let [_, c, h, w] = p.shape();
                let hw = h * w;
                let mut d = vec![0.0; p.len()];
                if *count > 0 {
                    let scale = g.item() / *count as f64;
                    for (i, &l) in labels.data.iter().enumerate() {
                        if Some(l) == *ignore {
                            continue;
                        }
                        let idx = ((i / hw) * c + l as usize) * hw + i % hw;
                        d[idx] = -scale / p.data()[idx];
                    }
                }
                vec![(ins[0], Tensor::from_parts(p.shape(), d))]
            }
            Op::Kl { target, q } => {
                let [n_, _, h, w] = q.shape();
                let scale = g.item() / (n_ * h * w) as f64;
                let d = q
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(qv, t)| scale * (qv - t))
                    .collect();
                vec![(ins[0], Tensor::from_parts(q.shape(), d))]
            }
            Op::Dot { weights } => vec![(ins[0], tensor::scale(weights, g.item()))],
            Op::Sum => vec![(ins[0], Tensor::full(val(0).shape(), g.item()))],
        };
        Ok(out)
    }
}

pub(crate) fn softmax_vec(w: &[f64]) -> Vec<f64> {
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}
