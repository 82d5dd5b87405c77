//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar result walks the tape in reverse and
//! accumulates gradients into every node that requires them. A tape is owned
//! by one thread from construction through backward.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Dim, Error, Result};
use crate::math;
use crate::ops::{self, Activation, BatchStats};
use crate::params::{BnUpdate, ParamId, ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        var: Vec<f64>,
        eps: f64,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    Concat(Vec<Var>),
    ChannelSlice {
        x: Var,
        start: usize,
    },
    Softmax(Var),
    Matmul(Var, Var),
    Transpose(Var),
    Tokens {
        x: Var,
        n: usize,
    },
    FromTokens(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Tensor,
        scale: f64,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale {
        x: Var,
        factor: f64,
    },
    Mix {
        a: Var,
        b: Var,
        logit: Var,
    },
    Sum(Var),
    Bce {
        logits: Var,
        targets: Tensor,
    },
    MaskedL1 {
        pred: Var,
        target: Tensor,
        mask: Tensor,
        norm: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. See the module docs.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Var>,
    track_params: bool,
    relu_margin: f64,
    bn_updates: Vec<BnUpdate>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A tape whose parameter leaves require gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            track_params: true,
            relu_margin: f64::INFINITY,
            bn_updates: Vec::new(),
        }
    }

    /// A tape that treats parameters as constants (inference).
    pub fn inference() -> Self {
        Tape {
            track_params: false,
            ..Self::new()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf holding `value`; `requires_grad` controls whether it receives a gradient.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Leaf for a stored parameter. Repeated calls return the same `Var`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let rg = self.track_params && store.kind(id) == ParamKind::Learnable;
        let v = self.push(store.get(id).clone(), Op::Leaf, rg);
        self.params.insert(id, v);
        v
    }

    /// Smallest `|x|` seen at any ReLU input so far. Finite-difference checks
    /// use this to reject points that sit too close to the kink.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    pub fn record_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let out = ops::conv2d(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let rg = self.rg(x) || self.rg(kernel) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Normalization with fixed statistics (`mean`, `var` are constants).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let out = ops::batchnorm_eval(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            mean,
            var,
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                var: var.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Normalization with batch statistics; gradients flow through them.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (out, xhat, stats) = ops::batchnorm_train(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                var: stats.var.clone(),
                eps,
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::None {
            return x;
        }
        if kind == Activation::Relu {
            let m = self
                .value(x)
                .data()
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.abs()));
            self.relu_margin = self.relu_margin.min(m);
        }
        let out = ops::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(out, Op::Activation { x, kind }, rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let out = ops::upsample_nearest2x(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Upsample2x(x), rg)
    }

    pub fn downsample_avg2x(&mut self, x: Var) -> Result<Var> {
        let out = ops::downsample_avg2x(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Downsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::concat_channels(&values)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn channel_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let c = self.shape(x).c;
        if len == 0 || start + len > c {
            return Err(Error::ShapeMismatch {
                op: "channel_slice",
                dim: Dim::Channels,
                expected: start + len,
                found: c,
            });
        }
        let out = ops::channel_slice(self.value(x), start, len);
        let rg = self.rg(x);
        Ok(self.push(out, Op::ChannelSlice { x, start }, rg))
    }

    pub fn split_channels(&mut self, x: Var, h: usize) -> Result<Vec<Var>> {
        let c = self.shape(x).c;
        if h == 0 || !c.is_multiple_of(h) {
            return Err(Error::Indivisible {
                op: "split_channels",
                dim: Dim::Channels,
                size: c,
                divisor: h,
            });
        }
        if h == 1 {
            return Ok(vec![x]);
        }
        let d = c / h;
        (0..h).map(|i| self.channel_slice(x, i * d, d)).collect()
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let out = ops::softmax_lastdim(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = ops::transpose(self.value(x))?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    /// Batch element `n` as an `(H*W, C)` token matrix.
    pub fn to_tokens(&mut self, x: Var, n: usize) -> Var {
        let out = ops::to_tokens(self.value(x), n);
        let rg = self.rg(x);
        self.push(out, Op::Tokens { x, n }, rg)
    }

    pub fn from_tokens(&mut self, parts: &[Var], h: usize, w: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = ops::from_tokens(&values, h, w)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::FromTokens(parts.to_vec()), rg))
    }

    /// Fused `softmax(q kᵀ * scale) v`. Only the attention matrix is retained.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (out, probs) = ops::attention(self.value(q), self.value(k), self.value(v), scale)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
            rg,
        ))
    }

    /// Attention matrix retained by an [`Tape::attention`] node.
    pub fn attention_probs(&self, v: Var) -> Option<&Tensor> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    /// `alpha * a + beta * b` with `(alpha, beta) = convex_pair(logit)`;
    /// `logit` is a scalar var.
    pub fn mix(&mut self, a: Var, b: Var, logit: Var) -> Result<Var> {
        let ls = self.shape(logit);
        if ls != Shape::scalar() {
            return Err(Error::NonScalarRoot(ls));
        }
        let (alpha, beta) = math::convex_pair(self.value(logit).item());
        let out = self
            .value(a)
            .zip_map(self.value(b), |x, y| alpha * x + beta * y)?;
        let rg = self.rg(a) || self.rg(b) || self.rg(logit);
        Ok(self.push(out, Op::Mix { a, b, logit }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Sum of `x ⊙ weights` as a scalar.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let w = self.constant(weights.clone());
        let prod = self.mul(x, w)?;
        Ok(self.sum(prod))
    }

    /// Mean binary cross-entropy between `logits` and fixed `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Result<Var> {
        let loss = ops::bce_with_logits(self.value(logits), &targets)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, targets }, rg))
    }

    /// `sum(mask * |pred - target|) / norm`.
    pub fn masked_l1(&mut self, pred: Var, target: Tensor, mask: Tensor, norm: f64) -> Result<Var> {
        let p = self.value(pred);
        target.shape().expect("masked_l1 target", &p.shape())?;
        mask.shape().expect("masked_l1 mask", &p.shape())?;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .zip(mask.data())
            .map(|((p, t), m)| m * (p - t).abs())
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            },
            rg,
        ))
    }

    /// Reverse accumulation from a scalar `root`. Afterwards [`Tape::grad`]
    /// returns `d root / d leaf` for every leaf that requires a gradient.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let shape = self.shape(root);
        if shape != Shape::scalar() {
            return Err(Error::NonScalarRoot(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(());
        }
        self.grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            for (target, contribution) in self.vjp(i, &g) {
                if !self.nodes[target.0].requires_grad {
                    continue;
                }
                match &mut self.grads[target.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.grad(v))
    }

    /// Every parameter leaf bound on this tape, in id order.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&id, &v)| (id, v))
    }

    fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (dx, dw, db) =
                    ops::conv2d_backward(val(*x), val(*kernel), g, *stride, *padding);
                let mut out = vec![(*x, dx), (*kernel, dw)];
                if let Some(b) = bias {
                    let db = db.reshape(val(*b).shape()).expect("bias volume");
                    out.push((*b, db));
                }
                out
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    ops::batchnorm_eval_backward(val(*x), val(*gamma).data(), mean, var, *eps, g);
                vec![
                    (*x, dx),
                    (*gamma, like(val(*gamma), dg)),
                    (*beta, like(val(*beta), db)),
                ]
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    ops::batchnorm_train_backward(xhat, val(*gamma).data(), var, *eps, g);
                vec![
                    (*x, dx),
                    (*gamma, like(val(*gamma), dg)),
                    (*beta, like(val(*beta), db)),
                ]
            }
            Op::Activation { x, kind } => vec![(*x, ops::activation_backward(val(*x), *kind, g))],
            Op::Upsample2x(x) => vec![(*x, ops::upsample_nearest2x_backward(g))],
            Op::Downsample2x(x) => vec![(*x, ops::downsample_avg2x_backward(g))],
            Op::Concat(parts) => {
                let mut start = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let c = val(p).shape().c;
                        let slice = ops::channel_slice(g, start, c);
                        start += c;
                        (p, slice)
                    })
                    .collect()
            }
            Op::ChannelSlice { x, start } => {
                let xs = val(*x).shape();
                let gs = g.shape();
                let mut dx = Tensor::zeros(xs);
                for n in 0..xs.n {
                    for c in 0..gs.c {
                        dx.plane_mut(n, start + c).copy_from_slice(g.plane(n, c));
                    }
                }
                vec![(*x, dx)]
            }
            Op::Softmax(x) => vec![(*x, ops::softmax_backward(&self.nodes[i].value, g))],
            Op::Matmul(a, b) => {
                let (da, db) = ops::matmul_backward(val(*a), val(*b), g);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(x) => vec![(*x, ops::transpose(g).expect("matrix"))],
            Op::Tokens { x, n } => {
                let xs = val(*x).shape();
                let mut dx = Tensor::zeros(xs);
                for c in 0..xs.c {
                    for (t, d) in dx.plane_mut(*n, c).iter_mut().enumerate() {
                        *d = g.data()[t * xs.c + c];
                    }
                }
                vec![(*x, dx)]
            }
            Op::FromTokens(parts) => parts
                .iter()
                .enumerate()
                .map(|(n, &p)| (p, ops::to_tokens(g, n)))
                .collect(),
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let (dq, dk, dv) =
                    ops::attention_backward(val(*q), val(*k), val(*v), probs, *scale, g);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |g, y| g * y).expect("shape")),
                (*b, g.zip_map(val(*a), |g, x| g * x).expect("shape")),
            ],
            Op::Scale { x, factor } => vec![(*x, g.map(|v| v * factor))],
            Op::Mix { a, b, logit } => {
                let (alpha, beta) = math::convex_pair(val(*logit).item());
                let diff: f64 = g
                    .data()
                    .iter()
                    .zip(val(*a).data().iter().zip(val(*b).data()))
                    .map(|(g, (x, y))| g * (x - y))
                    .sum();
                vec![
                    (*a, g.map(|v| v * alpha)),
                    (*b, g.map(|v| v * beta)),
                    (*logit, Tensor::scalar(alpha * beta * diff)),
                ]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Bce { logits, targets } => {
                let z = val(*logits);
                let k = g.item() / z.len() as f64;
                let d = z
                    .zip_map(targets, |z, y| k * (math::sigmoid(z) - y))
                    .expect("shape");
                vec![(*logits, d)]
            }
            Op::MaskedL1 {
                pred,
                target,
                mask,
                norm,
            } => {
                let k = g.item() / norm;
                let p = val(*pred);
                let mut d = p.zip_map(target, |p, t| k * sign(p - t)).expect("shape");
                for (v, m) in d.data_mut().iter_mut().zip(mask.data()) {
                    *v *= m;
                }
                vec![(*pred, d)]
            }
        }
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::from_vec(t.shape(), data).expect("per-channel parameter volume")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
