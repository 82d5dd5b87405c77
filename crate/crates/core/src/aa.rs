//! Adaptive attention (AA) block.
//!
//! The input `(N, C, H, W)` is split into `h` channel groups of width
//! `d = C / h`. Head `i` runs scaled dot-product self-attention over the
//! `H * W` spatial positions of its input; the input of head `i + 1` is the
//! fusion of head `i`'s output with split `i + 1`. The `h` head outputs are
//! concatenated and mapped back to `C` channels by a bias-free per-position
//! projection.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Dim, Error, Result};
use crate::math;
use crate::params::{fan_in_uniform, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// How a head's output is merged into the next head's input split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum FusionMode {
    /// `alpha * prev + beta * next`, `alpha = sigmoid(logit)`, `beta = 1 - alpha`.
    #[default]
    Adaptive,
    Average,
    Add,
    /// Channel concat followed by a learned `2d -> d` projection.
    Concat,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Adaptive,
        FusionMode::Average,
        FusionMode::Add,
        FusionMode::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Adaptive => "adaptive",
            FusionMode::Average => "average",
            FusionMode::Add => "add",
            FusionMode::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s.trim()))
    }
}

impl core::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AaConfig {
    pub channels: usize,
    pub heads: usize,
    /// Query/key width; `None` means `max(1, d / 2)`.
    pub qk_dim: Option<usize>,
    pub fusion: FusionMode,
}

impl AaConfig {
    pub fn new(channels: usize, heads: usize, fusion: FusionMode) -> Self {
        AaConfig {
            channels,
            heads,
            qk_dim: None,
            fusion,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads.max(1)
    }

    pub fn qk_dim(&self) -> usize {
        self.qk_dim.unwrap_or_else(|| (self.head_dim() / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Indivisible {
                op: "aa_block",
                dim: Dim::Channels,
                size: self.channels,
                divisor: self.heads,
            });
        }
        if self.qk_dim() == 0 {
            return Err(Error::InvalidConfig("qk_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-head projections, stored as `(1, 1, rows, cols)` matrices applied to
/// row-vector tokens: `Q = X W_q` with `W_q: (d, d_qk)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AaHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

/// Parameter handles of one AA block.
///
/// `w_p` and `concat_fuse` are stored as 1x1 convolution kernels
/// `(out, in, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AaBlock {
    pub config: AaConfig,
    pub heads: Vec<AaHead>,
    pub w_p: ParamId,
    /// One logit per cascade boundary (`h - 1` of them).
    pub alpha_logits: Vec<ParamId>,
    /// One `(d, 2d, 1, 1)` kernel per boundary; only in concat mode.
    pub concat_fuse: Vec<ParamId>,
}

/// Everything [`AaBlock::forward_detailed`] produces.
#[derive(Debug, Clone)]
pub struct AaTrace {
    pub output: Var,
    /// Head inputs `FF'_i` after cascading.
    pub head_inputs: Vec<Var>,
    /// Head outputs `~FF_i`.
    pub head_outputs: Vec<Var>,
}

impl AaBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: AaConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.head_dim();
        let dqk = config.qk_dim();
        let c = config.channels;
        let heads = (0..config.heads)
            .map(|i| AaHead {
                w_q: store.add(
                    format!("{prefix}.head{i}.w_q"),
                    ParamKind::Learnable,
                    fan_in_uniform(Shape::matrix(d, dqk), d, rng),
                ),
                w_k: store.add(
                    format!("{prefix}.head{i}.w_k"),
                    ParamKind::Learnable,
                    fan_in_uniform(Shape::matrix(d, dqk), d, rng),
                ),
                w_v: store.add(
                    format!("{prefix}.head{i}.w_v"),
                    ParamKind::Learnable,
                    fan_in_uniform(Shape::matrix(d, d), d, rng),
                ),
            })
            .collect();
        let w_p = store.add(
            format!("{prefix}.w_p"),
            ParamKind::Learnable,
            fan_in_uniform(Shape::new(c, c, 1, 1), c, rng),
        );
        let alpha_logits = (1..config.heads)
            .map(|i| {
                store.add(
                    format!("{prefix}.alpha_logit{i}"),
                    ParamKind::Learnable,
                    Tensor::scalar(0.0),
                )
            })
            .collect();
        let concat_fuse = if config.fusion == FusionMode::Concat {
            (1..config.heads)
                .map(|i| {
                    store.add(
                        format!("{prefix}.concat_fuse{i}"),
                        ParamKind::Learnable,
                        fan_in_uniform(Shape::new(d, 2 * d, 1, 1), 2 * d, rng),
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Ok(AaBlock {
            config,
            heads,
            w_p,
            alpha_logits,
            concat_fuse,
        })
    }

    /// `alpha` and `beta` at every boundary, read from the store.
    pub fn fusion_weights(&self, store: &ParamStore) -> Vec<(f64, f64)> {
        self.alpha_logits
            .iter()
            .map(|&id| math::convex_pair(store.get(id).item()))
            .collect()
    }

    /// Self-attention of head `index` over the spatial positions of `x: (N, d, H, W)`.
    pub fn head_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        index: usize,
        x: Var,
    ) -> Result<Var> {
        let s = tape.shape(x);
        let d = self.config.head_dim();
        if s.c != d {
            return Err(Error::ShapeMismatch {
                op: "head_attention",
                dim: Dim::Channels,
                expected: d,
                found: s.c,
            });
        }
        let head = &self.heads[index];
        let wq = tape.param(store, head.w_q);
        let wk = tape.param(store, head.w_k);
        let wv = tape.param(store, head.w_v);
        let scale = 1.0 / math::sqrt(self.config.qk_dim() as f64);
        let mut outs = Vec::with_capacity(s.n);
        for n in 0..s.n {
            let tokens = tape.to_tokens(x, n);
            let q = tape.matmul(tokens, wq)?;
            let k = tape.matmul(tokens, wk)?;
            let v = tape.matmul(tokens, wv)?;
            outs.push(tape.attention(q, k, v, scale)?);
        }
        tape.from_tokens(&outs, s.h, s.w)
    }

    /// Input of the head after `boundary` (1-based), from the previous head's
    /// output and the next raw split.
    pub fn cascade_fuse(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mode: FusionMode,
        boundary: usize,
        prev: Var,
        next: Var,
    ) -> Result<Var> {
        tape.shape(next).expect("cascade_fuse", &tape.shape(prev))?;
        match mode {
            FusionMode::Adaptive => {
                let logit = tape.param(store, self.alpha_logits[boundary - 1]);
                tape.mix(prev, next, logit)
            }
            FusionMode::Average => {
                let sum = tape.add(prev, next)?;
                Ok(tape.scale(sum, 0.5))
            }
            FusionMode::Add => tape.add(prev, next),
            FusionMode::Concat => {
                let id = *self.concat_fuse.get(boundary - 1).ok_or_else(|| {
                    Error::InvalidConfig("concat fusion requires concat_fuse parameters".into())
                })?;
                let cat = tape.concat_channels(&[prev, next])?;
                let k = tape.param(store, id);
                tape.conv2d(cat, k, None, 1, 0)
            }
        }
    }

    pub fn forward_detailed(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<AaTrace> {
        let s = tape.shape(x);
        if s.c != self.config.channels {
            return Err(Error::ShapeMismatch {
                op: "aa_forward",
                dim: Dim::Channels,
                expected: self.config.channels,
                found: s.c,
            });
        }
        let splits = tape.split_channels(x, self.config.heads)?;
        let mut head_inputs = Vec::with_capacity(splits.len());
        let mut head_outputs = Vec::with_capacity(splits.len());
        let mut input = splits[0];
        for i in 0..splits.len() {
            if i > 0 {
                let prev = head_outputs[i - 1];
                input = self.cascade_fuse(tape, store, self.config.fusion, i, prev, splits[i])?;
            }
            head_inputs.push(input);
            head_outputs.push(self.head_attention(tape, store, i, input)?);
        }
        let cat = tape.concat_channels(&head_outputs)?;
        let wp = tape.param(store, self.w_p);
        let output = tape.conv2d(cat, wp, None, 1, 0)?;
        Ok(AaTrace {
            output,
            head_inputs,
            head_outputs,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_detailed(tape, store, x)?.output)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, v)?;
        Ok(tape.value(out).clone())
    }
}
