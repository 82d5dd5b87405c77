//! Convolution + batch normalization + activation units (CBR / CBS).

use alloc::format;

use rand::Rng;

use crate::error::{Dim, Error, Result};
use crate::ops::{self, Activation};
use crate::params::{fan_in_uniform, BnUpdate, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Whether normalization uses stored or batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    Train,
    #[default]
    Eval,
}

/// Geometry and activation of a [`ConvBnAct`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activation: Activation,
}

impl ConvSpec {
    /// Stride 1, "same" padding for odd kernels.
    pub fn same(c_in: usize, c_out: usize, kernel: usize, activation: Activation) -> Self {
        ConvSpec {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: kernel / 2,
            activation,
        }
    }
}

/// One conv → BN → activation unit whose tensors live in a [`ParamStore`].
///
/// Stored tensors: `kernel (C_out, C_in, k, k)`, `bias`, `bn_gamma`,
/// `bn_beta` (learnable) and `bn_mean`, `bn_var` (buffers), each per-channel
/// vector shaped `(1, 1, 1, C_out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnAct {
    pub spec: ConvSpec,
    pub bn_eps: f64,
    pub kernel: ParamId,
    pub bias: ParamId,
    pub bn_gamma: ParamId,
    pub bn_beta: ParamId,
    pub bn_mean: ParamId,
    pub bn_var: ParamId,
}

pub(crate) fn channel_vec(c: usize) -> Shape {
    Shape::new(1, 1, 1, c)
}

impl ConvBnAct {
    pub const DEFAULT_EPS: f64 = 1e-5;

    /// Registers the unit's tensors under `prefix`. Kernels are drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; BN starts at identity statistics.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if spec.c_in == 0 || spec.c_out == 0 || spec.kernel == 0 || spec.stride == 0 {
            return Err(Error::InvalidConfig(format!(
                "{prefix}: conv dimensions must be positive"
            )));
        }
        let fan_in = spec.c_in * spec.kernel * spec.kernel;
        let kshape = Shape::new(spec.c_out, spec.c_in, spec.kernel, spec.kernel);
        let cv = channel_vec(spec.c_out);
        let kernel = store.add(
            format!("{prefix}.kernel"),
            ParamKind::Learnable,
            fan_in_uniform(kshape, fan_in, rng),
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            ParamKind::Learnable,
            Tensor::zeros(cv),
        );
        let bn_gamma = store.add(
            format!("{prefix}.bn_gamma"),
            ParamKind::Learnable,
            Tensor::ones(cv),
        );
        let bn_beta = store.add(
            format!("{prefix}.bn_beta"),
            ParamKind::Learnable,
            Tensor::zeros(cv),
        );
        let bn_mean = store.add(
            format!("{prefix}.bn_mean"),
            ParamKind::Buffer,
            Tensor::zeros(cv),
        );
        let bn_var = store.add(
            format!("{prefix}.bn_var"),
            ParamKind::Buffer,
            Tensor::ones(cv),
        );
        Ok(ConvBnAct {
            spec,
            bn_eps: Self::DEFAULT_EPS,
            kernel,
            bias,
            bn_gamma,
            bn_beta,
            bn_mean,
            bn_var,
        })
    }

    pub fn c_in(&self) -> usize {
        self.spec.c_in
    }

    pub fn c_out(&self) -> usize {
        self.spec.c_out
    }

    fn check_input(&self, shape: Shape) -> Result<()> {
        if shape.c != self.spec.c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                dim: Dim::Channels,
                expected: self.spec.c_in,
                found: shape.c,
            });
        }
        Ok(())
    }

    /// Full unit on the tape. Train mode records a running-statistics update.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: BnMode,
    ) -> Result<Var> {
        self.check_input(tape.shape(x))?;
        let k = tape.param(store, self.kernel);
        let b = tape.param(store, self.bias);
        let conv = tape.conv2d(x, k, Some(b), self.spec.stride, self.spec.padding)?;
        let gamma = tape.param(store, self.bn_gamma);
        let beta = tape.param(store, self.bn_beta);
        let normed = match mode {
            BnMode::Eval => tape.batchnorm_eval(
                conv,
                gamma,
                beta,
                store.get(self.bn_mean).data(),
                store.get(self.bn_var).data(),
                self.bn_eps,
            )?,
            BnMode::Train => {
                let (v, stats) = tape.batchnorm_train(conv, gamma, beta, self.bn_eps)?;
                tape.record_bn_update(BnUpdate {
                    mean: self.bn_mean,
                    var: self.bn_var,
                    stats,
                });
                v
            }
        };
        Ok(tape.activation(normed, self.spec.activation))
    }

    /// Convolution constituent only.
    pub fn conv(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        ops::conv2d(
            x,
            store.get(self.kernel),
            Some(store.get(self.bias)),
            self.spec.stride,
            self.spec.padding,
        )
    }

    /// Normalization constituent only. Train mode folds the batch statistics
    /// into the running buffers with `momentum`.
    pub fn batchnorm(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        mode: BnMode,
        momentum: f64,
    ) -> Result<Tensor> {
        let gamma = store.get(self.bn_gamma).data();
        let beta = store.get(self.bn_beta).data();
        match mode {
            BnMode::Eval => ops::batchnorm_eval(
                x,
                gamma,
                beta,
                store.get(self.bn_mean).data(),
                store.get(self.bn_var).data(),
                self.bn_eps,
            ),
            BnMode::Train => {
                let (out, _, stats) = ops::batchnorm_train(x, gamma, beta, self.bn_eps)?;
                store.apply_bn_update(
                    &BnUpdate {
                        mean: self.bn_mean,
                        var: self.bn_var,
                        stats,
                    },
                    momentum,
                );
                Ok(out)
            }
        }
    }

    /// Forward pass outside any tape, with stored statistics.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, v, BnMode::Eval)?;
        Ok(tape.value(out).clone())
    }

    /// Sets the kernel to a channel identity (requires `c_in == c_out`,
    /// kernel centre tap only), zero bias and identity BN statistics.
    pub fn set_identity(&self, store: &mut ParamStore) {
        let k = self.spec.kernel;
        let centre = k / 2;
        let kshape = store.get(self.kernel).shape();
        store.set(
            self.kernel,
            Tensor::from_fn(kshape, |o, i, y, x| {
                if o == i && y == centre && x == centre {
                    1.0
                } else {
                    0.0
                }
            }),
        );
        let cv = channel_vec(self.spec.c_out);
        store.set(self.bias, Tensor::zeros(cv));
        store.set(self.bn_gamma, Tensor::ones(cv));
        store.set(self.bn_beta, Tensor::zeros(cv));
        store.set(self.bn_mean, Tensor::zeros(cv));
        store.set(self.bn_var, Tensor::ones(cv));
    }
}
