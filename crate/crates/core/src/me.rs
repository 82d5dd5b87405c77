//! Multi-hierarchical enhanced (ME) block.
//!
//! Brings the shallow `(C/2, 2H, 2W)` and deep `(2C, H/2, W/2)` neighbours of
//! a pyramid level to the current level's `(C, H, W)`, concatenates
//! `[shallow, current, deep]` along channels and fuses them back to `C`
//! channels with one more CBR unit.
//!
//! The shallow branch is average-pooled and the deep branch is
//! nearest-upsampled after their channel projections: those are the only
//! resampling directions that produce `(C, H, W)` from the neighbour shapes.

use alloc::format;

use rand::Rng;

use crate::error::{Dim, Error, Result};
use crate::layers::{BnMode, ConvBnAct, ConvSpec};
use crate::ops::Activation;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeConfig {
    /// Channels `C` of the current level.
    pub channels: usize,
    pub has_shallow: bool,
    pub has_deep: bool,
    /// Kernel of the three per-branch projections.
    pub branch_kernel: usize,
    /// Kernel of the fusion unit after concatenation.
    pub fuse_kernel: usize,
}

impl MeConfig {
    pub fn new(channels: usize, has_shallow: bool, has_deep: bool) -> Self {
        MeConfig {
            channels,
            has_shallow,
            has_deep,
            branch_kernel: 1,
            fuse_kernel: 3,
        }
    }

    /// Number of concatenated branches feeding the fusion unit.
    pub fn branches(&self) -> usize {
        1 + usize::from(self.has_shallow) + usize::from(self.has_deep)
    }
}

/// Parameter handles of one ME block.
#[derive(Debug, Clone, PartialEq)]
pub struct MeBlock {
    pub config: MeConfig,
    pub cbr_cur: ConvBnAct,
    pub cbr_shallow: Option<ConvBnAct>,
    pub cbr_deep: Option<ConvBnAct>,
    pub cbr_fuse: ConvBnAct,
}

impl MeBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: MeConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = config.channels;
        if c == 0 || (config.has_shallow && !c.is_multiple_of(2)) {
            return Err(Error::InvalidConfig(format!(
                "{prefix}: ME channels must be positive (and even with a shallow branch), got {c}"
            )));
        }
        let bk = config.branch_kernel;
        let relu = Activation::Relu;
        let cbr_cur = ConvBnAct::new(
            store,
            &format!("{prefix}.cbr_cur"),
            ConvSpec::same(c, c, bk, relu),
            rng,
        )?;
        let cbr_shallow = config
            .has_shallow
            .then(|| {
                ConvBnAct::new(
                    store,
                    &format!("{prefix}.cbr_shallow"),
                    ConvSpec::same(c / 2, c, bk, relu),
                    rng,
                )
            })
            .transpose()?;
        let cbr_deep = config
            .has_deep
            .then(|| {
                ConvBnAct::new(
                    store,
                    &format!("{prefix}.cbr_deep"),
                    ConvSpec::same(2 * c, c, bk, relu),
                    rng,
                )
            })
            .transpose()?;
        let cbr_fuse = ConvBnAct::new(
            store,
            &format!("{prefix}.cbr_fuse"),
            ConvSpec::same(config.branches() * c, c, config.fuse_kernel, relu),
            rng,
        )?;
        Ok(MeBlock {
            config,
            cbr_cur,
            cbr_shallow,
            cbr_deep,
            cbr_fuse,
        })
    }

    fn expect_dim(op: &'static str, dim: Dim, expected: usize, found: usize) -> Result<()> {
        if expected != found {
            return Err(Error::ShapeMismatch {
                op,
                dim,
                expected,
                found,
            });
        }
        Ok(())
    }

    /// `CBR(F_i)`; shape preserved.
    pub fn unify_current(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cur: Var,
        mode: BnMode,
    ) -> Result<Var> {
        Self::expect_dim(
            "unify_current",
            Dim::Channels,
            self.config.channels,
            tape.shape(cur).c,
        )?;
        self.cbr_cur.forward(tape, store, cur, mode)
    }

    /// `Downsample(CBR(F_{i-1}))`: `(N, C/2, 2H, 2W) -> (N, C, H, W)`.
    pub fn unify_shallow(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        shallow: Var,
        current: Shape,
        mode: BnMode,
    ) -> Result<Var> {
        let cbr = self.cbr_shallow.as_ref().ok_or_else(|| {
            Error::InvalidConfig("ME block was built without a shallow branch".into())
        })?;
        let s = tape.shape(shallow);
        let op = "unify_shallow";
        Self::expect_dim(op, Dim::Batch, current.n, s.n)?;
        Self::expect_dim(op, Dim::Channels, self.config.channels / 2, s.c)?;
        Self::expect_dim(op, Dim::Height, 2 * current.h, s.h)?;
        Self::expect_dim(op, Dim::Width, 2 * current.w, s.w)?;
        let projected = cbr.forward(tape, store, shallow, mode)?;
        tape.downsample_avg2x(projected)
    }

    /// `Upsample(CBR(F_{i+1}))`: `(N, 2C, H/2, W/2) -> (N, C, H, W)`.
    pub fn unify_deep(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        deep: Var,
        current: Shape,
        mode: BnMode,
    ) -> Result<Var> {
        let cbr = self.cbr_deep.as_ref().ok_or_else(|| {
            Error::InvalidConfig("ME block was built without a deep branch".into())
        })?;
        let s = tape.shape(deep);
        let op = "unify_deep";
        Self::expect_dim(op, Dim::Batch, current.n, s.n)?;
        Self::expect_dim(op, Dim::Channels, 2 * self.config.channels, s.c)?;
        Self::expect_dim(op, Dim::Height, current.h, 2 * s.h)?;
        Self::expect_dim(op, Dim::Width, current.w, 2 * s.w)?;
        let projected = cbr.forward(tape, store, deep, mode)?;
        Ok(tape.upsample_nearest2x(projected))
    }

    /// Fused feature `CBR(concat[shallow', current', deep'])`, same shape as `cur`.
    /// A neighbour must be supplied exactly when the block has that branch.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        shallow: Option<Var>,
        cur: Var,
        deep: Option<Var>,
        mode: BnMode,
    ) -> Result<Var> {
        if shallow.is_some() != self.config.has_shallow || deep.is_some() != self.config.has_deep {
            return Err(Error::InvalidConfig(format!(
                "ME block expects shallow={} deep={}, got shallow={} deep={}",
                self.config.has_shallow,
                self.config.has_deep,
                shallow.is_some(),
                deep.is_some()
            )));
        }
        let cur_shape = tape.shape(cur);
        let mut parts = alloc::vec::Vec::with_capacity(3);
        if let Some(s) = shallow {
            parts.push(self.unify_shallow(tape, store, s, cur_shape, mode)?);
        }
        parts.push(self.unify_current(tape, store, cur, mode)?);
        if let Some(d) = deep {
            parts.push(self.unify_deep(tape, store, d, cur_shape, mode)?);
        }
        let cat = tape.concat_channels(&parts)?;
        self.cbr_fuse.forward(tape, store, cat, mode)
    }

    /// Inference convenience wrapper over [`MeBlock::forward`].
    pub fn apply(
        &self,
        store: &ParamStore,
        shallow: Option<&Tensor>,
        cur: &Tensor,
        deep: Option<&Tensor>,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let s = shallow.map(|t| tape.constant(t.clone()));
        let c = tape.constant(cur.clone());
        let d = deep.map(|t| tape.constant(t.clone()));
        let out = self.forward(&mut tape, store, s, c, d, BnMode::Eval)?;
        Ok(tape.value(out).clone())
    }
}
