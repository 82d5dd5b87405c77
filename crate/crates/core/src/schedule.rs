//! Warm-up + cosine-annealed learning rate and momentum SGD.

use alloc::format;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrSchedule {
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    /// Warm-up starts at `warmup_start_fraction * lr_init`.
    pub warmup_start_fraction: f64,
}

impl LrSchedule {
    pub const LR_INIT: f64 = 0.01;
    pub const LR_FINAL: f64 = 0.002;
    pub const MOMENTUM: f64 = 0.937;
    pub const WARMUP_START_FRACTION: f64 = 0.1;

    /// Default rates (0.01 → 0.002, momentum 0.937) over `total_iters`.
    pub fn new(total_iters: usize, warmup_iters: usize) -> Result<Self> {
        let s = LrSchedule {
            warmup_iters,
            total_iters,
            lr_init: Self::LR_INIT,
            lr_final: Self::LR_FINAL,
            momentum: Self::MOMENTUM,
            warmup_start_fraction: Self::WARMUP_START_FRACTION,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule for `epochs * iters_per_epoch` iterations with
    /// `warmup_epochs` epochs of warm-up, clamped to leave at least one
    /// cosine step.
    pub fn from_epochs(
        epochs: usize,
        iters_per_epoch: usize,
        warmup_epochs: usize,
    ) -> Result<Self> {
        let total = epochs
            .checked_mul(iters_per_epoch)
            .filter(|&t| t > 0)
            .ok_or_else(|| {
                Error::InvalidConfig("epochs and iterations per epoch must be positive".into())
            })?;
        let warmup = warmup_epochs.saturating_mul(iters_per_epoch).min(total - 1);
        Self::new(total, warmup)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(format!("lr schedule: {m}")));
        if self.total_iters == 0 {
            return fail("total_iters must be positive");
        }
        if self.warmup_iters >= self.total_iters {
            return fail("warmup_iters must be < total_iters");
        }
        if !(self.lr_init > 0.0 && self.lr_final > 0.0) {
            return fail("learning rates must be positive");
        }
        if self.lr_final > self.lr_init {
            return fail("lr_final must not exceed lr_init");
        }
        if !(0.0..=1.0).contains(&self.warmup_start_fraction) {
            return fail("warmup_start_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate at iteration `iter` in `[0, total_iters]`.
    pub fn lr_at(&self, iter: usize) -> Result<f64> {
        if iter > self.total_iters {
            return Err(Error::IterOutOfRange {
                iter,
                total: self.total_iters,
            });
        }
        if iter < self.warmup_iters {
            let f = self.warmup_start_fraction;
            let frac = iter as f64 / self.warmup_iters as f64;
            return Ok(self.lr_init * (f + (1.0 - f) * frac));
        }
        let t = (iter - self.warmup_iters) as f64 / (self.total_iters - self.warmup_iters) as f64;
        Ok(self.lr_final
            + 0.5 * (self.lr_init - self.lr_final) * (1.0 + math::cos(core::f64::consts::PI * t)))
    }
}

/// Classical momentum update: `v <- m * v + g`, `p <- p - lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    lr: f64,
    momentum: f64,
    velocity: &mut Tensor,
) -> Result<()> {
    grad.shape().expect("sgd_step gradient", &param.shape())?;
    velocity
        .shape()
        .expect("sgd_step velocity", &param.shape())?;
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn endpoints_and_midpoint() {
        let s = LrSchedule::new(1000, 100).unwrap();
        assert!((s.lr_at(100).unwrap() - 0.01).abs() < 1e-12);
        assert!((s.lr_at(1000).unwrap() - 0.002).abs() < 1e-12);
        assert!((s.lr_at(550).unwrap() - 0.006).abs() < 1e-12);
        assert!((s.lr_at(0).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(s.lr_at(1001), Err(Error::IterOutOfRange { .. })));
    }

    #[test]
    fn warmup_is_linear_and_continuous() {
        let s = LrSchedule::new(40, 10).unwrap();
        let lrs: alloc::vec::Vec<f64> = (0..=40).map(|i| s.lr_at(i).unwrap()).collect();
        for w in lrs[..=10].windows(3) {
            assert!(((w[2] - w[1]) - (w[1] - w[0])).abs() < 1e-15);
        }
        // left limit of the warm-up line equals lr_init
        let left = s.lr_init * (0.1 + 0.9 * 10.0 / 10.0);
        assert!((left - lrs[10]).abs() < 1e-15);
        for w in lrs[10..].windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn invalid_schedules() {
        assert!(LrSchedule::new(10, 10).is_err());
        assert!(LrSchedule::new(0, 0).is_err());
        let mut s = LrSchedule::new(10, 1).unwrap();
        s.lr_final = 0.1;
        assert!(s.validate().is_err());
        assert_eq!(LrSchedule::from_epochs(1, 2, 3).unwrap().warmup_iters, 1);
    }

    #[test]
    fn sgd_cases() {
        let shape = Shape::new(1, 1, 1, 3);
        let p0 = Tensor::from_vec(shape, alloc::vec![1.0, -2.0, 0.5]).unwrap();
        let mut p = p0.clone();
        let mut v = Tensor::zeros(shape);
        sgd_step(&mut p, &p0, 1.0, 0.0, &mut v).unwrap();
        assert_eq!(p, Tensor::zeros(shape));

        let g = Tensor::full(shape, 0.3);
        let mut p = p0.clone();
        let mut v = Tensor::zeros(shape);
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        sgd_step(&mut p, &g, 0.1, 0.9, &mut v).unwrap();
        assert!(v.data().iter().all(|&x| (x - 1.9 * 0.3).abs() < 1e-15));

        let mut p = p0.clone();
        let mut v = Tensor::zeros(shape);
        sgd_step(&mut p, &Tensor::zeros(shape), 0.5, 0.937, &mut v).unwrap();
        assert_eq!(p, p0);
        assert!(sgd_step(
            &mut p,
            &Tensor::zeros(Shape::new(1, 1, 1, 2)),
            0.5,
            0.9,
            &mut v
        )
        .is_err());
    }
}
