//! Desk-scale synthetic detection training: backbone → AMAM → head.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::layers::BnMode;
use crate::params::{ParamKind, ParamStore};
use crate::pyramid::{Amam, AmamConfig, ToyBackbone, ToyHead};
use crate::schedule::{sgd_step, LrSchedule};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Knobs of [`toy_train_with`] beyond the AMAM configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub batch: usize,
    pub image_size: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub momentum: f64,
    /// Fraction of the steps spent in warm-up.
    pub warmup_fraction: f64,
    pub bn_mode: BnMode,
    pub bn_momentum: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch: 4,
            image_size: 64,
            lr_init: LrSchedule::LR_INIT,
            lr_final: LrSchedule::LR_FINAL,
            momentum: LrSchedule::MOMENTUM,
            warmup_fraction: 0.05,
            bn_mode: BnMode::Train,
            bn_momentum: 0.1,
        }
    }
}

impl TrainOptions {
    pub fn schedule(&self, steps: usize) -> Result<LrSchedule> {
        let warmup = ((steps as f64 * self.warmup_fraction) as usize).min(steps.saturating_sub(1));
        let s = LrSchedule {
            warmup_iters: warmup,
            total_iters: steps,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            momentum: self.momentum,
            warmup_start_fraction: LrSchedule::WARMUP_START_FRACTION,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Images `(B, 1, S, S)` of bright rectangles on uniform noise, and the
/// rectangles per image.
#[derive(Debug, Clone)]
pub struct SyntheticBatch {
    pub images: Tensor,
    pub boxes: Vec<Vec<BBox>>,
}

impl SyntheticBatch {
    pub fn generate<R: Rng + ?Sized>(rng: &mut R, batch: usize, size: usize) -> Self {
        let mut images = Tensor::zeros(Shape::new(batch, 1, size, size));
        let mut boxes = Vec::with_capacity(batch);
        let max_side = (size / 3).max(2);
        let min_side = (size / 10).max(1).min(max_side);
        for n in 0..batch {
            for v in images.plane_mut(n, 0) {
                *v = rng.gen_range(0.0..0.3);
            }
            let count = rng.gen_range(1..=3);
            let mut these = Vec::with_capacity(count);
            for _ in 0..count {
                let w = rng.gen_range(min_side..=max_side);
                let h = rng.gen_range(min_side..=max_side);
                let x0 = rng.gen_range(0..=size - w);
                let y0 = rng.gen_range(0..=size - h);
                let level = rng.gen_range(0.8..1.0);
                let plane = images.plane_mut(n, 0);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        plane[y * size + x] = level;
                    }
                }
                these.push(BBox {
                    x_min: x0 as f64,
                    y_min: y0 as f64,
                    x_max: (x0 + w) as f64,
                    y_max: (y0 + h) as f64,
                });
            }
            boxes.push(these);
        }
        SyntheticBatch { images, boxes }
    }

    /// Objectness and offset targets on a `grid x grid` map with cell size
    /// `stride`: `(objectness, offsets, offset mask, positive cells)`.
    pub fn targets(&self, grid: usize, stride: usize) -> (Tensor, Tensor, Tensor, usize) {
        let b = self.boxes.len();
        let size = (grid * stride) as f64;
        let mut obj = Tensor::zeros(Shape::new(b, 1, grid, grid));
        let mut off = Tensor::zeros(Shape::new(b, 4, grid, grid));
        let mut mask = Tensor::zeros(Shape::new(b, 4, grid, grid));
        for (n, boxes) in self.boxes.iter().enumerate() {
            for bx in boxes {
                let cx = 0.5 * (bx.x_min + bx.x_max) / stride as f64;
                let cy = 0.5 * (bx.y_min + bx.y_max) / stride as f64;
                let gx = (cx as usize).min(grid - 1);
                let gy = (cy as usize).min(grid - 1);
                *obj.at_mut(n, 0, gy, gx) = 1.0;
                let t = [
                    cx - gx as f64,
                    cy - gy as f64,
                    (bx.x_max - bx.x_min) / size,
                    (bx.y_max - bx.y_min) / size,
                ];
                for (c, v) in t.into_iter().enumerate() {
                    *off.at_mut(n, c, gy, gx) = v;
                    *mask.at_mut(n, c, gy, gx) = 1.0;
                }
            }
        }
        let positives = obj.data().iter().filter(|&&v| v > 0.0).count();
        (obj, off, mask, positives)
    }
}

/// Backbone, optional AMAM, and head sharing one parameter store.
#[derive(Debug, Clone)]
pub struct ToyDetector {
    pub store: ParamStore,
    pub backbone: ToyBackbone,
    pub head: ToyHead,
    pub amam: Option<Amam>,
}

impl ToyDetector {
    /// Backbone and head are initialized from `seed`; AMAM (when given) from
    /// its own `config.seed`, registered last, so the backbone and head are
    /// identical with or without it.
    pub fn new(widths: &[usize], amam: Option<&AmamConfig>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = ToyBackbone::new(&mut store, "backbone", widths, &mut rng)?;
        let head = ToyHead::new(&mut store, "head", widths, &mut rng);
        let amam = amam
            .map(|cfg| {
                if cfg.levels != widths {
                    return Err(Error::InvalidConfig(
                        "AMAM levels must match the backbone widths".into(),
                    ));
                }
                Amam::new(&mut store, "amam", cfg)
            })
            .transpose()?;
        Ok(ToyDetector {
            store,
            backbone,
            head,
            amam,
        })
    }

    /// Head outputs `(N, 5, H_l, W_l)` per level.
    pub fn forward(&self, tape: &mut Tape, image: Var, mode: BnMode) -> Result<Vec<Var>> {
        let mut levels = self.backbone.forward(tape, &self.store, image, mode)?;
        if let Some(amam) = &self.amam {
            levels = amam.forward(tape, &self.store, &levels, mode)?;
        }
        self.head.forward(tape, &self.store, &levels)
    }

    /// Mean over levels of objectness BCE plus offset L1 at positive cells.
    pub fn loss(&self, tape: &mut Tape, batch: &SyntheticBatch, mode: BnMode) -> Result<Var> {
        let image = tape.constant(batch.images.clone());
        let outputs = self.forward(tape, image, mode)?;
        let size = batch.images.shape().h;
        let mut total: Option<Var> = None;
        for &out in &outputs {
            let grid = tape.shape(out).h;
            let (obj_t, off_t, mask, positives) = batch.targets(grid, size / grid);
            let obj = tape.channel_slice(out, 0, 1)?;
            let off = tape.channel_slice(out, 1, 4)?;
            let bce = tape.bce_with_logits(obj, obj_t)?;
            let l1 = tape.masked_l1(off, off_t, mask, (4 * positives).max(1) as f64)?;
            let level = tape.add(bce, l1)?;
            total = Some(match total {
                Some(t) => tape.add(t, level)?,
                None => level,
            });
        }
        let total = total.ok_or_else(|| Error::InvalidConfig("detector has no levels".into()))?;
        Ok(tape.scale(total, 1.0 / outputs.len() as f64))
    }
}

/// Momentum SGD state over a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    /// Updates every learnable parameter that received a gradient on `tape`.
    pub fn step(&mut self, store: &mut ParamStore, tape: &Tape, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            if store.kind(id) != ParamKind::Learnable {
                continue;
            }
            let Some(g) = tape.param_grad(id) else {
                continue;
            };
            let v = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            sgd_step(store.get_mut(id), g, lr, self.momentum, v)?;
        }
        Ok(())
    }
}

/// [`toy_train_with`] using the default [`TrainOptions`] and AMAM inserted.
pub fn toy_train(cfg: &AmamConfig, steps: usize, seed: u64) -> Result<Vec<StepRecord>> {
    toy_train_with(
        cfg.levels.as_slice(),
        Some(cfg),
        steps,
        seed,
        &TrainOptions::default(),
    )
}

/// Trains on freshly generated batches for `steps` steps and returns the
/// per-step loss. `amam = None` trains the bare backbone + head baseline.
/// Fully deterministic given `seed` (data, backbone and head) and the AMAM
/// config seed.
pub fn toy_train_with(
    widths: &[usize],
    amam: Option<&AmamConfig>,
    steps: usize,
    seed: u64,
    opts: &TrainOptions,
) -> Result<Vec<StepRecord>> {
    if steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    let schedule = opts.schedule(steps)?;
    let mut model = ToyDetector::new(widths, amam, seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(1);
    let mut sgd = Sgd::new(opts.momentum);
    let mut trace = Vec::with_capacity(steps);
    for iter in 0..steps {
        let batch = SyntheticBatch::generate(&mut data_rng, opts.batch, opts.image_size);
        let lr = schedule.lr_at(iter)?;
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &batch, opts.bn_mode)?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        sgd.step(&mut model.store, &tape, lr)?;
        for update in tape.take_bn_updates() {
            model.store.apply_bn_update(&update, opts.bn_momentum);
        }
        trace.push(StepRecord {
            iter,
            lr,
            loss: value,
        });
    }
    Ok(trace)
}

/// Mean loss over a slice of the trace.
pub fn mean_loss(trace: &[StepRecord]) -> f64 {
    if trace.is_empty() {
        return f64::NAN;
    }
    trace.iter().map(|r| r.loss).sum::<f64>() / trace.len() as f64
}
