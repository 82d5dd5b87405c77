//! AMAM over a feature pyramid, plus the toy backbone and detection head
//! used for end-to-end exercises.
//!
//! For each level `i`, `out_i = AA(ME(pyr[i-1], pyr[i], pyr[i+1]))`. Every
//! output level has exactly the shape of the matching input level, so the
//! module can sit between any backbone and neck.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aa::{AaBlock, AaConfig, FusionMode};
use crate::error::{Dim, Error, Result};
use crate::layers::{BnMode, ConvBnAct, ConvSpec};
use crate::me::{MeBlock, MeConfig};
use crate::ops::Activation;
use crate::params::{fan_in_uniform, ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

/// Settings of an AMAM instance, including the on/off ablation switches.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AmamConfig {
    /// Channels per level, shallowest first; each is twice the previous.
    pub levels: Vec<usize>,
    pub heads: usize,
    pub fusion_mode: FusionMode,
    pub enabled_me: bool,
    pub enabled_aa: bool,
    pub seed: u64,
    /// Query/key width per head; defaults to `max(1, d / 2)`.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub qk_dim: Option<usize>,
}

impl Default for AmamConfig {
    fn default() -> Self {
        AmamConfig {
            levels: alloc::vec![32, 64, 128],
            heads: 4,
            fusion_mode: FusionMode::Adaptive,
            enabled_me: true,
            enabled_aa: true,
            seed: 0,
            qk_dim: None,
        }
    }
}

impl AmamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig(
                "at least one pyramid level is required".into(),
            ));
        }
        for (i, w) in self.levels.windows(2).enumerate() {
            if w[1] != 2 * w[0] {
                return Err(Error::Pyramid {
                    level: i + 1,
                    dim: Dim::Channels,
                    expected: 2 * w[0],
                    found: w[1],
                });
            }
        }
        if self.levels[0] == 0 {
            return Err(Error::InvalidConfig(
                "level channels must be positive".into(),
            ));
        }
        for &c in &self.levels {
            if self.heads == 0 || c % self.heads != 0 {
                return Err(Error::Indivisible {
                    op: "amam heads",
                    dim: Dim::Channels,
                    size: c,
                    divisor: self.heads,
                });
            }
        }
        Ok(())
    }
}

/// Ordered feature maps, shallowest (largest spatial size) first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub maps: Vec<Tensor>,
}

/// Checks the doubling geometry between consecutive levels.
pub fn check_pyramid_shapes(shapes: &[Shape]) -> Result<()> {
    for (i, w) in shapes.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let checks = [
            (Dim::Batch, a.n == b.n, a.n, b.n),
            (Dim::Channels, b.c == 2 * a.c, 2 * a.c, b.c),
            (Dim::Height, a.h == 2 * b.h, a.h / 2, b.h),
            (Dim::Width, a.w == 2 * b.w, a.w / 2, b.w),
        ];
        for (dim, ok, expected, found) in checks {
            let parent = a.get(dim);
            if !ok && matches!(dim, Dim::Height | Dim::Width) && parent % 2 != 0 {
                return Err(Error::Indivisible {
                    op: "feature pyramid",
                    dim,
                    size: parent,
                    divisor: 2,
                });
            }
            if !ok {
                return Err(Error::Pyramid {
                    level: i + 1,
                    dim,
                    expected,
                    found,
                });
            }
        }
    }
    Ok(())
}

impl FeaturePyramid {
    pub fn new(maps: Vec<Tensor>) -> Result<Self> {
        let p = FeaturePyramid { maps };
        p.validate()?;
        Ok(p)
    }

    pub fn shapes(&self) -> Vec<Shape> {
        self.maps.iter().map(Tensor::shape).collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_pyramid_shapes(&self.shapes())
    }
}

/// ME and AA blocks of one level; `None` when disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AmamLevel {
    pub me: Option<MeBlock>,
    pub aa: Option<AaBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Amam {
    pub config: AmamConfig,
    pub levels: Vec<AmamLevel>,
}

impl Amam {
    /// Registers parameters under `prefix`, initialized from `config.seed`.
    pub fn new(store: &mut ParamStore, prefix: &str, config: &AmamConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let l = config.levels.len();
        let mut levels = Vec::with_capacity(l);
        for (i, &c) in config.levels.iter().enumerate() {
            let me = if config.enabled_me {
                Some(MeBlock::new(
                    store,
                    &format!("{prefix}.level{i}.me"),
                    MeConfig::new(c, i > 0, i + 1 < l),
                    &mut rng,
                )?)
            } else {
                None
            };
            let aa = if config.enabled_aa {
                let aa_cfg = AaConfig {
                    qk_dim: config.qk_dim,
                    ..AaConfig::new(c, config.heads, config.fusion_mode)
                };
                Some(AaBlock::new(
                    store,
                    &format!("{prefix}.level{i}.aa"),
                    aa_cfg,
                    &mut rng,
                )?)
            } else {
                None
            };
            levels.push(AmamLevel { me, aa });
        }
        Ok(Amam {
            config: config.clone(),
            levels,
        })
    }

    fn check_inputs(&self, shapes: &[Shape]) -> Result<()> {
        if shapes.len() != self.config.levels.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} pyramid levels, got {}",
                self.config.levels.len(),
                shapes.len()
            )));
        }
        for (i, (s, &c)) in shapes.iter().zip(&self.config.levels).enumerate() {
            if s.c != c {
                return Err(Error::Pyramid {
                    level: i,
                    dim: Dim::Channels,
                    expected: c,
                    found: s.c,
                });
            }
        }
        check_pyramid_shapes(shapes)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        inputs: &[Var],
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        let shapes: Vec<Shape> = inputs.iter().map(|&v| tape.shape(v)).collect();
        self.check_inputs(&shapes)?;
        let n = inputs.len();
        let mut outputs = Vec::with_capacity(n);
        for (i, level) in self.levels.iter().enumerate() {
            let mut x = inputs[i];
            if let Some(me) = &level.me {
                let shallow = (i > 0).then(|| inputs[i - 1]);
                let deep = (i + 1 < n).then(|| inputs[i + 1]);
                x = me.forward(tape, store, shallow, x, deep, mode)?;
            }
            if let Some(aa) = &level.aa {
                x = aa.forward(tape, store, x)?;
            }
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Inference over a whole pyramid with stored BN statistics.
    pub fn apply(&self, store: &ParamStore, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut tape = Tape::inference();
        let inputs: Vec<Var> = pyramid
            .maps
            .iter()
            .map(|m| tape.constant(m.clone()))
            .collect();
        let outs = self.forward(&mut tape, store, &inputs, BnMode::Eval)?;
        Ok(FeaturePyramid {
            maps: outs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }
}

/// Three strided CBS stages (3x3, stride 2) producing strides 2, 4 and 8.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub stages: Vec<ConvBnAct>,
}

impl ToyBackbone {
    pub const STRIDE: usize = 8;

    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "toy backbone produces 3 levels, got {} widths",
                widths.len()
            )));
        }
        let mut c_in = 1;
        let mut stages = Vec::with_capacity(3);
        for (i, &c) in widths.iter().enumerate() {
            let spec = ConvSpec {
                c_in,
                c_out: c,
                kernel: 3,
                stride: 2,
                padding: 1,
                activation: Activation::Silu,
            };
            stages.push(ConvBnAct::new(
                store,
                &format!("{prefix}.stage{i}"),
                spec,
                rng,
            )?);
            c_in = c;
        }
        Ok(ToyBackbone { stages })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        image: Var,
        mode: BnMode,
    ) -> Result<Vec<Var>> {
        let s = tape.shape(image);
        if s.c != 1 {
            return Err(Error::ShapeMismatch {
                op: "toy_backbone",
                dim: Dim::Channels,
                expected: 1,
                found: s.c,
            });
        }
        for (dim, size) in [(Dim::Height, s.h), (Dim::Width, s.w)] {
            if size % Self::STRIDE != 0 {
                return Err(Error::Indivisible {
                    op: "toy_backbone",
                    dim,
                    size,
                    divisor: Self::STRIDE,
                });
            }
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(3);
        for stage in &self.stages {
            x = stage.forward(tape, store, x, mode)?;
            levels.push(x);
        }
        Ok(levels)
    }

    pub fn apply(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut tape = Tape::inference();
        let v = tape.constant(image.clone());
        let levels = self.forward(&mut tape, store, v, BnMode::Eval)?;
        Ok(FeaturePyramid {
            maps: levels.iter().map(|&l| tape.value(l).clone()).collect(),
        })
    }
}

/// Per-level 1x1 convolution to 5 channels: objectness logit, then
/// `(cx, cy, w, h)` offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyHead {
    /// `(kernel, bias)` per level.
    pub levels: Vec<(ParamId, ParamId)>,
}

impl ToyHead {
    pub const OUTPUTS: usize = 5;

    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        rng: &mut R,
    ) -> Self {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let k = store.add(
                    format!("{prefix}.level{i}.kernel"),
                    ParamKind::Learnable,
                    fan_in_uniform(Shape::new(Self::OUTPUTS, c, 1, 1), c, rng),
                );
                let b = store.add(
                    format!("{prefix}.level{i}.bias"),
                    ParamKind::Learnable,
                    Tensor::zeros(Shape::new(1, 1, 1, Self::OUTPUTS)),
                );
                (k, b)
            })
            .collect();
        ToyHead { levels }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        pyramid: &[Var],
    ) -> Result<Vec<Var>> {
        if pyramid.len() != self.levels.len() {
            return Err(Error::InvalidConfig(format!(
                "head has {} levels, pyramid has {}",
                self.levels.len(),
                pyramid.len()
            )));
        }
        pyramid
            .iter()
            .zip(&self.levels)
            .map(|(&x, &(k, b))| {
                let k = tape.param(store, k);
                let b = tape.param(store, b);
                tape.conv2d(x, k, Some(b), 1, 0)
            })
            .collect()
    }
}
