//! Tensor engine, reverse-mode autograd and the adaptive multi-hierarchical
//! attention module (AMAM) for feature pyramids.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, JSON and the
//! command line live in the `amam` crate.
//!
//! - [`tensor`], [`ops`], [`tape`], [`gradcheck`]: dense `(N, C, H, W)`
//!   tensors, forward kernels with their vector-Jacobian products, the
//!   gradient tape, and central finite-difference checks.
//! - [`me`], [`aa`], [`pyramid`]: the multi-scale fusion block, the cascaded
//!   adaptive attention block, and their per-level composition.
//! - [`eval`]: IoU, greedy matching, precision/recall and interpolated AP.
//! - [`schedule`], [`train`]: warm-up + cosine learning rate, momentum SGD
//!   and the synthetic detection training loop.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod aa;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod math;
pub mod me;
pub mod ops;
pub mod params;
pub mod pyramid;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod train;

pub use aa::{AaBlock, AaConfig, FusionMode};
pub use error::{Dim, Error, Result};
pub use eval::{BBox, Detection, EvalReport, ImageRecord};
pub use layers::{BnMode, ConvBnAct, ConvSpec};
pub use me::{MeBlock, MeConfig};
pub use ops::Activation;
pub use params::{ParamId, ParamKind, ParamStore};
pub use pyramid::{Amam, AmamConfig, FeaturePyramid, ToyBackbone, ToyHead};
pub use schedule::LrSchedule;
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
