//! Concept injection for a toy multimodal autoregressive transformer.
//!
//! Everything numerical lives here: the procedural token world, sequence
//! assembly, the frozen decoder-only backbone with manual backprop, the
//! learnable context banks and their losses, the optimizer loop, sampling,
//! and the parameter-accounting audits. The crate is `no_std` (alloc only);
//! file formats, run directories and the CLI live in the companion `coar`
//! crate.
//!
//! All training-time arithmetic is 64-bit. Every random draw flows from an
//! explicit seed through named sub-streams, so identical inputs reproduce
//! identical outputs bit for bit.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod audit;
pub mod context;
pub mod error;
pub mod exec;
pub mod losses;
pub mod mat;
pub mod math;
pub mod rng;
pub mod sampler;
pub mod trainer;
pub mod sequences;
pub mod toyworld;

pub use backbone::{
    AttentionMask, BackboneConfig, BackboneParams, ForwardRecord, InjectionPlan,
};
pub use audit::ParamAudit;
pub use context::{BankKind, ContextBank, InitPolicy};
pub use error::{CoarError, Result};
pub use exec::{BatchExecutor, Sequential};
pub use losses::{BankGrads, ClassRef, LossConfig, LossReport};
pub use sampler::{DecodeConfig, DecodeMode};
pub use trainer::{
    AdamConfig, GradcheckReport, PretrainConfig, PretrainReport, SweepRow, TrainConfig,
};
pub use sequences::{TokenId, TokenSequence, Vocabulary};
pub use toyworld::{Codebook, PixelGrid, StyleSet, SubjectSet, World};
