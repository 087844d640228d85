//! Correlation-regularized two-channel autoencoders.

pub mod checkpoint;
pub mod loss;
mod network;
mod spec;
mod train;

pub use loss::{LossTerms, LossValues};
pub use network::{Decoding, Encoding, EncodingTrace, Forward, Model, VIEW_TAGS};
pub use spec::{
    apply_override, build_preset, canonical_text, digest, parse_canonical, ArchitectureSpec, ConvStage, DeconvPath,
    DeconvStage, LossWeights, Variant, PRESETS, SPEC_KEYS,
};
pub use train::{train_epoch, EpochMetrics, TrainState};
