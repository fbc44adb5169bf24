//! Generator, patch critics and the fixed perceptual feature network.

mod critic;
mod features;
mod generator;
pub mod init;

pub use critic::{Critic, CriticConfig, CriticDepth};
pub use features::{FixedFeatureNet, FEATURE_SEED};
pub use generator::{
    masked_input, oracle_input, BnMode, Generator, GeneratorConfig, GeneratorOutput, LayerKind,
    LayerPlan, LayerStats, Preset,
};
