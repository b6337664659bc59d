//! The full encoder–decoder and its configuration.

mod config;
mod model;

pub use config::{ModelConfig, SIZE_DIVISOR};
pub use model::{
    expand_rearrange, merge_rearrange, param_count, DecoderFuse, DecoderStage, EncoderStage, MedVkan, ParamCount,
    PatchEmbed, PatchExpand, PatchMerge, Stages,
};
