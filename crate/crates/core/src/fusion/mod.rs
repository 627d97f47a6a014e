//! Attribute perception blocks and the attribute interaction network.

pub mod aap;
pub mod attention;
pub mod bilinear;
pub mod checkpoint;
pub mod gate;
pub mod model;
pub mod net;

pub use aap::{AapBlock, AapCache, AapVariant};
pub use attention::{AttentionRecord, ChannelAttention};
pub use bilinear::{bilinear_fuse, Bilinear};
pub use checkpoint::{read_attention_csv, write_attention_csv, Checkpoint};
pub use gate::Gate;
pub use model::{rgb_to_map, Model, ModelCache, ModelConfig};
pub use net::{
    distribution_mean, logits_backward, prediction_from_logits, Attribute, AttributeSet,
    FusionCache, FusionConfig, FusionInput, FusionNet, OutputMode, Prediction, GENERIC,
};
