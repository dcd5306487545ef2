//! UniForm backbone: a three-stage hierarchical image classifier built from
//! Reuse Attention blocks, with parameter and MAC counters and a binary
//! weight container.

mod config;
mod count;
mod layers;
mod model;
pub mod weights;

pub use config::{UniFormConfig, VARIANTS};
pub use count::{count_config_flops, count_flops, FlopReport};
pub use layers::{AttentionUnit, Block, Conv, DwConv, Ffn, LayerNorm, Linear};
pub use model::{synthetic_images, BlockProbe, ForwardProbe, UniFormModel};
