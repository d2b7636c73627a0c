//! Patch embedding, pre-norm blocks and O/E block stacks.

mod checkpoint;
mod embed;
mod layer;
mod model;
mod pattern;

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE};
pub use embed::{patch_embed, patch_embed_backward, patchify, token_dims};
pub use layer::{block_backward, block_forward, block_forward_saved, AttentionParams, BlockParams, BlockTape, FfnParams, NormParams};
pub use model::{argmax, build_stack, cross_entropy, AFFINITY_GAIN, MOTION_GAIN, Model, ModelConfig, ModelParams, ModelTape};
pub use pattern::{BlockKind, BlockPattern};
