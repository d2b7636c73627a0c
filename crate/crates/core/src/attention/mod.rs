//! Windowed cross-frame attention with explicit motion features, its dense
//! and non-sliding baselines, and loop-based reference oracles.

mod config;
mod emim;
mod global;
mod kernels;
pub mod naive;
mod volume;
mod window;

pub use config::{Boundary, EmimConfig, LastFrame, Sampling};
pub(crate) use config::{parse_key_values, parse_value};
pub use emim::{appearance_forward, emim_backward, emim_forward, emim_forward_saved, nonsliding_forward, EmimParams, EmimTape};
pub use global::{global_attention_backward, global_attention_forward, global_attention_forward_saved, GlobalParams, GlobalTape};
pub use kernels::{
    aggregate_context, build_affinity, combine_features, motion_transform, normalize_affinity, AffinityField,
    MotionMlpParams, RelPosBias,
};
pub use volume::{TokenVolume, VolumeDims};
pub use window::{offset_slot, sample_window, slot_offset, source_frame, window_slots, WindowSlot};
