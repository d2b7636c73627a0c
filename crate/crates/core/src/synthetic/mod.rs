//! Noise clips with exact translation ground truth, direction datasets and
//! the affinity-argmax displacement probe.

mod clip;
mod dataset;
mod probe;

pub use clip::{clip_rng, gen_clip, gen_translation_pair, translate_cyclic, MotionClip};
pub use dataset::{
    class_shifts, gen_direction_dataset, label_histogram, load_clips, max_class_shift, save_clips, split_indices, Dataset,
    DatasetSpec, MANIFEST_FILE,
};
pub use probe::{circle_tokens, displacement_probe, recovery_sweep, window_shifts, ProbeResult, SweepEntry};
