//! Sliding-window cross-frame affinity attention that reuses one affinity
//! field for contextual aggregation and for explicit motion features.
//!
//! - [`tensor`]: dense `f64` primitives with analytic backward passes and
//!   the binary fixture format.
//! - [`attention`]: the windowed layer, dense and non-sliding baselines,
//!   naive oracles.
//! - [`block`]: patch embedding, pre-norm transformer blocks, O/E stacks.
//! - [`synthetic`]: translated-noise clips with exact displacement labels.
//! - [`verify`]: finite-difference checks, differential tests, MAC model.
//! - [`cli`]: the `emim` command line.

pub mod attention;
pub mod block;
pub mod cli;
pub mod error;
pub mod params;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use params::Parameters;
