//! Multi-density attention loop filter with per-frame least-squares scaling.

pub mod arch;
pub mod cli;
pub mod codec_sim;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod scaling;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod yuv;

pub use error::{Error, Result};
