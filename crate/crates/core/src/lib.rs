//! Frame-by-frame autoregressive latent sequence generation.
//!
//! The model generates one latent video frame at a time from streaming
//! per-frame conditions (an audio-analog embedding plus a motion-intensity
//! scalar). A frame-causal transformer attends over a sink-window KV cache
//! in which the reference frame is never evicted; generated frames are kept
//! faithful to the reference by modulating a cached normalized anchor with
//! learned per-frame scale/shift maps. Each frame's spatial tokens are
//! produced in random groups by a masked bidirectional generator whose
//! per-token outputs condition a small diffusion head.
//!
//! Training runs on a synthetic "latent puppet": a scalar linear dynamical
//! system driven by a smooth control signal and emitted into token space,
//! which makes control-following directly measurable.

pub mod attn;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffhead;
pub mod error;
pub mod mar;
pub mod numeric;
pub mod params;
pub mod pipeline;
pub mod posenc;
pub mod rng;
pub mod tape_model;
pub mod train;
pub mod types;

pub use config::{FileConfig, ModelConfig};
pub use error::{ModelError, Result};
pub use types::{ConditionFrame, FrameHidden, LatentFrame};
