//! Gait-based scoliosis screening at desk scale: clinical-prior kinematic
//! knowledge maps, multi-modal transformer encoders with temporally aligned
//! rotary positional embeddings, latent attention pooling fusion, and
//! attention-remapping interpretability, validated end-to-end on a built-in
//! synthetic gait simulator.

pub mod error;
pub mod explain;
pub mod knowledge;
pub mod model;
pub mod params;
pub mod pose;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
