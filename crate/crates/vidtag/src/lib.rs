//! Frame-to-GPS retrieval engine for video geolocalization.
//!
//! The pipeline trains a location encoder, a temporal aligner over fused
//! frame embeddings, and an encoder-decoder trajectory denoiser, then
//! retrieves per-frame GPS coordinates from a uniform grid gallery and
//! scores the resulting trajectories.

pub mod config;
pub mod error;
pub mod frame_pipeline;
pub mod gallery;
pub mod geodesy;
pub mod georefiner;
pub mod location_encoder;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod state;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use geodesy::GpsPoint;
pub use rng::StreamRng;
pub use state::ModelState;
pub use tape::Tape;
pub use tensor::Tensor;
