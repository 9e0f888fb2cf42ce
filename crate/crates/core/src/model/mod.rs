//! The dual-pathway binaural predictor and its checkpoint format.

pub mod checkpoint;
mod config;
mod predictor;

pub use config::ModelConfig;
pub use predictor::{pool_frames, BinauralInput, EarFeatures, EarPipeline, PredictorModel, LEFT, RIGHT};
