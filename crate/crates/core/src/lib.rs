//! Learned P-frame video codec built on conditional augmented normalizing
//! flows, with multi-scale motion compensation, feature-map modulation, a
//! quadtree context entropy model and a real range-coded bitstream.

pub mod ablation;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod frames;
pub mod mcnet;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod quant;
pub mod training;

pub use config::{ModelConfig, ModulationScope};
pub use error::{Error, Result};
