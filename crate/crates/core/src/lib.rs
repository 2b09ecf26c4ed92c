//! dvco: a desk-scale conditional video codec with one-step diffusion
//! refinement of the reconstructed latent.

pub mod bd;
pub mod config;
pub mod container;
pub mod context;
pub mod diffusion;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod latent;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod dataset;
pub mod nnutil;
pub mod pipeline;
pub mod plot;
pub mod train;
pub mod tca;
pub mod video;

pub use config::{ModelConfig, ScheduleConfig, LAMBDA_SET};
pub use error::{CodecError, Result};
