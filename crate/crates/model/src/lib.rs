//! Networks, checkpointing and training for blind-spot backscatter restoration.

pub mod bsformer;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod ranet;
pub mod resample;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{ModelError, Result};
pub use nn::{NamedParam, Params, Precision};
pub use pipeline::{full_pipeline_infer, BSoNet, ModelConfig};
