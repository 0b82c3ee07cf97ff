pub mod analysis;
pub mod augment;
pub mod continual;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod model_zoo;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod recover;
pub mod relabel;
pub mod seed;
pub mod squeeze;
pub mod train;

pub use error::{Error, Result};
