pub mod audit;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod curves;
pub mod data;
pub mod decoder;
pub mod error;
pub mod interaction;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
