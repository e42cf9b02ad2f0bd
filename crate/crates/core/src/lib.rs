pub mod actgr;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scene;
pub mod sma;
pub mod starvation;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
