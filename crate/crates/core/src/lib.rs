//! Latent-domain puppeteering detection for talking-head videoconferencing.

pub mod codec;
pub mod ebl;
pub mod error;
pub mod margin;
pub mod metrics;
pub mod numerics;
pub mod optim;
pub mod regressor;
pub mod stream;
pub mod temporal;
pub mod trainer;
pub mod world;

pub use error::{Error, Result};
