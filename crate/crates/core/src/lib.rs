pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod parallel;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
