pub mod autodiff;
pub mod data;
pub mod gradsuite;
mod error;
pub mod layers;
pub mod model;
pub mod multimodal;
pub mod train;
pub mod uam;

pub use error::{Error, Result};
