pub mod cli;
pub mod conformance;
pub mod error;
pub mod estimators;
pub mod image;
pub mod ipudn;
pub mod pipeline;
mod nn;
pub mod quality;
pub mod scattering;

pub use error::{DehazeError, Result};
pub use image::{AtmosphericLight, HazeParams, ImagePlane};
