pub mod asymptotics;
pub mod bilinear;
pub mod checks;
pub mod convolution;
pub mod error;
pub mod fields;
pub mod harmonics;
pub mod kernels;
pub mod leray;
pub mod output;
pub mod quad;
pub mod special;
pub mod solver;
pub mod sphere;

pub use error::{Error, Result};
