//! Lightweight retinal-vessel segmentation: a small deterministic autodiff
//! engine, the Unet / MiUnet / Iternet / IterMiUnet family, and the
//! preprocessing, training and evaluation pipeline around them.

pub mod arch;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod hash;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod synthetic;
pub mod train;

pub use error::{Error, ErrorClass, Result};
