//! Sum-of-trees regression with Gaussian-process terminal nodes and rotated
//! split rules.
//!
//! The pipeline is: [`io::load_csv`] or a [`simdata`] generator, then
//! [`evaluate::fit_dataset`] (normalisation, calibration, [`sampler::run`]),
//! then [`evaluate::predict`] and the scores in [`evaluate`].

pub mod error;
pub mod evaluate;
pub mod gp;
pub mod io;
pub mod sampler;
pub mod simdata;
pub mod trees;

pub use error::{Error, Result};
