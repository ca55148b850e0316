//! Reference-guided inpainting of Gaussian-splat scenes.

pub mod bench;
pub mod consolidate;
pub mod error;
pub mod eval;
pub mod grad;
pub mod image;
pub mod io;

pub mod optim;
pub mod prior;
pub mod raster;
pub mod reference;
pub mod regularize;
pub mod routing;
pub mod scene;
pub mod sh;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
