pub mod container;
pub mod error;
pub mod eval;
pub mod geom;
pub mod mmfit;
pub mod raster;
pub mod splocs;
pub mod synthetic;
pub mod transfer;
pub mod va_grid;

pub use error::{Error, Result};
