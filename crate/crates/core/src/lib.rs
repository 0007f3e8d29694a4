pub mod bench;
pub mod cli;
pub mod error;
pub mod granule_io;
pub mod inference;
pub mod model3d;
pub mod patch_index;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};
