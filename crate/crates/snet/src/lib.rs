//! File formats, dataset layout, the training driver and the command line of
//! the Stagger Network. The model itself lives in `snet-core`.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod stnt;
pub mod trainer;

pub use error::{Error, Result};
