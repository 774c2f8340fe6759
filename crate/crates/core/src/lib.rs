//! Stagger Network (SNet) for segmentation of targets of very different sizes.
//!
//! The crate is `no_std` + `alloc`: tensors, the reverse-mode graph, the
//! network blocks, losses, metrics, information-theoretic diagnostics and the
//! synthetic data generator are all pure computation. File formats, the
//! training driver and the command line live in the `snet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod info;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{BnStats, Graph, Mode, Var};
pub use tensor::Tensor;
