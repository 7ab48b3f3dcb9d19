//! Class-incremental semantic segmentation with a frozen backbone,
//! hypernetwork-generated per-level filters for multi-level feature fusion,
//! proposal prototypes for semantic enhancement, and pseudo-labelled
//! incremental training.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grid;
pub mod heads;
pub mod kernels;
pub mod labels;
pub mod model;
pub mod params;
pub mod protocol;
pub mod seed;
pub mod semantic;
pub mod tensor_ops;
pub mod train;

pub use error::{Error, Result};
