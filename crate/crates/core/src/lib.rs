//! Two-level sparse mixture-of-experts with shared experts and random feature
//! reorganization, for multimodal discrete-time survival prediction.
//!
//! The crate is `no_std` + `alloc`: a reverse-mode tape ([`Graph`]), the
//! model, losses, optimizer, k-fold trainer and metrics. File formats and the
//! command line live in the `hdmoe` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod matrix;
pub mod model;
pub mod moe;
pub mod optim;
pub mod params;
pub mod rfr;
pub mod rng;
pub mod special;
pub mod synthetic;
pub mod tape;
pub mod trainer;

pub use data::{BinEdges, SampleRecord};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use model::{HDMoE, ModelConfig};
pub use rfr::{SegmentChoice, SegmentSet};
pub use tape::{Graph, NodeId};
pub use trainer::{TrainConfig, TrainedFold};
