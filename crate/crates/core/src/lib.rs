//! Deep belief network training with dropout and replica combination.
//!
//! The pipeline is greedy CD-1 pre-training of a stack of RBMs
//! ([`rbm`]), dropout back-propagation fine-tuning ([`net`]), and several
//! ways of combining concurrently trained replicas: post-hoc weight
//! averaging and majority voting ([`combine`]), and synchronous
//! parameter-server or asynchronous weight-queue exchange during training
//! ([`dist`]).

pub mod checkpoint;
pub mod combine;
pub mod data;
pub mod dist;
pub mod error;
pub mod experiment;
pub mod math;
pub mod net;
pub mod rbm;

pub use error::{Error, Result};
