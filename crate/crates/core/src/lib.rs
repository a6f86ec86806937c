//! Transfer-aware architecture and hyperparameter search for graph neural
//! networks.
//!
//! Tasks are characterised by the Fisher information of randomly initialised
//! anchor networks, embedded with a learned projection, and new searches are
//! warm-started from the design distributions of nearby tasks in a bank of
//! past trials.

pub mod autodiff;
pub mod bank;
pub mod embedding;
pub mod error;
pub mod fim;
pub mod graph;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod rng;
pub mod search;
pub mod space;
pub mod transfer;

pub use error::{Error, Result};
