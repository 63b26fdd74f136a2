//! Bayesian negative-binomial count regression whose exposure surface is a
//! soft regression-tree ensemble, with linear confounders, offsets, and
//! proper-CAR spatial intercepts, plus accumulated-local-effects summaries
//! and a simulation bench.

pub mod config;
pub mod data;
pub mod dist;
pub mod ensemble;
pub mod interpret;
pub mod sampler;
pub mod simlab;
pub mod spatial;
pub mod store;
pub mod tree;
pub mod tree_sampler;
pub mod util;
pub mod error;
pub mod rng;

pub use error::{Error, Result};
pub use rng::RngStream;
