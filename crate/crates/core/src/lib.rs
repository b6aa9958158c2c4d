//! Locally private publication of high-dimensional categorical data.
//!
//! Clients map every attribute value to a Bloom filter and randomize each bit
//! before anything leaves the device. The server only sees the concatenated
//! noisy bit strings; from those it estimates joint distributions over
//! attribute clusters (EM, non-negative Lasso, or a hybrid of both), learns a
//! dependency graph from pairwise mutual information, decomposes it into a
//! junction tree, and samples a synthetic dataset clique by clique.
//!
//! The pipeline stages map onto modules:
//!
//! * [`schema`]: attribute domains, datasets, CSV ingestion.
//! * [`encode`]: Bloom parameters, hashing, randomized response, report files.
//! * [`solver`]: non-negative Lasso by cyclic coordinate descent.
//! * [`estimate`]: aggregation and the three joint-distribution estimators.
//! * [`reduce`]: mutual information, dependency graphs, pruning, junction trees.
//! * [`synthesize`]: sampling plans and synthetic dataset generation.
//! * [`eval`]: metrics, planted-model generators, and the end-to-end driver.

pub mod bits;
pub mod encode;
pub mod error;
pub mod estimate;
pub mod eval;
pub mod reduce;
pub mod rng;
pub mod schema;
pub mod solver;
pub mod synthesize;

pub use error::{Error, Result};
