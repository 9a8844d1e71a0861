//! Distributed nonnegative tensor-train decomposition.
//!
//! The crate decomposes a d-way nonnegative tensor into a chain of order-3
//! cores by sweeping over matrix unfoldings: each stage reshapes the current
//! remainder, picks a rank from its singular spectrum, factorizes it with a
//! nonnegative matrix factorization (or a truncated SVD baseline), keeps the
//! left factor as a core, and carries the right factor into the next stage.
//!
//! All distributed pieces run on an in-process SPMD runtime: `p` ranks
//! execute as worker threads that exchange data only through deterministic
//! collectives, so results are reproducible for a fixed seed and rank count.
//! Large reshapes move through a chunked on-disk store rather than memory.

pub mod comm;
pub mod datagen;
pub mod dist;
pub mod driver;
pub mod error;
pub mod metrics;
pub mod nmf;
pub mod rng;
pub mod spectra;
pub mod store;
pub mod tensor;

pub use error::{NttError, Result};
