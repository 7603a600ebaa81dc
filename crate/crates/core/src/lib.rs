//! Few-shot class-incremental classification.
//!
//! Base training makes the feature extractor forward compatible (virtual
//! classes plus a center-triplet metric loss); incremental sessions keep it
//! backward compatible by replaying uncertainty-filtered pseudo-features of
//! old classes and distilling from the previous session's head.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pfs;
pub mod sessions;

pub use error::{Error, Result};
