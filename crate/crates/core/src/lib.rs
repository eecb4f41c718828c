//! Desk-scale laboratory for low-rank adapters whose projection matrices are
//! shared across transformer layers.
//!
//! The crate is organized around six pieces:
//! - [`tensor`]: a minimal f64 reverse-mode autodiff tape,
//! - [`adapters`]: adapter schemes, the shared-parameter store, adapted
//!   linear layers, delta weights and merging,
//! - [`model`]: a tiny decoder transformer plus architecture presets used for
//!   auditing full-size configurations without instantiating them,
//! - [`train`]: AdamW, schedules, synthetic tasks, and the multi-phase
//!   continual-adaptation runner,
//! - [`audit`]: exact parameter counting, an analytical memory model, SVD
//!   spectra of the learned updates, and the finite-difference grad checker,
//! - [`checkpoint`]: the adapter checkpoint file format.

pub mod adapters;
pub mod audit;
pub mod checkpoint;
pub mod error;
pub mod model;
pub mod svd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
