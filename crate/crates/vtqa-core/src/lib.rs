//! Core library for a cross-media QA baseline: a small tape-based autodiff
//! engine, multi-head attention blocks, the key-entity extract / cross-media
//! reason layers, the full network with its training loop, dataset I/O with
//! a synthetic generator, and the EM / token-F1 / YN-accuracy scorer.

pub mod attention;
pub mod checks;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kecmr;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Ctx, ParamId, ParamSet};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
