//! One-vector adaptation codec for small flow-matching models.
//!
//! A signal is represented by a low-rank adaptation of a pretrained
//! time-conditioned vector field, where every LoRA parameter is read from a
//! single hashed vector. The vector is quantised, entropy coded, and can be
//! refined at encode time by importance-sampling the reverse SDE with shared
//! counter-based randomness.

// Float guards are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod codec;
pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod io;
pub mod net;
pub mod prior;
pub mod prng;
pub mod ratecode;
pub mod scaling;

pub use error::{Error, Result};
