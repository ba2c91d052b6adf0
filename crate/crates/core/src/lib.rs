//! Deterministic histopathology corruption benchmark plus a small
//! vision-language test-time adaptation engine.
//!
//! The crate is split into the image side ([`imagecore`], [`stain`],
//! [`contamination`], [`optics`], [`photometric`], [`corruption`]) and the
//! adaptation side ([`numerics`], [`latte`]), tied together by [`harness`].

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod contamination;
pub mod corruption;
mod error;
pub mod harness;
pub mod imagecore;
pub mod latte;
pub mod numerics;
pub mod optics;
pub mod par;
pub mod photometric;
pub mod stain;
pub mod synthetic;

pub use corruption::{CorruptionKind, CorruptionSpec};
pub use error::{Error, Result};
pub use imagecore::{ImageTensor, Rng64, SeedPolicy};
