//! Wavelength-conditioned dual-tower vision-language model with explicit
//! reverse-mode gradients.
//!
//! The crate is `no_std` (it needs `alloc`). Everything that touches files,
//! the command line or the wall clock lives in the `spectra` companion crate.
//!
//! Module map:
//!
//! * [`numerics`]: tensors, parameter store, the differentiable kernels and
//!   the finite-difference gradient oracle.
//! * [`hypernet`]: wavelength encoding and dynamic patch-embedding kernels.
//! * [`towers`]: tokenizer, text tower and vision tower.
//! * [`maka`]: modality-aware conditional layer norm and teacher projectors.
//! * [`teachers`]: frozen stand-in teacher networks and RGB band selection.
//! * [`losses`]: sigmoid contrastive loss, feature matching, total objective.
//! * [`synthgeo`]: synthetic scenes, caption statistics and templates.
//! * [`model`]: the assembled student, batch loss and gradient.
//! * [`trainer`]: AdamW and the deterministic training loop.
//! * [`checkpoint`]: name-ordered f32 parameter snapshots.
//! * [`merge`]: linear and two-stage weight merging, ratio search.
//! * [`evalkit`]: zero-shot, multi-label and retrieval metrics.
//! * [`gradsuite`]: finite-difference audit of every objective.
#![no_std]
#![deny(rust_2018_idioms)]

#[cfg(any(test, feature = "std"))]
extern crate std;

extern crate alloc;

mod error;
mod math;

pub mod checkpoint;
pub mod evalkit;
pub mod gradsuite;
pub mod hypernet;
pub mod losses;
pub mod maka;
pub mod merge;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthgeo;
pub mod teachers;
pub mod towers;
pub mod trainer;

pub use error::{Error, Result};
