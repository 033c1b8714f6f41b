//! Desk-scale laboratory for width-stable hyperparameter transfer in
//! diffusion Transformers.
//!
//! The crate is organized around a small set of cooperating pieces:
//!
//! * [`tensor`] — dense tensors with reverse-mode autodiff on a tape,
//!   plus seeded, name-keyed random initialization.
//! * [`optim`] — AdamW with per-parameter learning rates, global-norm
//!   clipping, and a warmup-then-constant schedule.
//! * [`mup`] — the abc-parameterization table, weight-role
//!   classification, and resolution of base hyperparameters into a
//!   concrete per-weight plan at a given width.
//! * [`arch`] — four diffusion-Transformer variants (DiT, PixArt-style,
//!   U-ViT-style, MMDiT-style) built as role-tagged weight graphs with
//!   executable forward passes.
//! * [`task`] — synthetic class-conditioned image data, DDPM and
//!   flow-matching corruptions, and the inner training loop.
//! * [`coord`] — coordinate checks: activation / update magnitudes
//!   across widths.
//! * [`transfer`] — grid sweeps, random search, envelope selection, and
//!   transfer verdicts.
//! * [`tp`] — an interpreter for Avg / MatMul / OuterNonlin instruction
//!   programs and an instruction-level build of the simplified DiT
//!   forward pass, checked numerically against the direct forward.
//!
//! The crate is `no_std`-compatible (requires `alloc`); disable default
//! features and enable `libm` for freestanding builds. All collections
//! with iteration-order-sensitive output use `BTreeMap` so results are
//! deterministic.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arch;
pub mod coord;
pub mod error;
pub mod mup;
pub mod optim;
pub mod real;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod tp;
pub mod transfer;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::SeededRng;
pub use tensor::{Tape, Tensor, TensorId};
