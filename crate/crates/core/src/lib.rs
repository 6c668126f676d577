//! Classifier-guided diffusion editing on procedurally generated garment
//! sprites, desk-scale and CPU-only: a minimal tensor autograd engine,
//! DDPM schedule math, a U-Net denoiser, a patch-transformer classifier
//! with attention pooling, the mask-free guided editing loop, and an
//! evaluation harness.
//!
//! File formats, checkpoints and the CLI live in the companion
//! `glyphdiff-cli` crate; this crate is pure in-memory computation.

pub mod autograd;
pub mod classifier;
pub mod denoiser;
pub mod diffusion;
pub mod editor;
pub mod eval;
pub mod glyph;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
