//! Patterson-map to electron-density toolkit.
//!
//! The crate covers the full desk-scale pipeline:
//!
//! * [`grid`] — 3d grid containers, Fourier transforms, resolution geometry
//! * [`xtal`] — structure factors, density and Patterson synthesis
//! * [`datagen`] — procedural toy-molecule dataset generation and storage
//! * [`model`] — the CrysFormer: patch tokens with one-way attention over
//!   partial-structure tokens
//! * [`unet`] — baseline 3d U-Net with residual squeeze-excitation blocks
//! * [`train`] — loss, Adam loop, shape-binned batching, refining runs
//! * [`metrics`] — Pearson correlation and phase-error analysis

pub mod conv;
pub mod datagen;
pub mod grid;
pub mod io;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod unet;
pub mod util;
pub mod xtal;
