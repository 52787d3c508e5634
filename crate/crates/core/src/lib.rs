//! Volumetric particle velocimetry: synthetic scenes, tomographic (MART) and
//! energy-based (IPR) particle reconstruction, sparse constellation
//! descriptors and variational flow estimation.

pub mod config;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod io;
pub mod ipr;
pub mod kdtree;
pub mod mart;
pub mod pipeline;
pub mod subpixel;
pub mod synth;

pub use error::{Error, Result};
