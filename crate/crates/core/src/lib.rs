//! Inverse rendering of geometry, PBR materials and environment lighting from
//! multi-view images, built around a neural SDF and a differentiable
//! physically-based volume renderer. Includes a synthetic-scene oracle for
//! generating verifiable ground-truth datasets, mesh extraction with baked
//! material attributes, and an evaluation suite.

pub mod autodiff;
pub mod camera;
pub mod error;
pub mod eval;
pub mod fields;
pub mod io;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod oracle;
pub mod render;
pub mod shading;
pub mod trainer;
#[cfg(test)]
mod shading_tests;

pub use error::{Error, Result};
