//! Reconstruction of 3D volumes from stacks of posed 2D slices by fitting
//! anisotropic 3D Gaussians with a differentiable CPU splatter.
//!
//! The crate is organized around the data flow of a reconstruction run:
//! [`phantom`] generates synthetic labeled volumes and angular sweeps,
//! [`seeding`] places initial Gaussians, [`rasterizer`] renders a
//! [`model::GaussianCloud`] onto slice planes, [`autodiff`] provides
//! hand-derived analytic gradients for every Gaussian parameter,
//! [`objectives`] scores rendered slices against targets, [`trainer`] runs
//! the optimization loop with per-group learning rates and density control
//! ([`density`]), and [`io`] persists stacks, checkpoints and exported
//! volumes bit-exactly. [`experiments`] scripts ablation suites on top.

pub mod autodiff;
pub mod density;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod objectives;
pub mod phantom;
pub mod rasterizer;
pub mod seeding;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{GaussianCloud, PixelGridSpec, Pose6D, SlicePose, SliceStack};
