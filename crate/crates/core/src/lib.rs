//! First- and second-order MeanFlow on analytic Gaussian-mixture data.
//!
//! The crate is organized bottom-up:
//!
//! - [`schedule`]: interpolation schedules and per-sample fields.
//! - [`mixture`]: closed-form marginal fields, RK4 reference paths, and
//!   marginal average velocity/acceleration.
//! - [`autodiff`]: dual numbers, a time-conditioned MLP with JVP and
//!   backprop, and Adam.
//! - [`objectives`]: flow-matching and MeanFlow losses.
//! - [`sampler`]: one-step and multi-step samplers plus convergence-order
//!   estimation.
//! - [`vit`]: a minimal ViT with exact and low-rank Taylor attention.
//! - [`scaling`]: runtime-exponent measurement.
//!
//! Inner loops go through [`par`], which uses rayon when the `parallel`
//! feature (on by default) is enabled.

pub mod autodiff;
pub mod distill;
pub mod energy;
pub mod error;
pub mod mixture;
pub mod objectives;
pub mod par;
pub mod sampler;
pub mod scaling;
pub mod schedule;
pub mod stats;
pub mod train;
pub mod validate;
pub mod vit;

pub use error::{Error, Result};
