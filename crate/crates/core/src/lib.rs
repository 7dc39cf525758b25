//! Curriculum-scheduled group-relative policy optimization for a goal-inference
//! navigation policy.
//!
//! The crate is organised bottom-up:
//!
//! - [`navsim`]: deterministic grid city, discrete UAV actions and a synthetic
//!   dataset generator with an ambiguity knob.
//! - [`attention`]: synthetic cross-modal attention and the heatmap pipeline
//!   (extract, select target tokens, fuse layers, upsample).
//! - [`difficulty`]: Soft-IoU difficulty scoring and histograms.
//! - [`scheduler`]: Gaussian curriculum sampler plus random and naive
//!   easy-to-hard baselines.
//! - [`trainer`]: softmax-linear goal-inference policy, three-part reward and
//!   group-relative updates.
//! - [`evalnav`]: look-ahead planner, closed-loop episodes and NE/SR/OSR/SPL.
//! - [`harness`]: experiment orchestration, persistence and curve emission.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod difficulty;
pub mod error;
pub mod evalnav;
pub mod grid;
pub mod harness;
pub mod navsim;
pub mod scheduler;
pub mod trainer;

pub use error::{Error, Result};
