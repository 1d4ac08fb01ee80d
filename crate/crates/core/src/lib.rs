//! Flow-conditioned single-stream action detection.
//!
//! The crate bundles a small autodiff core ([`numerics`]), optical-flow estimation
//! ([`flowfield`]), the motion condition and modulation layers ([`condition`]), an
//! SSD-style detector ([`detector`]), tube linking and video mAP ([`tubes`]), a
//! synthetic moving-sprite video generator ([`synthdata`]) and the experiment
//! driver used by the CLI ([`experiment`]).

pub mod boxes;
pub mod condition;
pub mod config;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod flowfield;
pub mod numerics;
pub mod records;
pub mod synthdata;
pub mod tubes;

pub use error::{Error, Result};
