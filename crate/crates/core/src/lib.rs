//! Low-rank adaptation under label noise.
//!
//! A linear LoRA probe trained from scratch, synthetic teacher tasks with
//! controlled spectra, symmetric label noise, closed-form capacity / rank /
//! timing quantities, and dual-rank noise detection (RACT).

pub mod cli;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod ract;
pub mod setup;
pub mod theory;

pub use error::{Error, Result};
