//! Two-stage masked diffusion training at desk scale.
//!
//! Masked pre-training regresses injected noise on the visible token subset
//! of each image (token dropping plus a positional table), then standard
//! denoising fine-tuning takes over. The crate also ships reverse-process
//! samplers (ancestral, DDIM, Euler–Maruyama VP-SDE, masked marginal
//! sampling), Fréchet / energy-distance evaluation and a small CLI.

pub mod cli;
pub mod compute;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod objective;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
