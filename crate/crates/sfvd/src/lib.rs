//! Desk-scale laboratory for single-frame video set distillation: learnable
//! per-class frames are crossfaded into videos and optimized by trajectory
//! matching against expert training runs, then evaluated by training fresh
//! models on the distilled set.

pub mod bound;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod evaluation;
pub mod interpolation;
pub mod manifest;
pub mod models;
pub mod ppm;
pub mod rng;
pub mod scalar;
pub mod svg;
pub mod trajectories;

pub use error::{Error, Result};

/// Worker-thread cap for parallel expert / evaluation runs, from the
/// `SFVD_WORKERS` environment variable (defaults to the machine parallelism).
pub fn worker_count() -> usize {
    if let Ok(raw) = std::env::var("SFVD_WORKERS") {
        if let Ok(n) = raw.trim().parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

pub fn run_cli() -> i32 {
    cli::run()
}
