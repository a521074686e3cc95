//! Orthogonal quadratic complement (OQC) feed-forward blocks inside a small
//! pre-norm vision transformer, built on a self-contained reverse-mode
//! autodiff engine.

pub mod gradcheck;
pub mod params;
pub mod tensor;
pub mod complement;
pub mod hosts;
pub mod tokens;
pub mod vit;
pub mod metrics;
pub mod analysis;
pub mod config;
pub mod train;
pub mod verify;
