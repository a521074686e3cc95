//! Deterministic training: data, optimizer and the multi-seed runner.

pub mod data;
pub mod optim;
pub mod runner;
