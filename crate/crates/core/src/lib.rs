//! Reinforcement-learned active selection of image patches.

pub mod agent;
pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod features;
pub mod harness;
pub mod pool;
pub mod pool_io;
pub mod qnet;
pub mod replay;
pub mod stats;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
