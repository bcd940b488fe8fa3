//! Joint pilot design, channel estimation and mixed-ADC allocation for
//! one-bit / mixed-resolution mmWave massive MIMO receivers.

pub mod airlink;
pub mod bundle;
pub mod cenet;
pub mod channel;
pub mod config;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod graph;
pub mod manifest;
pub mod modulation;
pub mod nn;
pub mod pdnet;
pub mod selnet;
pub mod trainer;

pub use error::{Error, Result};
