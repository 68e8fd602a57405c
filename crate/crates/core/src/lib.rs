//! Spiking neural network training with pluggable spatial credit assignment.

pub mod credit;
pub mod data;
pub mod error;
pub mod experiment;
pub mod local;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod numerics;
pub mod online;
pub mod verify;

pub use error::{Error, Result};
