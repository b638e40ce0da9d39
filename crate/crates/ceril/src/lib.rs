//! Continuous event-based reinforcement learning laboratory.
//!
//! Classic control environments are sub-stepped and rendered to grayscale
//! frames, converted into continuous event streams by an event-camera
//! model, encoded by exponential-decay convolution layers, and trained
//! with a continuous-time PPO formulation. Everything runs on a small
//! from-scratch reverse-mode tape; `f32` and `f64` share one generic core.

pub mod envs;
pub mod events;
pub mod nn;
pub mod raster;
pub mod scalar;
pub mod volume;

pub use scalar::{DefaultScalar, Scalar};
