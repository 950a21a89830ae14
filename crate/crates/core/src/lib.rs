//! Core library for a transformer-based motion planner on synthetic urban
//! driving scenes: scenario generation, rasterization, a trajectory-proposal
//! vocabulary, a mixture-of-experts planner model with its own reverse-mode
//! autodiff, LQR tracking control, reactive traffic, closed-loop simulation,
//! scoring, and scaling-law sweeps.

pub mod control;
pub mod geom;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod raster;
pub mod scaling;
pub mod scenario;
pub mod sim;
pub mod tensor;
pub mod traffic;
pub mod vocab;
