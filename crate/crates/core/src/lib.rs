//! Medial atom ray fields.
//!
//! A network maps an oriented ray to a handful of spheres (medial atoms); the
//! ray is intersected with the spheres analytically and the nearest hit is the
//! surface point. This crate holds the geometry, a small autodiff engine, the
//! network, losses, training loop, data generation, rendering and metrics.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod raycast;
pub mod render;
pub mod rng;
pub mod trainer;

pub use error::{MarfError, Result};
