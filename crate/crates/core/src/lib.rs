//! Gaussian-embedding recommender engine.
//!
//! Users and items are diagonal Gaussians; a prediction draws `K` samples
//! for each side, lays out all `K²` sample pairs as a `K×K×2D` cube and feeds
//! it through a two-layer CNN and an MLP to a sigmoid probability.

pub mod analysis;
pub mod cli;
pub mod data;
pub mod eval;
pub mod model;
pub mod ndcore;
pub mod trainer;
