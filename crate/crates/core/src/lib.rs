//! Exact scores, manifold estimation and reverse-SDE samplers for diffusion
//! models whose data live on low-dimensional manifolds in high ambient dimension.

pub mod concentration;
pub mod diffusion;
pub mod error;
pub mod estimators;
pub mod fit;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod poly;
pub mod registry;
pub mod rng;
pub mod samplers;
pub mod stats;

pub use error::{LabError, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
