mod error;
pub mod alignment;
pub mod fusion;
pub mod geometry;
pub mod inertial;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod reprojection;
pub mod solver;
pub mod synth;
pub mod trajectory;
pub mod triangulation;
pub mod validation;

pub use error::{Error, Result};
