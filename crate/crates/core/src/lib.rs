//! Retrieval-augmented prediction of 2D object affordances.
//!
//! A query object is matched against an affordance memory of prior
//! interactions. The static contact point is transferred from the best
//! match by dense feature correspondence; the post-contact action direction
//! is regressed by an alignment model that attends over several retrieved
//! references, each conditioned on its own action vector and weighted by a
//! learned gate combined with retrieval similarity. Predictions can be lifted
//! to 3D with a pinhole camera model and a depth map.

pub mod correspondence;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod lifting;
pub mod memory;
pub mod model;
pub mod numeric;
pub mod retrieval;
mod store;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
