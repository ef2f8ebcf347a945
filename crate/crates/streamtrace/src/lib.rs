//! Streamline tractography toolkit.
//!
//! Provides streamline geometry, TCK and NIfTI-1 subset I/O, the epsilon-ball
//! seeding metric for streamline-level tractogram comparison, a recurrent
//! tracking network trained with a teacher-student scheme, a deterministic
//! vector-field propagator, and synthetic phantoms used as test oracles.

pub mod error;
pub mod geometry;
pub mod metric;
pub mod model;
pub mod phantom;
pub mod report;
pub mod rng;
pub mod tracking;
pub mod tracts;
pub mod training;
pub mod volumes;

pub use error::{Error, Result};
