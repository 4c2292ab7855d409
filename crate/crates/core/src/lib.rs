//! Consistency-guided flow SDE sampling with exactly solvable velocity
//! oracles, plus the geometry and physics needed to drive it end to end.

pub mod error;
pub mod flow;
pub mod geometry;
pub mod latent;
pub mod metrics;
pub mod oracle;
pub mod physics;
pub mod pipeline;
pub mod scene;
pub mod sde;
pub mod verify;

pub use error::{Error, Result};
pub use flow::{TimePoint, TimeSchedule, VelocityField};
pub use latent::{LatentVideo, Shape, VideoMask};
pub use oracle::VelocityOracle;
