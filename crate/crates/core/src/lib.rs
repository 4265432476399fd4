//! Direct localization of a static emitter with a virtual large array: a
//! moving, rotating receiver whose snapshots are fused with per-snapshot
//! clock offsets.

pub mod baselines;
pub mod error;
pub mod fisher;
pub mod geometry;
pub mod initializer;
pub mod nomp;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
pub use geometry::{Pose, Rotation, Spherical, Vec3};
pub use signal::{ArrayGeometry, OfdmGrid, Scenario, Snapshot, C64};
