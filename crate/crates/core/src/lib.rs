//! Learned graph-network surrogate for transient heat conduction in voxelized
//! 3D systems, together with the finite-volume reference solver used to
//! produce its training data.

pub mod error;
pub mod eval;
pub mod gns;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod pipeline;
pub mod sysgen;
pub mod system;
pub mod train;
pub mod trajectory;
pub mod vtk;

pub use error::{Error, Result};
