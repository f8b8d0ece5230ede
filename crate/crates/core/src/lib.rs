//! Symplectomorphic registration of 3D volumes.
//!
//! Registration is a sequence of energy shells. Each shell integrates
//! Hamilton's equations for per-voxel positions and momenta on a fixed grid,
//! tracking the Jacobian of the shell map, and is restarted from rest when the
//! Jacobian leaves its admissible band. The shell Jacobians compose into the
//! Jacobian of the full map.
//!
//! Supporting modules provide entropy-spectrum-pathway transition kernels used
//! to make the momentum forcing non-local ([`esp`]), a spherical wave
//! decomposition for resampling and similarity estimation ([`swd`]), analytic
//! ground-truth deformations ([`phantom`]) and the benchmark harness
//! ([`harness`]).

pub mod error;
pub mod esp;
pub mod flow;
pub mod harness;
pub mod phantom;
pub mod reduce;
pub mod swd;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{gradient_central, rmsd, GridGeometry, ScalarVolume, VectorVolume};
