//! Entropy spectrum pathways: coupling densities on the voxel grid, their
//! dominant eigenpair, the transition kernel it induces, and the non-local
//! propagation of force fields through that kernel.

mod coupling;
mod eigen;
mod kernel;

pub use coupling::{
    build_adjacency_coupling, build_cube_adjacency_coupling, build_gaussian_coupling,
    build_image_weighted_coupling, build_periodic_adjacency_coupling, Connectivity, CouplingKernel,
    CouplingKind,
};
pub use eigen::{
    dominant_eigenpair, dominant_eigenpair_of, separable_start, EigenOptions, EspSolution,
};
pub use kernel::{
    equilibrium_probability, gaussian_kernel_eigen, nonlocal_force, KernelSpec, TransitionKernel,
};
