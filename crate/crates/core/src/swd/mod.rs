//! Spherical wave decomposition: expansion of a volume in spherical Bessel ×
//! spherical harmonic modes on a ball, used for resampling, band-pass
//! filtering and scale/rotation estimation.

mod basis;
mod similarity;
mod special;
mod transform;

pub use basis::{build_basis, QuadratureSpec, Sampling, SwdBasis};
pub use similarity::{
    apply_similarity, estimate_similarity, refine_rotation, Resampler, SimilarityParams,
    SimilaritySearch, SCALE_BOUNDS,
};
pub use special::{
    gauss_legendre, legendre_table, sph_bessel, sph_bessel_all, sph_bessel_derivative,
    sph_bessel_zeros,
};
pub use transform::{
    angular_profile, forward_swd, forward_swd_about, inverse_swd, load_coefficients,
    radial_profile, save_coefficients, synthesize, AngularProfile, FilterSpec, RadialProfile,
    SwdCoefficients, SWD_MAGIC,
};
