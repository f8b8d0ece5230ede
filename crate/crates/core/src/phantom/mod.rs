//! Ground-truth fixtures: the ball / "C" shell pair, a textured head-like
//! volume, and five smooth analytic deformations with exact Jacobians.

mod shapes;
mod warp;

pub use shapes::{make_c_sphere_pair, textured_phantom, CSpherePair};
pub use warp::{
    generate_panel, invert_warp, warp_volume_analytic, AnalyticWarp, PanelCase, WarpDescriptor,
    WarpKind,
};
