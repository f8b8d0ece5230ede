//! Shell-wise integration of Hamilton's equations for image registration.
//!
//! Positions `q` start at the voxel coordinates and are pushed by the image
//! mismatch force; momenta `p` accumulate that force and the per-voxel Jacobian
//! `J` of the shell map is integrated from the spatial derivative of `p`.

mod dynamics;
mod mapfile;
mod metric;
mod register;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::volume::{GridGeometry, VectorVolume};

pub use dynamics::{
    advance, convergence_check, det_range, flow_step, hamiltonian_energy, jacobian_guard,
    local_force, mismatch, shell_restart, GuardReport, LocalForce,
};
pub use mapfile::{load_map, save_map, write_diagnostics_csv, MAP_MAGIC};
pub use metric::{curve_length, metric_field, metric_tensor};
pub use register::{
    composition_residual, invert_map, register, warp_volume, Registration, RegistrationConfig,
    ShellDiagnostic,
};

pub type Mat3 = Matrix3<f64>;

/// Flow state on the fixed grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseSpaceField {
    pub geometry: GridGeometry,
    /// Current positions (world mm).
    pub q: VectorVolume,
    pub p: VectorVolume,
    pub j: Vec<Mat3>,
    /// Shell-local time.
    pub t: f64,
}

impl PhaseSpaceField {
    /// At rest on the identity map.
    pub fn identity(geometry: &GridGeometry) -> Self {
        Self::at_rest(VectorVolume::identity(geometry.clone()))
    }

    /// At rest at the given positions with `J = I` and `t = 0`.
    pub fn at_rest(q: VectorVolume) -> Self {
        let geometry = q.geometry.clone();
        let n = geometry.len();
        PhaseSpaceField {
            p: VectorVolume::zeros(geometry.clone()),
            j: vec![Mat3::identity(); n],
            q,
            geometry,
            t: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellRecord {
    pub index: usize,
    /// Pyramid level the shell ran on, 0 being full resolution.
    pub level: usize,
    pub steps: usize,
    pub duration: f64,
    pub energy_end: f64,
    /// Extremes of det J over every accepted state of the shell.
    pub det_min: f64,
    pub det_max: f64,
    #[serde(skip)]
    pub final_q: Option<VectorVolume>,
    #[serde(skip)]
    pub final_j: Option<Vec<Mat3>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationMap {
    pub geometry: GridGeometry,
    pub q_total: VectorVolume,
    pub j_total: Vec<Mat3>,
    pub shells: Vec<ShellRecord>,
}

impl DeformationMap {
    pub fn identity(geometry: &GridGeometry) -> Self {
        DeformationMap {
            geometry: geometry.clone(),
            q_total: VectorVolume::identity(geometry.clone()),
            j_total: vec![Mat3::identity(); geometry.len()],
            shells: Vec::new(),
        }
    }

    /// q_total(x) − x in mm.
    pub fn displacement(&self) -> VectorVolume {
        let g = &self.geometry;
        let data = self
            .q_total
            .data
            .iter()
            .enumerate()
            .map(|(i, q)| {
                let x = g.world_of(i);
                [q[0] - x[0], q[1] - x[1], q[2] - x[2]]
            })
            .collect();
        VectorVolume {
            geometry: g.clone(),
            data,
        }
    }

    /// Position the map sends an arbitrary point to, extending the displacement
    /// by its boundary value outside the grid.
    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        let u = sample_displacement(&self.q_total, x);
        [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
    }
}

/// Trilinear sample of `q − x` where `q` stores absolute positions.
pub(crate) fn sample_displacement(q: &VectorVolume, x: [f64; 3]) -> [f64; 3] {
    let g = &q.geometry;
    let (b, t) = crate::volume::cell_weights(g, x);
    let mut out = [0.0; 3];
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                let (i, j, k) = (b[0] + dx, b[1] + dy, b[2] + dz);
                let v = q.data[g.index(i, j, k)];
                let node = g.world(i, j, k);
                let w = wx * wy * wz;
                for c in 0..3 {
                    out[c] += w * (v[c] - node[c]);
                }
            }
        }
    }
    out
}

/// Componentwise trilinear sample of a matrix field.
pub(crate) fn sample_matrix(g: &GridGeometry, field: &[Mat3], x: [f64; 3]) -> Mat3 {
    let (b, t) = crate::volume::cell_weights(g, x);
    let mut out = Mat3::zeros();
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                out += field[g.index(b[0] + dx, b[1] + dy, b[2] + dz)] * (wx * wy * wz);
            }
        }
    }
    out
}
