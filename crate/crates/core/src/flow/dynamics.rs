use rayon::prelude::*;

use super::{DeformationMap, Mat3, PhaseSpaceField, ShellRecord};
use crate::error::{Error, Result};
use crate::esp::TransitionKernel;
use crate::reduce::tree_sum_by;
use crate::volume::{field_jacobian, ScalarVolume, VectorVolume};

/// Force field of one state together with the squared mismatch it was
/// computed from.
#[derive(Clone, Debug)]
pub struct LocalForce {
    pub force: Vec<[f64; 3]>,
    /// Σ (I0(x) − I1(q(x)))² dV
    pub mismatch: f64,
}

fn check_geometry(state: &PhaseSpaceField, i0: &ScalarVolume, i1: &ScalarVolume) -> Result<()> {
    state
        .geometry
        .ensure_same(&i0.geometry, "reference image")?;
    state.geometry.ensure_same(&i1.geometry, "moving image")
}

/// Σ (I0 − I1(q))² dV for a position field.
pub fn mismatch(i0: &ScalarVolume, i1: &ScalarVolume, q: &VectorVolume) -> Result<f64> {
    q.geometry.ensure_same(&i0.geometry, "reference image")?;
    let g = &q.geometry;
    let ss = tree_sum_by(g.len(), &|i| {
        let r = i0.data[i] - i1.sample(q.data[i]);
        r * r
    });
    Ok(ss * g.voxel_volume())
}

/// H = (1/2V) Σ [|p|² + (I0 − I1(q))²] dV
pub fn hamiltonian_energy(
    state: &PhaseSpaceField,
    i0: &ScalarVolume,
    i1: &ScalarVolume,
) -> Result<f64> {
    check_geometry(state, i0, i1)?;
    let g = &state.geometry;
    let (q, p) = (&state.q.data, &state.p.data);
    let total = tree_sum_by(g.len(), &|i| {
        let r = i0.data[i] - i1.sample(q[i]);
        p[i][0] * p[i][0] + p[i][1] * p[i][1] + p[i][2] * p[i][2] + r * r
    });
    let dv = g.voxel_volume();
    Ok(total * dv / (2.0 * g.domain_volume()))
}

/// f = (I0 − I1(q)) ∇I1(q) J⁻¹, with the gradient of the trilinear
/// interpolant taken as a row vector.
pub fn local_force(
    state: &PhaseSpaceField,
    i0: &ScalarVolume,
    i1: &ScalarVolume,
) -> Result<LocalForce> {
    check_geometry(state, i0, i1)?;
    let g = &state.geometry;
    let (q, j) = (&state.q.data, &state.j);
    let per_voxel: Vec<([f64; 3], f64)> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let (v, grad) = i1.sample_with_gradient(q[i]);
            let r = i0.data[i] - v;
            let f = if j[i] == Mat3::identity() {
                [r * grad[0], r * grad[1], r * grad[2]]
            } else {
                match j[i].try_inverse() {
                    Some(inv) => {
                        let row = nalgebra::RowVector3::new(grad[0], grad[1], grad[2]) * inv;
                        [r * row[0], r * row[1], r * row[2]]
                    }
                    None => [f64::NAN; 3],
                }
            };
            (f, r * r)
        })
        .collect();
    let ss = tree_sum_by(per_voxel.len(), &|i| per_voxel[i].1);
    let force: Vec<[f64; 3]> = per_voxel.into_iter().map(|(f, _)| f).collect();
    if let Some(bad) = force.iter().position(|f| f.iter().any(|c| !c.is_finite())) {
        return Err(Error::NonFinite(bad));
    }
    Ok(LocalForce {
        force,
        mismatch: ss * g.voxel_volume(),
    })
}

/// One semi-implicit Euler step driven by a precomputed force: p first, then
/// q with the new p, then J from central differences of the new p. With
/// `nonlocal_positions` the position update uses the ρ-average of p instead.
pub fn advance(
    state: &PhaseSpaceField,
    force: &[[f64; 3]],
    dt: f64,
    regularizer: Option<&TransitionKernel>,
    nonlocal_positions: bool,
) -> PhaseSpaceField {
    let g = &state.geometry;
    let p_new: Vec<[f64; 3]> = state
        .p
        .data
        .par_iter()
        .zip(force.par_iter())
        .map(|(p, f)| [p[0] + dt * f[0], p[1] + dt * f[1], p[2] + dt * f[2]])
        .collect();
    let velocity = match (nonlocal_positions, regularizer) {
        (true, Some(k)) => Some(k.propagate_vec3(&p_new)),
        _ => None,
    };
    let v = velocity.as_deref().unwrap_or(&p_new);
    let q_new: Vec<[f64; 3]> = state
        .q
        .data
        .par_iter()
        .zip(v.par_iter())
        .map(|(q, v)| [q[0] + dt * v[0], q[1] + dt * v[1], q[2] + dt * v[2]])
        .collect();
    let mut j_new = field_jacobian(g, &p_new, dt);
    j_new
        .par_iter_mut()
        .zip(state.j.par_iter())
        .for_each(|(d, j)| *d += j);
    PhaseSpaceField {
        geometry: g.clone(),
        q: VectorVolume {
            geometry: g.clone(),
            data: q_new,
        },
        p: VectorVolume {
            geometry: g.clone(),
            data: p_new,
        },
        j: j_new,
        t: state.t + dt,
    }
}

/// Computes the force (ρ-averaged when a regularizer is given) and advances
/// the state by `dt`.
pub fn flow_step(
    state: &PhaseSpaceField,
    i0: &ScalarVolume,
    i1: &ScalarVolume,
    dt: f64,
    regularizer: Option<&TransitionKernel>,
) -> Result<PhaseSpaceField> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let lf = local_force(state, i0, i1).map_err(|e| as_integration_failure(e, 0, 0))?;
    let force = match regularizer {
        Some(k) => {
            state
                .geometry
                .ensure_same(k.geometry(), "transition kernel")?;
            k.propagate_vec3(&lf.force)
        }
        None => lf.force,
    };
    Ok(advance(state, &force, dt, regularizer, false))
}

pub(crate) fn as_integration_failure(e: Error, shell: usize, step: usize) -> Error {
    match e {
        Error::NonFinite(voxel) => Error::IntegrationFailure {
            shell,
            step,
            reason: format!("non-finite force at voxel {voxel}"),
        },
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuardReport {
    Ok,
    Violated(Vec<usize>),
}

impl GuardReport {
    pub fn is_ok(&self) -> bool {
        matches!(self, GuardReport::Ok)
    }
}

/// Reports every voxel where det J leaves the open band (ε, 1/ε).
pub fn jacobian_guard(state: &PhaseSpaceField, epsilon: f64) -> GuardReport {
    let hi = 1.0 / epsilon;
    let bad: Vec<usize> = state
        .j
        .par_iter()
        .enumerate()
        .filter(|(_, m)| {
            let d = m.determinant();
            !(d > epsilon && d < hi)
        })
        .map(|(i, _)| i)
        .collect();
    if bad.is_empty() {
        GuardReport::Ok
    } else {
        GuardReport::Violated(bad)
    }
}

/// (min, max) of det J; NaN determinants collapse the range to NaN.
pub fn det_range(j: &[Mat3]) -> (f64, f64) {
    j.par_iter()
        .map(|m| {
            let d = m.determinant();
            (d, d)
        })
        .reduce(
            || (f64::INFINITY, f64::NEG_INFINITY),
            |a, b| {
                if a.0.is_nan() || b.0.is_nan() {
                    (f64::NAN, f64::NAN)
                } else {
                    (a.0.min(b.0), a.1.max(b.1))
                }
            },
        )
}

/// True iff the squared mismatch strictly decreases from `q_prev` to `q_new`.
pub fn convergence_check(
    i0: &ScalarVolume,
    i1: &ScalarVolume,
    q_new: &VectorVolume,
    q_prev: &VectorVolume,
) -> Result<bool> {
    q_new
        .geometry
        .ensure_same(&i0.geometry, "reference image")?;
    q_prev
        .geometry
        .ensure_same(&i0.geometry, "reference image")?;
    let g = &i0.geometry;
    let diff = tree_sum_by(g.len(), &|i| {
        let a = i0.data[i] - i1.sample(q_new.data[i]);
        let b = i0.data[i] - i1.sample(q_prev.data[i]);
        a * a - b * b
    });
    Ok(diff * g.voxel_volume() < 0.0)
}

/// Closes the current shell: records it, composes `J_total ← J·J_total`, and
/// returns the state at rest at the same positions.
pub fn shell_restart(
    state: &PhaseSpaceField,
    map: &DeformationMap,
    energy_end: f64,
    keep_fields: bool,
) -> (PhaseSpaceField, DeformationMap) {
    let (det_min, det_max) = det_range(&state.j);
    let j_total: Vec<Mat3> = state
        .j
        .par_iter()
        .zip(map.j_total.par_iter())
        .map(|(j, t)| j * t)
        .collect();
    let mut shells = map.shells.clone();
    shells.push(ShellRecord {
        index: shells.len(),
        level: 0,
        steps: 0,
        duration: state.t,
        energy_end,
        det_min,
        det_max,
        final_q: keep_fields.then(|| state.q.clone()),
        final_j: keep_fields.then(|| state.j.clone()),
    });
    let next = PhaseSpaceField::at_rest(state.q.clone());
    let map = DeformationMap {
        geometry: map.geometry.clone(),
        q_total: state.q.clone(),
        j_total,
        shells,
    };
    (next, map)
}
