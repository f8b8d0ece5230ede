use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dynamics::{
    advance, as_integration_failure, det_range, local_force, mismatch, shell_restart,
};
use super::{sample_displacement, sample_matrix, DeformationMap, Mat3, PhaseSpaceField};
use crate::error::{Error, Result};
use crate::esp::{KernelSpec, TransitionKernel};
use crate::reduce::tree_sum_by;
use crate::volume::{GridGeometry, ScalarVolume, VectorVolume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Jacobian bound: each shell keeps ε < det J < 1/ε.
    pub epsilon: f64,
    /// Shell budget per pyramid level.
    pub max_shells: usize,
    pub max_steps_per_shell: usize,
    /// Upper bound on the time step.
    pub dt_init: f64,
    /// Per-step displacement cap in voxels.
    pub dt_max_displacement: f64,
    /// Step halvings tried before a shell is closed.
    pub dt_retries: usize,
    /// ESP kernel for the non-local momentum equation; local flow if absent.
    pub regularizer: Option<KernelSpec>,
    /// Stop once a shell lowers the mismatch by less than this fraction.
    pub convergence_tol: f64,
    /// Coarse-to-fine levels, 1 meaning full resolution only.
    pub pyramid_levels: usize,
    /// Also average the velocity in the position equation.
    pub nonlocal_positions: bool,
    /// Keep q and J of every shell on its record.
    pub keep_shell_fields: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            epsilon: 0.01,
            max_shells: 60,
            max_steps_per_shell: 200,
            dt_init: 100.0,
            dt_max_displacement: 0.4,
            dt_retries: 4,
            regularizer: None,
            convergence_tol: 1e-4,
            pyramid_levels: 1,
            nonlocal_positions: false,
            keep_shell_fields: false,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if self.max_shells < 1 {
            return bad("max_shells must be at least 1".into());
        }
        if self.max_steps_per_shell < 1 {
            return bad("max_steps_per_shell must be at least 1".into());
        }
        if !(self.dt_init > 0.0 && self.dt_init.is_finite()) {
            return bad(format!("dt_init must be positive, got {}", self.dt_init));
        }
        if !(self.dt_max_displacement > 0.0 && self.dt_max_displacement.is_finite()) {
            return bad(format!(
                "dt_max_displacement must be positive, got {}",
                self.dt_max_displacement
            ));
        }
        if !(self.convergence_tol >= 0.0) {
            return bad(format!(
                "convergence_tol must be >= 0, got {}",
                self.convergence_tol
            ));
        }
        if self.pyramid_levels < 1 {
            return bad("pyramid_levels must be at least 1".into());
        }
        Ok(())
    }
}

/// One row of the per-shell diagnostics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShellDiagnostic {
    pub index: usize,
    pub level: usize,
    pub steps: usize,
    pub duration: f64,
    pub energy_end: f64,
    pub rmsd_end: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct Registration {
    pub map: DeformationMap,
    pub diagnostics: Vec<ShellDiagnostic>,
    pub rmsd_before: f64,
    pub rmsd_after: f64,
}

impl Registration {
    pub fn steps(&self) -> usize {
        self.map.shells.iter().map(|s| s.steps).sum()
    }
}

struct ShellRun {
    state: PhaseSpaceField,
    steps: usize,
    mismatch: f64,
    /// det J extremes over every accepted state.
    det_range: (f64, f64),
}

struct Level<'a> {
    i0: &'a ScalarVolume,
    i1: &'a ScalarVolume,
    kernel: Option<TransitionKernel>,
    path_length: usize,
}

impl Level<'_> {
    fn force(&self, state: &PhaseSpaceField) -> Result<(Vec<[f64; 3]>, f64)> {
        let lf = local_force(state, self.i0, self.i1)?;
        let f = match &self.kernel {
            Some(k) => {
                (1..self.path_length).fold(k.propagate_vec3(&lf.force), |f, _| k.propagate_vec3(&f))
            }
            None => lf.force,
        };
        Ok((f, lf.mismatch))
    }
}

fn max_norm(v: &[[f64; 3]]) -> f64 {
    v.par_iter()
        .map(|a| (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt())
        .reduce(|| 0.0, f64::max)
}

/// Largest dt with dt·|p| + dt²·|f| ≤ cap, bounded by `dt_init`.
fn choose_dt(p_max: f64, f_max: f64, cap: f64, dt_init: f64) -> Option<f64> {
    if p_max == 0.0 && f_max == 0.0 {
        return None;
    }
    let dt = 2.0 * cap / (p_max + (p_max * p_max + 4.0 * f_max * cap).sqrt());
    Some(dt.min(dt_init))
}

/// Integrates one shell from rest. The shell ends when the Jacobian guard
/// keeps tripping after step halving, when the mismatch stops decreasing
/// (the state before the rise is kept), or when the step budget is spent.
fn run_shell(
    level: &Level,
    start: PhaseSpaceField,
    cfg: &RegistrationConfig,
    shell: usize,
) -> Result<ShellRun> {
    let g = start.geometry.clone();
    let cap = cfg.dt_max_displacement * g.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = 1.0 / cfg.epsilon;
    let mut state = start;
    let (mut force, mut m) = level
        .force(&state)
        .map_err(|e| as_integration_failure(e, shell, 0))?;
    let mut steps = 0;
    let mut range = (f64::INFINITY, f64::NEG_INFINITY);
    'steps: while steps < cfg.max_steps_per_shell {
        let Some(mut dt) = choose_dt(max_norm(&state.p.data), max_norm(&force), cap, cfg.dt_init)
        else {
            break;
        };
        for _ in 0..=cfg.dt_retries {
            let cand = advance(
                &state,
                &force,
                dt,
                level.kernel.as_ref(),
                cfg.nonlocal_positions,
            );
            let (lo, up) = det_range(&cand.j);
            if lo.is_nan() {
                return Err(Error::IntegrationFailure {
                    shell,
                    step: steps,
                    reason: "non-finite Jacobian".into(),
                });
            }
            if !(lo > cfg.epsilon && up < hi) {
                dt *= 0.5;
                continue;
            }
            let (f2, m2) = level
                .force(&cand)
                .map_err(|e| as_integration_failure(e, shell, steps + 1))?;
            if m2 >= m {
                if steps == 0 {
                    dt *= 0.5;
                    continue;
                }
                break 'steps;
            }
            range = (range.0.min(lo), range.1.max(up));
            state = cand;
            force = f2;
            m = m2;
            steps += 1;
            continue 'steps;
        }
        break;
    }
    Ok(ShellRun {
        state,
        steps,
        mismatch: m,
        det_range: range,
    })
}

/// q(x) = x + u_coarse(x) on a finer grid.
fn upsample_positions(q: &VectorVolume, fine: &GridGeometry) -> VectorVolume {
    let data = (0..fine.len())
        .into_par_iter()
        .map(|i| {
            let x = fine.world_of(i);
            let u = sample_displacement(q, x);
            [x[0] + u[0], x[1] + u[1], x[2] + u[2]]
        })
        .collect();
    VectorVolume {
        geometry: fine.clone(),
        data,
    }
}

fn upsample_matrices(coarse: &GridGeometry, j: &[Mat3], fine: &GridGeometry) -> Vec<Mat3> {
    (0..fine.len())
        .into_par_iter()
        .map(|i| sample_matrix(coarse, j, fine.world_of(i)))
        .collect()
}

/// Registers the moving image `i1` onto the reference `i0`: the returned map
/// `q` makes `I1(q(x))` approximate `I0(x)`.
///
/// Shells are accepted only if they strictly lower the full-resolution
/// squared mismatch; the first shell that does not is discarded and ends the
/// current pyramid level.
pub fn register(
    i0: &ScalarVolume,
    i1: &ScalarVolume,
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    cfg.validate()?;
    i0.geometry.ensure_same(&i1.geometry, "moving image")?;
    let fine = i0.geometry.clone();
    let domain = fine.domain_volume();

    let mut pyramid = vec![(i0.clone(), i1.clone())];
    while pyramid.len() < cfg.pyramid_levels {
        let (a, b) = pyramid.last().unwrap();
        match (a.downsample(), b.downsample()) {
            (Some(a), Some(b)) => pyramid.push((a, b)),
            _ => break,
        }
    }

    let identity = VectorVolume::identity(fine.clone());
    let m0 = mismatch(i0, i1, &identity)?;
    let rmsd_before = (m0 / domain).sqrt();
    let mut best = m0;
    let mut shells = Vec::new();
    let mut diagnostics = Vec::new();

    let coarsest = &pyramid.last().unwrap().0.geometry;
    let mut q_level = VectorVolume::identity(coarsest.clone());
    let mut j_level = vec![Mat3::identity(); coarsest.len()];

    for (level_idx, (a, b)) in pyramid.iter().enumerate().rev() {
        let geo = &a.geometry;
        if q_level.geometry != *geo {
            j_level = upsample_matrices(&q_level.geometry, &j_level, geo);
            q_level = upsample_positions(&q_level, geo);
        }
        let kernel = match &cfg.regularizer {
            Some(spec) => Some(spec.build(a)?),
            None => None,
        };
        let path_length = cfg.regularizer.as_ref().map_or(1, |k| k.path_length);
        let level = Level {
            i0: a,
            i1: b,
            kernel,
            path_length,
        };
        let mut map = DeformationMap {
            geometry: geo.clone(),
            q_total: q_level.clone(),
            j_total: j_level.clone(),
            shells: Vec::new(),
        };
        let mut state = PhaseSpaceField::at_rest(q_level.clone());
        for _ in 0..cfg.max_shells {
            let clock = Instant::now();
            let shell = shells.len();
            let run = run_shell(&level, state.clone(), cfg, shell)?;
            if run.steps == 0 {
                break;
            }
            let m_fine = if level_idx == 0 {
                run.mismatch
            } else {
                mismatch(i0, i1, &upsample_positions(&run.state.q, &fine))?
            };
            if !(m_fine < best) {
                break;
            }
            let energy_end = m_fine / (2.0 * domain);
            let (next, mut next_map) =
                shell_restart(&run.state, &map, energy_end, cfg.keep_shell_fields);
            let rec = next_map.shells.last_mut().unwrap();
            rec.index = shell;
            rec.level = level_idx;
            rec.steps = run.steps;
            (rec.det_min, rec.det_max) = run.det_range;
            shells.push(rec.clone());
            diagnostics.push(ShellDiagnostic {
                index: shell,
                level: level_idx,
                steps: run.steps,
                duration: rec.duration,
                energy_end,
                rmsd_end: (m_fine / domain).sqrt(),
                wall_seconds: clock.elapsed().as_secs_f64(),
            });
            let gain = best - m_fine;
            best = m_fine;
            state = next;
            map = next_map;
            if gain < cfg.convergence_tol * (best + gain) {
                break;
            }
        }
        q_level = map.q_total;
        j_level = map.j_total;
    }

    let map = DeformationMap {
        geometry: fine,
        q_total: q_level,
        j_total: j_level,
        shells,
    };
    Ok(Registration {
        map,
        diagnostics,
        rmsd_before,
        rmsd_after: (best / domain).sqrt(),
    })
}

/// Inverse map obtained by registering with the roles of the images swapped.
pub fn invert_map(
    i0: &ScalarVolume,
    i1: &ScalarVolume,
    cfg: &RegistrationConfig,
) -> Result<Registration> {
    register(i1, i0, cfg)
}

/// RMS over the grid of |q_fwd(q_inv(x)) − x| in voxels (of the smallest spacing).
pub fn composition_residual(forward: &DeformationMap, inverse: &DeformationMap) -> Result<f64> {
    forward
        .geometry
        .ensure_same(&inverse.geometry, "inverse map")?;
    let g = &forward.geometry;
    let h = g.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let ss = tree_sum_by(g.len(), &|i| {
        let x = g.world_of(i);
        let y = forward.apply(inverse.q_total.data[i]);
        ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2) + (y[2] - x[2]).powi(2)) / (h * h)
    });
    Ok((ss / g.len() as f64).sqrt())
}

/// output(x) = v(q_total(x)), trilinear.
pub fn warp_volume(v: &ScalarVolume, map: &DeformationMap) -> Result<ScalarVolume> {
    v.geometry.ensure_same(&map.geometry, "deformation map")?;
    let data = map.q_total.data.par_iter().map(|q| v.sample(*q)).collect();
    Ok(ScalarVolume {
        geometry: v.geometry.clone(),
        data,
    })
}
