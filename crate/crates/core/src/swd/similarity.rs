use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::basis::SwdBasis;
use super::transform::{
    angular_profile, forward_swd_about, radial_profile, synthesize, AngularProfile, FilterSpec,
    RadialProfile, SwdCoefficients,
};
use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ScalarVolume};

pub const SCALE_BOUNDS: (f64, f64) = (0.5, 2.0);

/// Uniform scale and rotation about `center`. The rotation is
/// R = R_z(φ)·R_y(θ)·R_z(ψ); the two-angle estimator leaves ψ at zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityParams {
    pub scale: f64,
    pub theta: f64,
    pub phi: f64,
    #[serde(default)]
    pub psi: f64,
    pub center: [f64; 3],
}

fn wrap(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

impl SimilarityParams {
    pub fn identity(center: [f64; 3]) -> Self {
        SimilarityParams {
            scale: 1.0,
            theta: 0.0,
            phi: 0.0,
            psi: 0.0,
            center,
        }
    }

    /// Checks the scale bounds and wraps the angles into (−π, π].
    pub fn new(scale: f64, theta: f64, phi: f64, psi: f64, center: [f64; 3]) -> Result<Self> {
        if !(SCALE_BOUNDS.0..=SCALE_BOUNDS.1).contains(&scale) {
            return Err(Error::InvalidConfig(format!(
                "scale {scale} outside [0.5, 2]"
            )));
        }
        if ![theta, phi, psi]
            .iter()
            .chain(&center)
            .all(|x| x.is_finite())
        {
            return Err(Error::InvalidConfig(
                "similarity parameters must be finite".into(),
            ));
        }
        Ok(SimilarityParams {
            scale,
            theta: wrap(theta),
            phi: wrap(phi),
            psi: wrap(psi),
            center,
        })
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        let rz = |a: f64| {
            let (s, c) = a.sin_cos();
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
        };
        let (s, c) = self.theta.sin_cos();
        let ry = Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c);
        rz(self.phi) * ry * rz(self.psi)
    }

    /// Where the output point `y` reads from: c + R⁻¹(y − c)/s.
    pub fn source_point(&self, y: [f64; 3]) -> [f64; 3] {
        let c = Vector3::from(self.center);
        let x = c + self.rotation().transpose() * (Vector3::from(y) - c) / self.scale;
        [x.x, x.y, x.z]
    }

    /// Parameters undoing this transform.
    pub fn inverse(&self) -> Self {
        SimilarityParams {
            scale: 1.0 / self.scale,
            theta: -self.theta,
            phi: -self.psi,
            psi: -self.phi,
            center: self.center,
        }
    }
}

/// Resampling method for [`apply_similarity`].
#[derive(Clone, Debug)]
pub enum Resampler {
    Trilinear,
    /// Expand about the similarity centre and synthesize at the source points.
    Swd(Arc<SwdBasis>),
}

/// output(y) = v(c + R⁻¹(y − c)/s): structures of `v` are rotated by R and
/// scaled by s about c.
pub fn apply_similarity(
    v: &ScalarVolume,
    params: &SimilarityParams,
    target: &GridGeometry,
    resampler: &Resampler,
) -> Result<ScalarVolume> {
    if !(params.scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "scale must be positive, got {}",
            params.scale
        )));
    }
    let points: Vec<[f64; 3]> = (0..target.len())
        .into_par_iter()
        .map(|i| params.source_point(target.world_of(i)))
        .collect();
    let data = match resampler {
        Resampler::Trilinear => points.par_iter().map(|&p| v.sample(p)).collect(),
        Resampler::Swd(basis) => {
            let coeffs = forward_swd_about(v, basis, params.center);
            synthesize(&coeffs, &FilterSpec::AllPass, &points)?
        }
    };
    ScalarVolume::new(target.clone(), data)
}

/// Search settings for [`estimate_similarity`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySearch {
    /// Orders used by the coarse pass (capped by the stored orders).
    pub coarse_l: usize,
    pub coarse_n: usize,
    /// Grid cell of the coarse angular search, degrees.
    pub coarse_step_deg: f64,
    /// Number of log-spaced scales in the coarse scale scan.
    pub scale_samples: usize,
    /// Also search the polar-angle shift θ; otherwise only φ.
    pub search_theta: bool,
}

impl Default for SimilaritySearch {
    fn default() -> Self {
        SimilaritySearch {
            coarse_l: 8,
            coarse_n: 8,
            coarse_step_deg: 10.0,
            scale_samples: 61,
            search_theta: true,
        }
    }
}

const RADIAL_SAMPLES: usize = 256;
const ANGULAR_THETA: usize = 36;
const ANGULAR_PHI: usize = 72;

fn radial_mismatch(p0: &RadialProfile, p1: &RadialProfile, s: f64, r_max: f64) -> f64 {
    let h = r_max / RADIAL_SAMPLES as f64;
    (0..RADIAL_SAMPLES)
        .map(|i| {
            let r = (i as f64 + 0.5) * h;
            (p0.eval(r) - p1.eval(s * r)).powi(2)
        })
        .sum::<f64>()
        * h
}

struct AngularGrid {
    thetas: Vec<f64>,
    phis: Vec<f64>,
    reference: Vec<f64>,
}

impl AngularGrid {
    fn new(p0: &AngularProfile) -> Self {
        let thetas: Vec<f64> = (0..ANGULAR_THETA)
            .map(|i| PI * (i as f64 + 0.5) / ANGULAR_THETA as f64)
            .collect();
        let phis: Vec<f64> = (0..ANGULAR_PHI)
            .map(|k| 2.0 * PI * k as f64 / ANGULAR_PHI as f64)
            .collect();
        let reference = thetas
            .iter()
            .flat_map(|&t| phis.iter().map(move |&p| p0.eval(t, p)))
            .collect();
        AngularGrid {
            thetas,
            phis,
            reference,
        }
    }

    fn energy(&self) -> f64 {
        self.reference.iter().map(|v| v * v).sum::<f64>()
    }

    /// ∫∫ (A0(θ, φ) − A1(θ + θ_r, φ + φ_r))² dθ dφ on the midpoint grid.
    fn mismatch(&self, p1: &AngularProfile, theta_r: f64, phi_r: f64) -> f64 {
        let mut leg = vec![0.0; (p1.l_max + 1) * (p1.l_max + 2) / 2];
        let mut total = 0.0;
        for (i, &t) in self.thetas.iter().enumerate() {
            let mut ts = t + theta_r;
            let mut flip = 0.0;
            // leaving [0, π] continues over the pole onto the opposite meridian
            ts = ts.rem_euclid(2.0 * PI);
            if ts > PI {
                ts = 2.0 * PI - ts;
                flip = PI;
            }
            let row = p1.row(ts, &mut leg);
            for (k, &p) in self.phis.iter().enumerate() {
                let d = self.reference[i * self.phis.len() + k]
                    - AngularProfile::eval_row(&row, p + phi_r + flip);
                total += d * d;
            }
        }
        total * (PI / ANGULAR_THETA as f64) * (2.0 * PI / ANGULAR_PHI as f64)
    }
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Compass search from `start`, halving the step down to `min_step`.
fn compass(f: impl Fn(&[f64]) -> f64, start: Vec<f64>, step: f64, min_step: f64) -> Vec<f64> {
    let mut x = start;
    let mut fx = f(&x);
    let mut h = step;
    while h >= min_step {
        let mut improved = false;
        for d in 0..x.len() {
            for sign in [1.0, -1.0] {
                let mut y = x.clone();
                y[d] += sign * h;
                let fy = f(&y);
                if fy < fx {
                    x = y;
                    fx = fy;
                    improved = true;
                }
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    x
}

fn check_compatible(c0: &SwdCoefficients, c1: &SwdCoefficients) -> Result<()> {
    let (b0, b1) = (&c0.basis, &c1.basis);
    if (b0.a - b1.a).abs() > 1e-12 * b0.a || b0.l_max != b1.l_max || b0.n_max != b1.n_max {
        return Err(Error::GeometryMismatch(format!(
            "SWD bases differ: a {} vs {}, L {} vs {}, N {} vs {}",
            b0.a, b1.a, b0.l_max, b1.l_max, b0.n_max, b1.n_max
        )));
    }
    Ok(())
}

/// Scale and (θ, φ) such that `c1` resembles `c0` moved by
/// [`apply_similarity`] with the returned parameters.
///
/// The scale minimises the squared mismatch of the radial profiles over
/// r ∈ [0, a/2] (a log-spaced scan at coarse order, then golden section at
/// full order). The angles minimise the squared mismatch of the angular
/// profiles under the coordinate shift (θ + θ_r, φ + φ_r), first on a coarse
/// grid at coarse order, then by compass search at full order.
pub fn estimate_similarity(
    c0: &SwdCoefficients,
    c1: &SwdCoefficients,
    search: &SimilaritySearch,
) -> Result<SimilarityParams> {
    check_compatible(c0, c1)?;
    let b = &c0.basis;
    let none = FilterSpec::AllPass;
    let r_max = b.a / SCALE_BOUNDS.1;

    // scale
    let coarse_n = Some(search.coarse_n.max(1));
    let (r0c, r1c) = (
        radial_profile(c0, &none, coarse_n)?,
        radial_profile(c1, &none, coarse_n)?,
    );
    let (r0, r1) = (
        radial_profile(c0, &none, None)?,
        radial_profile(c1, &none, None)?,
    );
    let energy = |p: &RadialProfile| {
        radial_mismatch(
            p,
            &RadialProfile {
                a: p.a,
                terms: vec![],
            },
            1.0,
            r_max,
        )
    };
    if !(energy(&r0) > 1e-24 && energy(&r1) > 1e-24) {
        return Err(Error::DegenerateProfile(
            "radial profile has no energy".into(),
        ));
    }
    let samples = search.scale_samples.max(3);
    let (lo, hi) = (SCALE_BOUNDS.0.ln(), SCALE_BOUNDS.1.ln());
    let grid: Vec<f64> = (0..samples)
        .map(|i| (lo + (hi - lo) * i as f64 / (samples - 1) as f64).exp())
        .collect();
    let scores: Vec<f64> = grid
        .iter()
        .map(|&s| radial_mismatch(&r0c, &r1c, s, r_max))
        .collect();
    let best = (0..samples)
        .min_by(|&i, &j| scores[i].total_cmp(&scores[j]))
        .unwrap_or(0);
    let bracket = (
        grid[best.saturating_sub(1)],
        grid[(best + 1).min(samples - 1)],
    );
    let scale = golden_section(
        |s| radial_mismatch(&r0, &r1, s, r_max),
        bracket.0,
        bracket.1,
        1e-7,
    );

    // angles
    let coarse_l = Some(search.coarse_l);
    let (a0c, a1c) = (
        angular_profile(c0, &none, coarse_l)?,
        angular_profile(c1, &none, coarse_l)?,
    );
    let (a0, a1) = (
        angular_profile(c0, &none, None)?,
        angular_profile(c1, &none, None)?,
    );
    let (grid_c, grid_f) = (AngularGrid::new(&a0c), AngularGrid::new(&a0));
    if !(grid_f.energy() > 1e-24 && AngularGrid::new(&a1).energy() > 1e-24) {
        return Err(Error::DegenerateProfile(
            "angular profile has no energy".into(),
        ));
    }
    let step = search.coarse_step_deg.to_radians();
    let n_phi = (2.0 * PI / step).round().max(1.0) as i64;
    let n_theta = if search.search_theta {
        (PI / (2.0 * step)).floor() as i64
    } else {
        0
    };
    let candidates: Vec<(f64, f64)> = (-n_theta..=n_theta)
        .flat_map(|i| {
            (0..n_phi).map(move |k| (i as f64 * step, wrap(k as f64 * 2.0 * PI / n_phi as f64)))
        })
        .collect();
    let scores: Vec<f64> = candidates
        .par_iter()
        .map(|&(t, p)| grid_c.mismatch(&a1c, t, p))
        .collect();
    let best = (0..candidates.len())
        .min_by(|&i, &j| scores[i].total_cmp(&scores[j]))
        .unwrap_or(0);
    let (t0, p0) = candidates[best];
    let refined = if search.search_theta {
        compass(
            |x| grid_f.mismatch(&a1, x[0], x[1]),
            vec![t0, p0],
            0.5 * step,
            1e-4,
        )
    } else {
        let p = compass(
            |x| grid_f.mismatch(&a1, 0.0, x[0]),
            vec![p0],
            0.5 * step,
            1e-4,
        );
        vec![0.0, p[0]]
    };
    SimilarityParams::new(scale, refined[0], refined[1], 0.0, c0.center)
}

/// Optional full three-angle refinement: scores a coarse ZYZ rotation grid
/// (at the given scale) by voxel RMSD between `moving` mapped by the candidate
/// and `fixed` on a decimated lattice, then polishes the best by compass search.
pub fn refine_rotation(
    fixed: &ScalarVolume,
    moving: &ScalarVolume,
    start: &SimilarityParams,
    step_deg: f64,
) -> Result<SimilarityParams> {
    fixed
        .geometry
        .ensure_same(&moving.geometry, "rotation refinement")?;
    let g = &fixed.geometry;
    let stride = 2;
    let points: Vec<usize> = (0..g.len())
        .filter(|&i| {
            let c = g.coords(i);
            c.iter().all(|x| x % stride == 0)
        })
        .collect();
    // moving ≈ fixed moved by params, so fixed(x) ≈ moving(c + R(x − c)s)
    let score = |p: &SimilarityParams| -> f64 {
        let inv = p.inverse();
        points
            .iter()
            .map(|&i| (moving.sample(inv.source_point(g.world_of(i))) - fixed.data[i]).powi(2))
            .sum::<f64>()
    };
    let step = step_deg.to_radians();
    let n = (PI / step).round().max(1.0) as i64;
    let candidates: Vec<SimilarityParams> = (0..=n)
        .flat_map(|i| (0..2 * n).flat_map(move |j| (0..2 * n).map(move |k| (i, j, k))))
        .map(|(i, j, k)| SimilarityParams {
            theta: i as f64 * step,
            phi: wrap(j as f64 * step),
            psi: wrap(k as f64 * step),
            ..*start
        })
        .chain(std::iter::once(*start))
        .collect();
    let scores: Vec<f64> = candidates.par_iter().map(score).collect();
    let best = (0..candidates.len())
        .min_by(|&i, &j| scores[i].total_cmp(&scores[j]))
        .unwrap_or(0);
    let b = candidates[best];
    let x = compass(
        |x| {
            score(&SimilarityParams {
                theta: x[0],
                phi: x[1],
                psi: x[2],
                ..b
            })
        },
        vec![b.theta, b.phi, b.psi],
        0.5 * step,
        1e-3,
    );
    SimilarityParams::new(b.scale, x[0], x[1], x[2], b.center)
}
