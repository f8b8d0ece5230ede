use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ScalarVolume};

/// Parameters of the ball / "C" pair, lengths in voxels of the smallest spacing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CSpherePair {
    pub inner_radius: f64,
    pub outer_radius: f64,
    /// Full opening angle of the conical hole, degrees. Zero closes the shell.
    pub gap_angle_deg: f64,
    /// Radius of the solid ball; the outer radius when absent.
    pub ball_radius: Option<f64>,
}

impl Default for CSpherePair {
    fn default() -> Self {
        CSpherePair {
            inner_radius: 8.0,
            outer_radius: 20.0,
            gap_angle_deg: 90.0,
            ball_radius: None,
        }
    }
}

fn ramp(d: f64) -> f64 {
    (0.5 + d).clamp(0.0, 1.0)
}

/// Returns `(c_shape, ball)`: a spherical shell with a conical hole opening
/// towards +x, and a solid ball, both centred in the grid with a one-voxel
/// linear edge ramp and values in [0, 1].
pub fn make_c_sphere_pair(
    geometry: &GridGeometry,
    params: &CSpherePair,
) -> Result<(ScalarVolume, ScalarVolume)> {
    let (r, big) = (params.inner_radius, params.outer_radius);
    let ball = params.ball_radius.unwrap_or(big);
    let h = geometry
        .spacing
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let half_min = geometry
        .extent()
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        / (2.0 * h);
    if !(r >= 0.0 && r < big && big < half_min && ball > 0.0 && ball < half_min) {
        return Err(Error::InvalidConfig(format!(
            "need 0 <= inner ({r}) < outer ({big}) and ball ({ball}) below half the grid ({half_min})"
        )));
    }
    if !(0.0..180.0).contains(&params.gap_angle_deg) {
        return Err(Error::InvalidConfig(format!(
            "gap angle must lie in [0, 180), got {}",
            params.gap_angle_deg
        )));
    }
    let half_gap = params.gap_angle_deg.to_radians() / 2.0;
    let c = geometry.center();
    let c_shape = ScalarVolume::from_fn(geometry.clone(), |p| {
        let d = [(p[0] - c[0]) / h, (p[1] - c[1]) / h, (p[2] - c[2]) / h];
        let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        let shell = ramp(big - rho).min(ramp(rho - r));
        if half_gap == 0.0 || rho == 0.0 {
            return shell;
        }
        let theta = (d[0] / rho).clamp(-1.0, 1.0).acos();
        // distance to the cone surface, signed positive outside the hole
        let off =
            (theta - half_gap).clamp(-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
        shell.min(ramp(rho * off.sin()))
    });
    let ball = ScalarVolume::from_fn(geometry.clone(), |p| {
        let rho =
            ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt() / h;
        ramp(ball - rho)
    });
    Ok((c_shape, ball))
}

/// Smooth ellipsoidal "head" filled with seeded Gaussian texture.
pub fn textured_phantom(geometry: &GridGeometry, seed: u64) -> ScalarVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = geometry.center();
    let ext = geometry.extent();
    let radii = [0.36 * ext[0], 0.42 * ext[1], 0.34 * ext[2]];
    let h = geometry
        .spacing
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let blobs: Vec<([f64; 3], f64, f64)> = (0..60)
        .map(|_| {
            let mut u = [0.0; 3];
            loop {
                for v in u.iter_mut() {
                    *v = rng.random_range(-1.0..1.0);
                }
                if u.iter().map(|v| v * v).sum::<f64>() < 1.0 {
                    break;
                }
            }
            let centre = [
                c[0] + u[0] * radii[0],
                c[1] + u[1] * radii[1],
                c[2] + u[2] * radii[2],
            ];
            let sigma = rng.random_range(2.0..5.0) * h;
            let amp = rng.random_range(-0.45..0.45);
            (centre, sigma, amp)
        })
        .collect();
    ScalarVolume::from_fn(geometry.clone(), |p| {
        let e = ((p[0] - c[0]) / radii[0]).powi(2)
            + ((p[1] - c[1]) / radii[1]).powi(2)
            + ((p[2] - c[2]) / radii[2]).powi(2);
        // soft boundary about two voxels wide
        let mask = 0.5 * (1.0 - ((e.sqrt() - 1.0) * radii[0] / (1.5 * h)).tanh());
        let texture: f64 = blobs
            .iter()
            .map(|(q, s, a)| {
                let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
                a * (-d2 / (2.0 * s * s)).exp()
            })
            .sum();
        (mask * (0.6 + texture)).max(0.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn closed_shell_volume() {
        let g = GridGeometry::cube(64);
        let p = CSpherePair {
            inner_radius: 12.0,
            outer_radius: 24.0,
            gap_angle_deg: 0.0,
            ball_radius: None,
        };
        let (shell, ball) = make_c_sphere_pair(&g, &p).unwrap();
        let want = 4.0 * PI * (24f64.powi(3) - 12f64.powi(3)) / 3.0;
        assert!((shell.sum() - want).abs() / want < 0.02);
        let want = 4.0 * PI * 24f64.powi(3) / 3.0;
        assert!((ball.sum() - want).abs() / want < 0.02);
        assert_eq!(shell.geometry, ball.geometry);
        for v in [&shell, &ball] {
            let (lo, hi) = v.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn hole_removes_the_cone() {
        let g = GridGeometry::cube(64);
        let p = CSpherePair::default();
        let (c, _) = make_c_sphere_pair(&g, &p).unwrap();
        let cap = 2.0 * PI * (1.0 - (p.gap_angle_deg.to_radians() / 2.0).cos()) / (4.0 * PI);
        let want = (1.0 - cap) * 4.0 * PI * (p.outer_radius.powi(3) - p.inner_radius.powi(3)) / 3.0;
        assert!((c.sum() - want).abs() / want < 0.03);
        // inside the hole on the +x axis, and on the opposite wall
        assert_eq!(c.at(32 + 14, 32, 32), 0.0);
        assert_eq!(c.at(32 - 14, 32, 32), 1.0);
    }

    #[test]
    fn bad_radii_are_rejected() {
        let g = GridGeometry::cube(32);
        let p = CSpherePair {
            inner_radius: 10.0,
            outer_radius: 8.0,
            ..Default::default()
        };
        assert!(make_c_sphere_pair(&g, &p).is_err());
        let p = CSpherePair {
            inner_radius: 4.0,
            outer_radius: 20.0,
            ..Default::default()
        };
        assert!(make_c_sphere_pair(&g, &p).is_err());
    }

    #[test]
    fn textured_phantom_is_seeded() {
        let g = GridGeometry::cube(24);
        let a = textured_phantom(&g, 7);
        assert_eq!(a, textured_phantom(&g, 7));
        assert_ne!(a, textured_phantom(&g, 8));
        assert_eq!(a.at(0, 0, 0), 0.0f64.max(a.at(0, 0, 0)));
        assert!(a.at(12, 12, 12) > 0.1);
    }
}
