use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ScalarVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Whirl,
    StretchAnterior,
    Twist,
    CompressAxial,
    CompressLongitudinal,
}

impl WarpKind {
    pub const ALL: [WarpKind; 5] = [
        WarpKind::Whirl,
        WarpKind::StretchAnterior,
        WarpKind::Twist,
        WarpKind::CompressAxial,
        WarpKind::CompressLongitudinal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            WarpKind::Whirl => "whirl",
            WarpKind::StretchAnterior => "stretch_anterior",
            WarpKind::Twist => "twist",
            WarpKind::CompressAxial => "compress_axial",
            WarpKind::CompressLongitudinal => "compress_longitudinal",
        }
    }

    /// Amplitude giving roughly eight voxels of peak displacement on a 128³ grid
    /// with the default extent.
    pub fn default_amplitude(self) -> f64 {
        match self {
            WarpKind::Whirl => 0.25,
            WarpKind::StretchAnterior => 0.25,
            WarpKind::Twist => 0.25,
            WarpKind::CompressAxial => 0.25,
            WarpKind::CompressLongitudinal => 0.25,
        }
    }

    /// Largest admissible |amplitude|.
    pub fn amplitude_bound(self) -> f64 {
        match self {
            WarpKind::Whirl | WarpKind::Twist => std::f64::consts::PI,
            WarpKind::StretchAnterior => 0.9,
            WarpKind::CompressAxial | WarpKind::CompressLongitudinal => 0.45,
        }
    }
}

impl std::fmt::Display for WarpKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for WarpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WarpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown warp kind {s:?}")))
    }
}

/// Smooth deformation about `center`; the axial plane is (x, y) and the
/// longitudinal axis is z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticWarp {
    pub kind: WarpKind,
    pub amplitude: f64,
    pub center: [f64; 3],
    /// Falloff length in mm.
    pub extent: f64,
}

/// 3s² − 2s³ on [0, 1], clamped, with its derivative.
fn smoothstep(s: f64) -> (f64, f64) {
    if s <= 0.0 {
        (0.0, 0.0)
    } else if s >= 1.0 {
        (1.0, 0.0)
    } else {
        (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
    }
}

fn rotation(a: f64) -> (Matrix3<f64>, Matrix3<f64>) {
    let (s, c) = a.sin_cos();
    let r = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
    let dr = Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0);
    (r, dr)
}

impl AnalyticWarp {
    pub fn new(kind: WarpKind, amplitude: f64, center: [f64; 3], extent: f64) -> Result<Self> {
        if !(amplitude.abs() <= kind.amplitude_bound()) {
            return Err(Error::WarpOutOfBounds(format!(
                "{kind} amplitude {amplitude} exceeds {}",
                kind.amplitude_bound()
            )));
        }
        if !(extent > 0.0 && extent.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::WarpOutOfBounds(format!(
                "extent {extent} and centre must be finite, extent positive"
            )));
        }
        Ok(AnalyticWarp {
            kind,
            amplitude,
            center,
            extent,
        })
    }

    /// Default warp of a kind for a grid: centred, extent a quarter of the
    /// smallest side.
    pub fn default_for(kind: WarpKind, geometry: &GridGeometry) -> Self {
        let side = geometry
            .extent()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        AnalyticWarp {
            kind,
            amplitude: kind.default_amplitude(),
            center: geometry.center(),
            extent: 0.25 * side,
        }
    }

    /// Warped point and the exact Jacobian ∂y/∂x.
    pub fn eval(&self, x: [f64; 3]) -> ([f64; 3], Matrix3<f64>) {
        let a = self.amplitude;
        let e = self.extent;
        let d = Vector3::new(
            x[0] - self.center[0],
            x[1] - self.center[1],
            x[2] - self.center[2],
        );
        let (y, jac) = match self.kind {
            WarpKind::Whirl => {
                // α = A·min(r/e, 1)·cos²(πz/(2·ez)) inside |z| < ez = 2e
                let ez = 2.0 * e;
                let r = (d.x * d.x + d.y * d.y).sqrt();
                let k = std::f64::consts::PI / (2.0 * ez);
                let (w, dw) = if d.z.abs() < ez {
                    let c = (k * d.z).cos();
                    (c * c, -k * (2.0 * k * d.z).sin())
                } else {
                    (0.0, 0.0)
                };
                let (g, dg) = if r < e { (r / e, 1.0 / e) } else { (1.0, 0.0) };
                let alpha = a * g * w;
                let grad = if r > 0.0 {
                    Vector3::new(a * dg * w * d.x / r, a * dg * w * d.y / r, a * g * dw)
                } else {
                    Vector3::new(0.0, 0.0, a * g * dw)
                };
                let (rot, drot) = rotation(alpha);
                (rot * d, rot + (drot * d) * grad.transpose())
            }
            WarpKind::Twist => {
                let th = (d.z / e).tanh();
                let beta = a * th;
                let grad = Vector3::new(0.0, 0.0, a * (1.0 - th * th) / e);
                let (rot, drot) = rotation(beta);
                (rot * d, rot + (drot * d) * grad.transpose())
            }
            WarpKind::StretchAnterior => {
                let th = (d.y / e).tanh();
                let mut j = Matrix3::identity();
                j[(1, 1)] = 1.0 + a * (1.0 - th * th);
                (Vector3::new(d.x, d.y + a * e * th, d.z), j)
            }
            WarpKind::CompressAxial => {
                // (x, y) scaled by c(z) = 1 − A·(1 − smoothstep(|z|/e))
                let (s, ds) = smoothstep(d.z.abs() / e);
                let c = 1.0 - a * (1.0 - s);
                let dc = a * ds * d.z.signum() / e;
                let j = Matrix3::new(c, 0.0, d.x * dc, 0.0, c, d.y * dc, 0.0, 0.0, 1.0);
                (Vector3::new(c * d.x, c * d.y, d.z), j)
            }
            WarpKind::CompressLongitudinal => {
                // z scaled by c(r) = 1 − A·(1 − smoothstep(r/e)), r axial radius
                let r = (d.x * d.x + d.y * d.y).sqrt();
                let (s, ds) = smoothstep(r / e);
                let c = 1.0 - a * (1.0 - s);
                let (gx, gy) = if r > 0.0 {
                    (a * ds * d.x / (r * e), a * ds * d.y / (r * e))
                } else {
                    (0.0, 0.0)
                };
                let j = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, d.z * gx, d.z * gy, c);
                (Vector3::new(d.x, d.y, c * d.z), j)
            }
        };
        (
            [
                y.x + self.center[0],
                y.y + self.center[1],
                y.z + self.center[2],
            ],
            jac,
        )
    }

    pub fn apply(&self, x: [f64; 3]) -> [f64; 3] {
        self.eval(x).0
    }

    pub fn descriptor(&self, seed: u64) -> WarpDescriptor {
        WarpDescriptor {
            kind: self.kind,
            amplitude: self.amplitude,
            center: self.center,
            extent: self.extent,
            seed,
        }
    }
}

/// Machine-readable ground truth stored next to each warped volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpDescriptor {
    pub kind: WarpKind,
    pub amplitude: f64,
    pub center: [f64; 3],
    pub extent: f64,
    pub seed: u64,
}

impl WarpDescriptor {
    pub fn warp(&self) -> Result<AnalyticWarp> {
        AnalyticWarp::new(self.kind, self.amplitude, self.center, self.extent)
    }
}

/// Solves `w(x) = y` by damped Newton iteration started at `y`.
pub fn invert_warp(w: &AnalyticWarp, y: [f64; 3], tol: f64) -> Result<[f64; 3]> {
    let target = Vector3::from(y);
    let mut x = target;
    let mut residual = {
        let (v, _) = w.eval(y);
        Vector3::from(v) - target
    };
    for _ in 0..100 {
        if residual.norm() <= tol {
            return Ok([x.x, x.y, x.z]);
        }
        let (_, jac) = w.eval([x.x, x.y, x.z]);
        let step = jac.lu().solve(&residual).unwrap_or(residual);
        let mut scale = 1.0;
        loop {
            let cand = x - step * scale;
            let r = Vector3::from(w.eval([cand.x, cand.y, cand.z]).0) - target;
            if r.norm() < residual.norm() || scale < 1e-6 {
                x = cand;
                residual = r;
                break;
            }
            scale *= 0.5;
        }
    }
    if residual.norm() <= tol {
        return Ok([x.x, x.y, x.z]);
    }
    Err(Error::InverseNoConvergence {
        point: y,
        residual: residual.norm(),
    })
}

/// output(y) = v(w⁻¹(y)): features of `v` move forward along the warp.
pub fn warp_volume_analytic(v: &ScalarVolume, w: &AnalyticWarp) -> Result<ScalarVolume> {
    let g = &v.geometry;
    let data = (0..g.len())
        .into_par_iter()
        .map(|i| invert_warp(w, g.world_of(i), 1e-9).map(|x| v.sample(x)))
        .collect::<Result<Vec<f64>>>()?;
    ScalarVolume::new(g.clone(), data)
}

#[derive(Clone, Debug)]
pub struct PanelCase {
    pub warped: ScalarVolume,
    pub warp: AnalyticWarp,
    pub descriptor: WarpDescriptor,
}

/// All five warp kinds applied to `v`. The seed jitters each warp centre by
/// up to a tenth of the extent; `amplitude_scale` multiplies the defaults.
pub fn generate_panel(v: &ScalarVolume, seed: u64, amplitude_scale: f64) -> Result<Vec<PanelCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    WarpKind::ALL
        .into_iter()
        .map(|kind| {
            let base = AnalyticWarp::default_for(kind, &v.geometry);
            let mut center = base.center;
            for c in center.iter_mut() {
                *c += rng.random_range(-0.1..0.1) * base.extent;
            }
            let warp =
                AnalyticWarp::new(kind, base.amplitude * amplitude_scale, center, base.extent)?;
            let warped = warp_volume_analytic(v, &warp)?;
            Ok(PanelCase {
                descriptor: warp.descriptor(seed),
                warped,
                warp,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::textured_phantom;
    use proptest::prelude::{prop, prop_assert, proptest, ProptestConfig};

    fn grid() -> GridGeometry {
        GridGeometry::cube(32)
    }

    fn min_det_on_lattice(w: &AnalyticWarp, g: &GridGeometry) -> f64 {
        let mut lo = f64::INFINITY;
        for k in 0..32 {
            for j in 0..32 {
                for i in 0..32 {
                    let p = [
                        g.origin[0] + g.extent()[0] * i as f64 / 31.0,
                        g.origin[1] + g.extent()[1] * j as f64 / 31.0,
                        g.origin[2] + g.extent()[2] * k as f64 / 31.0,
                    ];
                    lo = lo.min(w.eval(p).1.determinant());
                }
            }
        }
        lo
    }

    #[test]
    fn zero_amplitude_is_identity() {
        let g = grid();
        for kind in WarpKind::ALL {
            let w = AnalyticWarp {
                amplitude: 0.0,
                ..AnalyticWarp::default_for(kind, &g)
            };
            let x = [3.0, 17.5, 9.25];
            let (y, j) = w.eval(x);
            for a in 0..3 {
                assert!((y[a] - x[a]).abs() < 1e-12);
            }
            assert!((j - Matrix3::identity()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn whirl_fixes_its_centre() {
        let w = AnalyticWarp::default_for(WarpKind::Whirl, &grid());
        assert_eq!(w.apply(w.center), w.center);
    }

    #[test]
    fn defaults_are_diffeomorphic_and_bounded() {
        let g = GridGeometry::cube(128);
        for kind in WarpKind::ALL {
            let w = AnalyticWarp::default_for(kind, &g);
            assert!(min_det_on_lattice(&w, &g) > 0.05, "{kind}");
            let mut peak: f64 = 0.0;
            for i in 0..g.len() {
                let x = g.world_of(i);
                let y = w.apply(x);
                let d =
                    ((y[0] - x[0]).powi(2) + (y[1] - x[1]).powi(2) + (y[2] - x[2]).powi(2)).sqrt();
                // within the inscribed sphere, where anatomy sits
                let c = g.center();
                let r =
                    ((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2) + (x[2] - c[2]).powi(2)).sqrt();
                if r < 48.0 {
                    peak = peak.max(d);
                }
            }
            assert!(peak > 5.0 && peak < 13.0, "{kind}: {peak}");
        }
    }

    #[test]
    fn out_of_bounds_amplitudes_are_rejected() {
        assert!(matches!(
            AnalyticWarp::new(WarpKind::CompressAxial, 0.5, [0.0; 3], 1.0),
            Err(Error::WarpOutOfBounds(_))
        ));
        assert!(AnalyticWarp::new(WarpKind::StretchAnterior, -0.95, [0.0; 3], 1.0).is_err());
        assert!(AnalyticWarp::new(WarpKind::Twist, 0.3, [0.0; 3], 0.0).is_err());
    }

    #[test]
    fn twist_inverse_is_negated_twist() {
        let w = AnalyticWarp::default_for(WarpKind::Twist, &grid());
        let neg = AnalyticWarp {
            amplitude: -w.amplitude,
            ..w.clone()
        };
        for p in [[3.0, 9.0, 20.0], [25.0, 4.0, 2.0], [16.0, 16.0, 30.0]] {
            let inv = invert_warp(&w, p, 1e-10).unwrap();
            let alt = neg.apply(p);
            for a in 0..3 {
                assert!((inv[a] - alt[a]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn identity_inverse() {
        let w = AnalyticWarp {
            amplitude: 0.0,
            ..AnalyticWarp::default_for(WarpKind::Whirl, &grid())
        };
        assert_eq!(
            invert_warp(&w, [1.0, 2.0, 3.0], 1e-9).unwrap(),
            [1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn inverse_residuals_at_many_points() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in WarpKind::ALL {
            let w = AnalyticWarp::default_for(kind, &g);
            for _ in 0..2000 {
                let y = [
                    rng.random_range(0.0..31.0),
                    rng.random_range(0.0..31.0),
                    rng.random_range(0.0..31.0),
                ];
                let x = invert_warp(&w, y, 1e-6).unwrap();
                let back = w.apply(x);
                let err = ((back[0] - y[0]).powi(2)
                    + (back[1] - y[1]).powi(2)
                    + (back[2] - y[2]).powi(2))
                .sqrt();
                assert!(err <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_amplitude_panel_is_the_input() {
        let g = GridGeometry::cube(16);
        let v = textured_phantom(&g, 3);
        let panel = generate_panel(&v, 9, 0.0).unwrap();
        assert_eq!(panel.len(), 5);
        for case in panel {
            for (a, b) in case.warped.data.iter().zip(&v.data) {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn twist_preserves_the_integral() {
        let g = GridGeometry::cube(40);
        let v = textured_phantom(&g, 5);
        let w = AnalyticWarp::default_for(WarpKind::Twist, &g);
        let out = warp_volume_analytic(&v, &w).unwrap();
        assert!((out.sum() - v.sum()).abs() / v.sum() <= 0.01);
        let w = AnalyticWarp::default_for(WarpKind::Whirl, &g);
        let out = warp_volume_analytic(&v, &w).unwrap();
        assert!((out.sum() - v.sum()).abs() / v.sum() <= 0.01);
    }

    #[test]
    fn whirl_round_trip() {
        let g = GridGeometry::cube(40);
        let v = textured_phantom(&g, 5);
        let w = AnalyticWarp::default_for(WarpKind::Whirl, &g);
        let inv = AnalyticWarp {
            amplitude: -w.amplitude,
            ..w.clone()
        };
        let back = warp_volume_analytic(&warp_volume_analytic(&v, &w).unwrap(), &inv).unwrap();
        let (lo, hi) = v.min_max();
        assert!(crate::rmsd(&v, &back).unwrap() <= 0.02 * (hi - lo));
    }

    #[test]
    fn descriptor_json() {
        let w = AnalyticWarp::default_for(WarpKind::StretchAnterior, &grid());
        let text = serde_json::to_string(&w.descriptor(4)).unwrap();
        assert!(text.contains(r#""kind":"stretch_anterior""#));
        let back: WarpDescriptor = serde_json::from_str(&text).unwrap();
        assert_eq!(back.warp().unwrap(), w);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jacobian_matches_finite_differences(
            k in 0usize..5,
            p in prop::array::uniform3(1.0f64..31.0),
            scale in 0.2f64..1.0,
        ) {
            let kind = WarpKind::ALL[k];
            let base = AnalyticWarp::default_for(kind, &grid());
            let w = AnalyticWarp { amplitude: base.amplitude * scale, ..base };
            let (_, j) = w.eval(p);
            let h = 1e-6;
            for c in 0..3 {
                let mut a = p;
                let mut b = p;
                a[c] += h;
                b[c] -= h;
                let (ya, yb) = (w.apply(a), w.apply(b));
                for r in 0..3 {
                    let fd = (ya[r] - yb[r]) / (2.0 * h);
                    prop_assert!((fd - j[(r, c)]).abs() <= 1e-5 * j.abs().max().max(1.0), "{kind} {r}{c}: {fd} vs {}", j[(r, c)]);
                }
            }
        }
    }
}
