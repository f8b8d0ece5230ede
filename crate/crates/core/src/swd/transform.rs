use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::basis::{build_basis, QuadratureSpec, Sampling, SwdBasis};
use super::special::{legendre_table_into, lm_index};
use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ScalarVolume};

pub const SWD_MAGIC: &[u8; 8] = b"SREGSWD1";

/// Expansion coefficients f_lmn of a volume about `center`.
#[derive(Clone, Debug)]
pub struct SwdCoefficients {
    pub basis: Arc<SwdBasis>,
    pub center: [f64; 3],
    /// Lexicographic in (l, m, n); see [`SwdBasis::index`].
    pub data: Vec<Complex64>,
}

impl SwdCoefficients {
    pub fn zeros(basis: Arc<SwdBasis>, center: [f64; 3]) -> Self {
        let data = vec![Complex64::new(0.0, 0.0); basis.mode_count()];
        SwdCoefficients {
            basis,
            center,
            data,
        }
    }

    pub fn get(&self, l: usize, m: i64, n: usize) -> Complex64 {
        self.data[self.basis.index(l, m, n)]
    }

    pub fn set(&mut self, l: usize, m: i64, n: usize, v: Complex64) {
        let i = self.basis.index(l, m, n);
        self.data[i] = v;
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest violation of f_{l,−m,n} = (−1)^m·conj(f_{l,m,n}).
    pub fn conjugate_symmetry_error(&self) -> f64 {
        let b = &self.basis;
        let mut worst: f64 = 0.0;
        for l in 0..=b.l_max {
            for m in 1..=l as i64 {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                for n in 1..=b.n_max {
                    let d = self.get(l, -m, n) - self.get(l, m, n).conj() * sign;
                    worst = worst.max(d.norm());
                }
            }
        }
        worst
    }
}

/// Mode multipliers F_lmn applied during synthesis.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum FilterSpec {
    #[default]
    AllPass,
    /// Keeps l_min ≤ l ≤ l_max and n_min ≤ n ≤ n_max.
    Band {
        l_min: usize,
        l_max: usize,
        n_min: usize,
        n_max: usize,
    },
    /// F = l_gain[l]·n_gain[n-1]; missing entries count as zero.
    Separable { l_gain: Vec<f64>, n_gain: Vec<f64> },
    /// One multiplier per mode in coefficient order.
    PerMode { gains: Vec<f64> },
}

impl FilterSpec {
    pub fn low_pass(l_max: usize, n_max: usize) -> Self {
        FilterSpec::Band {
            l_min: 0,
            l_max,
            n_min: 1,
            n_max,
        }
    }

    pub fn high_pass(l_min: usize, n_min: usize) -> Self {
        FilterSpec::Band {
            l_min,
            l_max: usize::MAX,
            n_min,
            n_max: usize::MAX,
        }
    }

    pub fn band_pass(l: (usize, usize), n: (usize, usize)) -> Self {
        FilterSpec::Band {
            l_min: l.0,
            l_max: l.1,
            n_min: n.0,
            n_max: n.1,
        }
    }

    /// Multipliers must be finite and at most one in magnitude.
    pub fn validate(&self) -> Result<()> {
        let gains: Vec<f64> = match self {
            FilterSpec::Separable { l_gain, n_gain } => {
                l_gain.iter().chain(n_gain).cloned().collect()
            }
            FilterSpec::PerMode { gains } => gains.clone(),
            _ => Vec::new(),
        };
        if gains.iter().any(|g| !g.is_finite() || g.abs() > 1.0) {
            return Err(Error::InvalidConfig(
                "filter gains must be finite with |F| ≤ 1".into(),
            ));
        }
        Ok(())
    }

    fn gains(&self, basis: &SwdBasis) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = vec![1.0; basis.mode_count()];
        for l in 0..=basis.l_max {
            for m in -(l as i64)..=l as i64 {
                for n in 1..=basis.n_max {
                    let i = basis.index(l, m, n);
                    out[i] = match self {
                        FilterSpec::AllPass => 1.0,
                        FilterSpec::Band {
                            l_min,
                            l_max,
                            n_min,
                            n_max,
                        } => f64::from(u8::from(
                            (*l_min..=*l_max).contains(&l) && (*n_min..=*n_max).contains(&n),
                        )),
                        FilterSpec::Separable { l_gain, n_gain } => {
                            l_gain.get(l).copied().unwrap_or(0.0)
                                * n_gain.get(n - 1).copied().unwrap_or(0.0)
                        }
                        FilterSpec::PerMode { gains } => gains.get(i).copied().unwrap_or(0.0),
                    };
                }
            }
        }
        Ok(out)
    }
}

fn inscribed_radius(g: &GridGeometry) -> f64 {
    g.extent()
        .iter()
        .map(|e| 0.5 * e)
        .fold(f64::INFINITY, f64::min)
}

/// Transform about the centre of the volume's grid.
pub fn forward_swd(v: &ScalarVolume, basis: &Arc<SwdBasis>) -> SwdCoefficients {
    forward_swd_about(v, basis, v.geometry.center())
}

/// f_lmn = ∫ v·R_ln·Y_l^m* r² dr dΩ over the ball of radius a about `center`.
/// Samples outside the sphere inscribed in the grid count as zero.
pub fn forward_swd_about(
    v: &ScalarVolume,
    basis: &Arc<SwdBasis>,
    center: [f64; 3],
) -> SwdCoefficients {
    let b = basis.as_ref();
    let q = b.quadrature;
    let (n_r, n_t, n_p) = (q.n_r, q.n_theta, q.n_phi);
    let g = &v.geometry;
    let gc = g.center();
    let limit = inscribed_radius(g) + 1e-9;
    let phis = b.phi_nodes();
    let (sin_p, cos_p): (Vec<f64>, Vec<f64>) = phis.iter().map(|p| p.sin_cos()).unzip();
    let sin_t: Vec<f64> = b.cos_theta.iter().map(|c| (1.0 - c * c).sqrt()).collect();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_p);
    let lmax = b.l_max;
    let tri = lm_index(lmax, lmax) + 1;
    let mut legendre = vec![0.0; n_t * tri];
    for (j, chunk) in legendre.chunks_mut(tri).enumerate() {
        legendre_table_into(lmax, b.cos_theta[j], sin_t[j], chunk);
    }

    // per radial shell: T[l, m] = Σ_θ w_θ P̄_l^|m| (±) Σ_φ (2π/n_φ) v e^{−imφ}
    let per_shell: Vec<Vec<Complex64>> = (0..n_r)
        .into_par_iter()
        .map(|i| {
            let r = b.r_nodes[i];
            let mut t = vec![Complex64::new(0.0, 0.0); (lmax + 1) * (lmax + 1)];
            let mut ring = vec![Complex64::new(0.0, 0.0); n_p];
            for j in 0..n_t {
                for k in 0..n_p {
                    let p = [
                        center[0] + r * sin_t[j] * cos_p[k],
                        center[1] + r * sin_t[j] * sin_p[k],
                        center[2] + r * b.cos_theta[j],
                    ];
                    let d2: f64 = (0..3).map(|a| (p[a] - gc[a]).powi(2)).sum();
                    let s = if d2.sqrt() > limit {
                        0.0
                    } else {
                        match q.sampling {
                            Sampling::Trilinear => v.sample(p),
                            Sampling::Cubic => v.sample_cubic(p),
                        }
                    };
                    ring[k] = Complex64::new(s, 0.0);
                }
                fft.process(&mut ring);
                let wt = b.theta_weights[j] * 2.0 * PI / n_p as f64;
                let pl = &legendre[j * tri..(j + 1) * tri];
                for l in 0..=lmax {
                    for m in 0..=l {
                        let p = pl[lm_index(l, m)] * wt;
                        t[l * l + l + m] += ring[m] * p;
                        if m > 0 {
                            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                            t[l * l + l - m] += ring[n_p - m] * (p * sign);
                        }
                    }
                }
            }
            t
        })
        .collect();

    let mut coeffs = SwdCoefficients::zeros(basis.clone(), center);
    let radial: Vec<Vec<f64>> = (0..n_r)
        .map(|i| {
            let r = b.r_nodes[i];
            (0..(lmax + 1) * b.n_max)
                .map(|mode| b.radial(mode / b.n_max, mode % b.n_max + 1, r))
                .collect()
        })
        .collect();
    for l in 0..=lmax {
        for m in -(l as i64)..=l as i64 {
            let slot = (l * l) as i64 + l as i64 + m;
            for n in 1..=b.n_max {
                let mut acc = Complex64::new(0.0, 0.0);
                for i in 0..n_r {
                    acc += per_shell[i][slot as usize]
                        * (b.r_weights[i] * radial[i][l * b.n_max + n - 1]);
                }
                coeffs.set(l, m, n, acc);
            }
        }
    }
    coeffs
}

/// Σ F_lmn f_lmn R_ln(r) Y_l^m(θ, φ) at world points; zero for r ≥ a.
pub fn synthesize(
    c: &SwdCoefficients,
    filter: &FilterSpec,
    points: &[[f64; 3]],
) -> Result<Vec<f64>> {
    let b = c.basis.as_ref();
    let gains = filter.gains(b)?;
    let weighted: Vec<Complex64> = c.data.iter().zip(&gains).map(|(f, g)| f * g).collect();
    let lmax = b.l_max;
    let nmax = b.n_max;
    let tri = lm_index(lmax, lmax) + 1;
    Ok(points
        .par_iter()
        .map_init(
            || (vec![0.0; (lmax + 1) * nmax], vec![0.0; tri]),
            |(radial, leg), p| {
                let d = [p[0] - c.center[0], p[1] - c.center[1], p[2] - c.center[2]];
                let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                if r >= b.a {
                    return 0.0;
                }
                b.radial_all(r, radial);
                let rho = (d[0] * d[0] + d[1] * d[1]).sqrt();
                let (ct, st) = if r > 0.0 {
                    (d[2] / r, rho / r)
                } else {
                    (1.0, 0.0)
                };
                legendre_table_into(lmax, ct, st, leg);
                let e1 = if rho > 0.0 {
                    Complex64::new(d[0] / rho, d[1] / rho)
                } else {
                    Complex64::new(1.0, 0.0)
                };
                let mut value = 0.0;
                for l in 0..=lmax {
                    let rad = &radial[l * nmax..(l + 1) * nmax];
                    let mut phase = Complex64::new(1.0, 0.0);
                    for m in 0..=l {
                        let radial_sum = |mm: i64| {
                            let base = b.index(l, mm, 1);
                            weighted[base..base + nmax]
                                .iter()
                                .zip(rad)
                                .map(|(f, r)| f * r)
                                .sum::<Complex64>()
                        };
                        let pl = leg[lm_index(l, m)];
                        // Y_l^m = P̄ e^{imφ}; Y_l^{−m} = (−1)^m P̄ e^{−imφ}
                        let mut term = (radial_sum(m as i64) * phase).re;
                        if m > 0 {
                            let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                            term += sign * (radial_sum(-(m as i64)) * phase.conj()).re;
                        }
                        value += pl * term;
                        phase *= e1;
                    }
                }
                value
            },
        )
        .collect())
}

/// Synthesis at every voxel of `target`.
pub fn inverse_swd(
    c: &SwdCoefficients,
    filter: &FilterSpec,
    target: &GridGeometry,
) -> Result<ScalarVolume> {
    let points: Vec<[f64; 3]> = (0..target.len()).map(|i| target.world_of(i)).collect();
    ScalarVolume::new(target.clone(), synthesize(c, filter, &points)?)
}

/// I(r) = Σ_n F f_00n R_0n(r) Y_0^0, the spherically averaged part.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile {
    pub a: f64,
    /// (k_0n, f_00n / (2√π·√N_0n))
    pub terms: Vec<(f64, f64)>,
}

impl RadialProfile {
    pub fn eval(&self, r: f64) -> f64 {
        if r >= self.a {
            return 0.0;
        }
        self.terms
            .iter()
            .map(|&(k, c)| {
                let x = k * r;
                c * if x == 0.0 { 1.0 } else { x.sin() / x }
            })
            .sum()
    }
}

/// A(θ, φ) = Σ_l N_l1^{-1/2} Σ_m F f_lm1 Y_l^m(θ, φ), built from n = 1 modes.
#[derive(Clone, Debug, PartialEq)]
pub struct AngularProfile {
    pub l_max: usize,
    /// Indexed l² + l + m.
    pub terms: Vec<Complex64>,
}

impl AngularProfile {
    pub fn eval(&self, theta: f64, phi: f64) -> f64 {
        let mut leg = vec![0.0; lm_index(self.l_max, self.l_max) + 1];
        let row = self.row(theta, &mut leg);
        Self::eval_row(&row, phi)
    }

    /// h_m(θ) = Σ_l c_lm P̄_l^|m|(cos θ) (with the sign for negative m), so that
    /// A(θ, φ) = Σ_m h_m e^{imφ}. Index m + l_max.
    pub(crate) fn row(&self, theta: f64, leg: &mut [f64]) -> Vec<Complex64> {
        let lmax = self.l_max;
        legendre_table_into(lmax, theta.cos(), theta.sin().abs(), leg);
        let mut h = vec![Complex64::new(0.0, 0.0); 2 * lmax + 1];
        for l in 0..=lmax {
            for m in 0..=l {
                let p = leg[lm_index(l, m)];
                h[lmax + m] += self.terms[l * l + l + m] * p;
                if m > 0 {
                    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                    h[lmax - m] += self.terms[l * l + l - m] * (p * sign);
                }
            }
        }
        h
    }

    pub(crate) fn eval_row(h: &[Complex64], phi: f64) -> f64 {
        let lmax = (h.len() - 1) / 2;
        let e1 = Complex64::from_polar(1.0, phi);
        let mut phase = Complex64::new(1.0, 0.0);
        let mut value = h[lmax].re;
        for m in 1..=lmax {
            phase *= e1;
            value += (h[lmax + m] * phase).re + (h[lmax - m] * phase.conj()).re;
        }
        value
    }
}

/// Radial profile truncated to n ≤ `order` (all stored modes if `None`).
pub fn radial_profile(
    c: &SwdCoefficients,
    filter: &FilterSpec,
    order: Option<usize>,
) -> Result<RadialProfile> {
    let b = c.basis.as_ref();
    let gains = filter.gains(b)?;
    let top = order.unwrap_or(b.n_max).min(b.n_max);
    let y00 = 0.5 / PI.sqrt();
    let terms = (1..=top)
        .map(|n| {
            let i = b.index(0, 0, n);
            (
                b.k[0][n - 1],
                gains[i] * c.data[i].re * y00 / b.norm[0][n - 1].sqrt(),
            )
        })
        .collect();
    Ok(RadialProfile { a: b.a, terms })
}

/// Angular profile truncated to l ≤ `order` (all stored modes if `None`).
pub fn angular_profile(
    c: &SwdCoefficients,
    filter: &FilterSpec,
    order: Option<usize>,
) -> Result<AngularProfile> {
    let b = c.basis.as_ref();
    let gains = filter.gains(b)?;
    let lmax = order.unwrap_or(b.l_max).min(b.l_max);
    let mut terms = vec![Complex64::new(0.0, 0.0); (lmax + 1) * (lmax + 1)];
    for l in 0..=lmax {
        let scale = b.norm[l][0].sqrt().recip();
        for m in -(l as i64)..=l as i64 {
            let i = b.index(l, m, 1);
            terms[((l * l + l) as i64 + m) as usize] = c.data[i] * (gains[i] * scale);
        }
    }
    Ok(AngularProfile { l_max: lmax, terms })
}

/// Writes magic, a, L_max, N_max, centre, then complex64 (f32 pairs) in
/// (l, m, n) order, little-endian.
pub fn save_coefficients(c: &SwdCoefficients, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * c.data.len());
    buf.extend_from_slice(SWD_MAGIC);
    buf.write_f64::<LittleEndian>(c.basis.a)?;
    buf.write_u32::<LittleEndian>(c.basis.l_max as u32)?;
    buf.write_u32::<LittleEndian>(c.basis.n_max as u32)?;
    for x in c.center {
        buf.write_f64::<LittleEndian>(x)?;
    }
    for z in &c.data {
        buf.write_f32::<LittleEndian>(z.re as f32)?;
        buf.write_f32::<LittleEndian>(z.im as f32)?;
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a coefficient dump, rebuilding the basis with the default
/// quadrature for its orders.
pub fn load_coefficients(path: &Path) -> Result<SwdCoefficients> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < 48 || &bytes[..8] != SWD_MAGIC {
        return Err(bad("missing SREGSWD1 magic"));
    }
    let mut rd = &bytes[8..];
    let a = rd.read_f64::<LittleEndian>()?;
    let l_max = rd.read_u32::<LittleEndian>()? as usize;
    let n_max = rd.read_u32::<LittleEndian>()? as usize;
    let mut center = [0.0; 3];
    for x in center.iter_mut() {
        *x = rd.read_f64::<LittleEndian>()?;
    }
    if l_max > 512 || n_max == 0 || n_max > 512 {
        return Err(bad("implausible orders"));
    }
    let count = (l_max + 1) * (l_max + 1) * n_max;
    if rd.len() != 8 * count {
        return Err(Error::TruncatedPayload {
            expected: 8 * count,
            found: rd.len(),
        });
    }
    let basis = Arc::new(build_basis(
        a,
        l_max,
        n_max,
        QuadratureSpec::for_orders(l_max, n_max),
    )?);
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let re = rd.read_f32::<LittleEndian>()? as f64;
        let im = rd.read_f32::<LittleEndian>()? as f64;
        data.push(Complex64::new(re, im));
    }
    Ok(SwdCoefficients {
        basis,
        center,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::swd::fixtures::blobs;
    use crate::swd::special::legendre_table;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn setup(n: usize, order: usize) -> (GridGeometry, Arc<SwdBasis>) {
        let g = GridGeometry::cube(n);
        let a = 0.5 * (n - 1) as f64;
        (
            g,
            Arc::new(
                build_basis(a, order, order, QuadratureSpec::for_orders(order, order)).unwrap(),
            ),
        )
    }

    fn ball_norm(v: &ScalarVolume, a: f64) -> f64 {
        let c = v.geometry.center();
        let ss: f64 = (0..v.geometry.len())
            .filter(|&i| {
                let p = v.geometry.world_of(i);
                (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>() < a * a
            })
            .map(|i| v.data[i] * v.data[i])
            .sum();
        (ss * v.geometry.voxel_volume()).sqrt()
    }

    fn relative_error(a: &ScalarVolume, b: &ScalarVolume) -> f64 {
        let num: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        let den: f64 = b.data.iter().map(|y| y * y).sum();
        (num / den).sqrt()
    }

    /// R_ln(r)·Re Y_l^m sampled on the grid, with m ≥ 0.
    fn pure_mode(g: &GridGeometry, b: &SwdBasis, l: usize, m: usize, n: usize) -> ScalarVolume {
        let c = g.center();
        ScalarVolume::from_fn(g.clone(), |p| {
            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
            let r = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if r >= b.a {
                return 0.0;
            }
            let ct = if r > 0.0 { d[2] / r } else { 1.0 };
            let leg = legendre_table(l, ct, (1.0 - ct * ct).max(0.0).sqrt());
            b.radial(l, n, r) * leg[lm_index(l, m)] * (m as f64 * d[1].atan2(d[0])).cos()
        })
    }

    #[test]
    fn constant_has_only_monopole_modes() {
        let (g, b) = setup(24, 6);
        let f = forward_swd(&ScalarVolume::filled(g, 2.0), &b);
        let peak = f.norm();
        for l in 0..=6 {
            for m in -(l as i64)..=l as i64 {
                for n in 1..=6 {
                    if l > 0 {
                        assert!(f.get(l, m, n).norm() < 1e-12 * peak);
                    }
                }
            }
        }
        assert!(f.get(0, 0, 1).norm() > 0.1 * peak);
    }

    #[test]
    fn zero_in_zero_out() {
        let (g, b) = setup(16, 4);
        let f = forward_swd(&ScalarVolume::filled(g.clone(), 0.0), &b);
        assert!(f.data.iter().all(|c| c.norm() == 0.0));
        let back = inverse_swd(
            &SwdCoefficients::zeros(b, g.center()),
            &FilterSpec::AllPass,
            &g,
        )
        .unwrap();
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_basis_mode_transforms_to_a_single_coefficient() {
        let (g, b) = setup(48, 6);
        let v = pure_mode(&g, &b, 0, 0, 1);
        let f = forward_swd(&v, &b);
        assert!((f.get(0, 0, 1).re - 1.0).abs() < 1e-3, "{}", f.get(0, 0, 1));
        for (i, c) in f.data.iter().enumerate() {
            if i != b.index(0, 0, 1) {
                assert!(c.norm() <= 1e-3);
            }
        }
        // a real m = 2 mode splits evenly between ±m
        let v = pure_mode(&g, &b, 3, 2, 2);
        let f = forward_swd(&v, &b);
        let half = std::f64::consts::FRAC_1_SQRT_2 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((f.get(3, 2, 2).re - half).abs() < 2e-3);
        assert!((f.get(3, -2, 2).re - half).abs() < 2e-3);
    }

    #[test]
    fn round_trip_of_a_smooth_blob() {
        let (g, b) = setup(48, 16);
        let v = blobs(&g, None);
        let f = forward_swd(&v, &b);
        let back = inverse_swd(&f, &FilterSpec::AllPass, &g).unwrap();
        assert!(
            relative_error(&back, &v) <= 1e-3,
            "{}",
            relative_error(&back, &v)
        );
        assert!(f.conjugate_symmetry_error() <= 1e-8);
    }

    #[test]
    fn trilinear_sampling_is_available() {
        let g = GridGeometry::cube(24);
        let q = QuadratureSpec {
            sampling: Sampling::Trilinear,
            ..QuadratureSpec::for_orders(6, 6)
        };
        let b = Arc::new(build_basis(11.5, 6, 6, q).unwrap());
        let v = blobs(&g, None);
        let back = inverse_swd(&forward_swd(&v, &b), &FilterSpec::AllPass, &g).unwrap();
        assert!(relative_error(&back, &v) < 0.1);
    }

    #[test]
    fn low_pass_removes_a_high_order_mode() {
        let (g, b) = setup(16, 8);
        let mut f = SwdCoefficients::zeros(b.clone(), g.center());
        f.set(8, 3, 2, Complex64::new(0.4, 0.3));
        f.set(8, -3, 2, Complex64::new(-0.4, 0.3));
        let full = inverse_swd(&f, &FilterSpec::AllPass, &g).unwrap();
        let low = inverse_swd(&f, &FilterSpec::low_pass(2, 8), &g).unwrap();
        let norm = |v: &ScalarVolume| v.data.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(norm(&full) > 0.0);
        assert!(norm(&low) <= 1e-6 * norm(&full));
        let band = inverse_swd(&f, &FilterSpec::band_pass((8, 8), (2, 2)), &g).unwrap();
        assert!(relative_error(&band, &full) < 1e-14);
        let high = inverse_swd(&f, &FilterSpec::high_pass(3, 1), &g).unwrap();
        assert!(relative_error(&high, &full) < 1e-14);
    }

    #[test]
    fn filters_validate_and_serialize() {
        assert!(FilterSpec::PerMode {
            gains: vec![0.5, 1.5]
        }
        .validate()
        .is_err());
        assert!(FilterSpec::Separable {
            l_gain: vec![f64::NAN],
            n_gain: vec![]
        }
        .validate()
        .is_err());
        let f = FilterSpec::low_pass(4, 3);
        let text = toml::to_string(&f).unwrap();
        assert_eq!(toml::from_str::<FilterSpec>(&text).unwrap(), f);
    }

    #[test]
    fn separable_filter_scales_modes() {
        let (g, b) = setup(16, 4);
        let v = blobs(&g, None);
        let f = forward_swd(&v, &b);
        let pts = [g.world(9, 7, 8), g.world(5, 8, 10)];
        let half = FilterSpec::Separable {
            l_gain: vec![0.5; 5],
            n_gain: vec![1.0; 4],
        };
        let all = synthesize(&f, &FilterSpec::AllPass, &pts).unwrap();
        let got = synthesize(&f, &half, &pts).unwrap();
        for (a, h) in all.iter().zip(&got) {
            assert!((0.5 * a - h).abs() < 1e-12);
        }
    }

    #[test]
    fn spherically_symmetric_volume_has_flat_angular_profile() {
        let (g, b) = setup(32, 8);
        let c = g.center();
        let v = ScalarVolume::from_fn(g, |p| {
            let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
            (-r2 / 50.0).exp()
        });
        let f = forward_swd(&v, &b);
        let ang = angular_profile(&f, &FilterSpec::AllPass, None).unwrap();
        let base = ang.eval(0.3, 0.0);
        assert!(base.abs() > 0.0);
        for &(t, p) in &[(0.1, 1.0), (1.2, 2.5), (2.9, -1.0), (1.57, 4.0)] {
            assert!((ang.eval(t, p) - base).abs() <= 1e-3 * base.abs());
        }
    }

    #[test]
    fn constant_volume_radial_profile_converges_to_the_constant() {
        // a constant does not vanish at r = a, so the truncated Dirichlet
        // series rings; the ringing must shrink as N grows
        let g = GridGeometry::cube(32);
        let deviation = |order: usize| {
            let b = Arc::new(
                build_basis(15.5, 0, order, QuadratureSpec::for_orders(0, order)).unwrap(),
            );
            let f = forward_swd(&ScalarVolume::filled(g.clone(), 3.0), &b);
            let prof = radial_profile(&f, &FilterSpec::AllPass, None).unwrap();
            (0..=50)
                .map(|i| (0.3 + 0.3 * i as f64 / 50.0) * b.a)
                .map(|r| (prof.eval(r) - 3.0).abs())
                .fold(0.0, f64::max)
        };
        let d: Vec<f64> = [8, 16, 32].into_iter().map(deviation).collect();
        assert!(d[1] < d[0] && d[2] < d[1], "{d:?}");
        assert!(d[2] < 0.05 * 3.0, "{d:?}");
    }

    #[test]
    fn radial_profile_follows_scaling() {
        let (g, b) = setup(32, 12);
        let c = g.center();
        let shape = |s: f64| {
            ScalarVolume::from_fn(g.clone(), move |p| {
                let r2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() / (s * s);
                (-r2 / 12.0).exp() + 0.3 * (-r2 / 40.0).exp()
            })
        };
        let p1 = radial_profile(&forward_swd(&shape(1.0), &b), &FilterSpec::AllPass, None).unwrap();
        let p2 = radial_profile(&forward_swd(&shape(1.2), &b), &FilterSpec::AllPass, None).unwrap();
        for i in 0..30 {
            let r = 0.45 * b.a * i as f64 / 30.0;
            assert!((p2.eval(r) - p1.eval(r / 1.2)).abs() < 5e-3 * p1.eval(0.0));
        }
    }

    #[test]
    fn coefficient_file_round_trip() {
        let (g, b) = setup(16, 5);
        let f = forward_swd(&blobs(&g, None), &b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.swd");
        save_coefficients(&f, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], SWD_MAGIC);
        assert_eq!(bytes.len(), 8 + 8 + 4 + 4 + 24 + 8 * b.mode_count());
        let back = load_coefficients(&path).unwrap();
        assert_eq!(back.center, f.center);
        assert_eq!(back.basis.l_max, 5);
        for (x, y) in back.data.iter().zip(&f.data) {
            assert!((x - y).norm() <= 1e-6 * (1.0 + y.norm()));
        }
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_coefficients(&path),
            Err(Error::TruncatedPayload { .. })
        ));
        std::fs::write(
            &path,
            b"NOTSWD01aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa",
        )
        .unwrap();
        assert!(matches!(
            load_coefficients(&path),
            Err(Error::MalformedHeader { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn coefficients_are_bounded_and_conjugate_symmetric(
            off in proptest::array::uniform3(-4.0f64..4.0),
            width in 1.5f64..4.0,
            amp in -3.0f64..3.0,
        ) {
            let g = GridGeometry::cube(20);
            let c = g.center();
            let v = ScalarVolume::from_fn(g.clone(), |p| {
                let e: f64 = (0..3).map(|a| (p[a] - c[a] - off[a]).powi(2)).sum();
                amp * (-0.5 * e / (width * width)).exp()
            });
            let bound = ball_norm(&v, 9.5);
            for order in [2usize, 5, 8] {
                let b = Arc::new(build_basis(9.5, order, order, QuadratureSpec::for_orders(order, order)).unwrap());
                let f = forward_swd(&v, &b);
                prop_assert!(f.norm() <= 1.1 * bound + 1e-12);
                prop_assert!(f.conjugate_symmetry_error() <= 1e-8);
            }
        }
    }
}
