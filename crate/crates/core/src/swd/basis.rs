use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::special::{gauss_legendre, sph_bessel_all, sph_bessel_zeros};
use crate::error::{Error, Result};

/// How a volume is read at quadrature nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    Trilinear,
    /// Catmull-Rom cubic convolution.
    #[default]
    Cubic,
}

/// Node counts of the spherical quadrature: Gauss-Legendre in r on [0, a],
/// Gauss-Legendre in cos θ and uniform in φ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub n_r: usize,
    pub n_theta: usize,
    pub n_phi: usize,
    #[serde(default)]
    pub sampling: Sampling,
}

/// Upper bound on the n-th zero of j_l for n ≤ n_max, l ≤ l_max.
fn zero_bound(l_max: usize, n_max: usize) -> f64 {
    (n_max as f64 + 0.5 * l_max as f64 + 1.0) * PI
}

impl QuadratureSpec {
    /// Smallest rule that passes the resolution guard, with some headroom.
    pub fn for_orders(l_max: usize, n_max: usize) -> Self {
        QuadratureSpec {
            n_r: zero_bound(l_max, n_max).ceil() as usize + 16,
            n_theta: 2 * (l_max + 1),
            n_phi: 2 * l_max + 2,
            sampling: Sampling::default(),
        }
    }
}

/// Dirichlet spherical wave basis on a ball of radius `a`:
/// R_ln(r) = j_l(k_ln r)/√N_ln with j_l(k_ln a) = 0 and N_ln = (a³/2)·j_{l+1}(k_ln a)².
#[derive(Clone, Debug)]
pub struct SwdBasis {
    pub a: f64,
    pub l_max: usize,
    pub n_max: usize,
    /// k[l][n-1]
    pub k: Vec<Vec<f64>>,
    /// norm[l][n-1] = N_ln
    pub norm: Vec<Vec<f64>>,
    pub quadrature: QuadratureSpec,
    pub(crate) r_nodes: Vec<f64>,
    /// Radial weights including r².
    pub(crate) r_weights: Vec<f64>,
    pub(crate) cos_theta: Vec<f64>,
    pub(crate) theta_weights: Vec<f64>,
    /// Uniform radial table of R and dR/dr per (l, n) for fast synthesis.
    table_len: usize,
    table: Vec<[f64; 2]>,
}

impl SwdBasis {
    pub fn mode_count(&self) -> usize {
        (self.l_max + 1) * (self.l_max + 1) * self.n_max
    }

    /// Position of (l, m, n) in lexicographic order, n ≥ 1.
    #[inline]
    pub fn index(&self, l: usize, m: i64, n: usize) -> usize {
        (l * l + (m + l as i64) as usize) * self.n_max + (n - 1)
    }

    /// R_ln(r), evaluated directly.
    pub fn radial(&self, l: usize, n: usize, r: f64) -> f64 {
        let k = self.k[l][n - 1];
        sph_bessel_all(l, k * r)[l] / self.norm[l][n - 1].sqrt()
    }

    /// R_ln(r) for all (l, n) at once from the cubic Hermite table, written
    /// to `out[l * n_max + n - 1]`. Zero for r ≥ a.
    pub fn radial_all(&self, r: f64, out: &mut [f64]) {
        let m = self.table_len;
        if r >= self.a {
            out.fill(0.0);
            return;
        }
        let h = self.a / (m - 1) as f64;
        let s = (r / h).max(0.0);
        let i = (s.floor() as usize).min(m - 2);
        let t = s - i as f64;
        let (t2, t3) = (t * t, t * t * t);
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = (t3 - 2.0 * t2 + t) * h;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = (t3 - t2) * h;
        for (mode, o) in out.iter_mut().enumerate() {
            let row = &self.table[mode * m..(mode + 1) * m];
            let (p0, p1) = (row[i], row[i + 1]);
            *o = h00 * p0[0] + h10 * p0[1] + h01 * p1[0] + h11 * p1[1];
        }
    }

    pub fn phi_nodes(&self) -> Vec<f64> {
        let n = self.quadrature.n_phi;
        (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect()
    }
}

/// Builds the basis. Errors if the quadrature cannot resolve the requested
/// orders: n_θ ≥ 2(L+1), n_φ ≥ 2L+1 and n_r ≥ 2·k_max·a/π.
pub fn build_basis(
    a: f64,
    l_max: usize,
    n_max: usize,
    quadrature: QuadratureSpec,
) -> Result<SwdBasis> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "domain radius must be positive, got {a}"
        )));
    }
    if n_max == 0 {
        return Err(Error::InvalidConfig("N_max must be at least 1".into()));
    }
    let QuadratureSpec {
        n_r,
        n_theta,
        n_phi,
        ..
    } = quadrature;
    if n_theta < 2 * (l_max + 1) {
        return Err(Error::QuadratureTooCoarse(format!(
            "n_theta = {n_theta} < 2(L_max+1) = {}",
            2 * (l_max + 1)
        )));
    }
    if n_phi < 2 * l_max + 1 {
        return Err(Error::QuadratureTooCoarse(format!(
            "n_phi = {n_phi} < 2L_max+1 = {}",
            2 * l_max + 1
        )));
    }
    let zeros = sph_bessel_zeros(l_max, n_max);
    let z_max = zeros.iter().flatten().cloned().fold(0.0, f64::max);
    let need_r = (2.0 * z_max / PI).ceil() as usize;
    if n_r < need_r {
        return Err(Error::QuadratureTooCoarse(format!(
            "n_r = {n_r} < {need_r} for k_max·a = {z_max:.3}"
        )));
    }
    let k: Vec<Vec<f64>> = zeros
        .iter()
        .map(|row| row.iter().map(|z| z / a).collect())
        .collect();
    let norm: Vec<Vec<f64>> = zeros
        .iter()
        .enumerate()
        .map(|(l, row)| {
            row.iter()
                .map(|&z| {
                    let j = sph_bessel_all(l + 1, z)[l + 1];
                    0.5 * a * a * a * j * j
                })
                .collect()
        })
        .collect();

    let (x, w) = gauss_legendre(n_r);
    let r_nodes: Vec<f64> = x.iter().map(|x| 0.5 * a * (x + 1.0)).collect();
    let r_weights: Vec<f64> = w
        .iter()
        .zip(&r_nodes)
        .map(|(w, r)| 0.5 * a * w * r * r)
        .collect();
    let (cos_theta, theta_weights) = gauss_legendre(n_theta);

    // about sixteen samples per radian of the fastest mode
    let table_len = (16.0 * z_max).ceil() as usize + 2;
    let h = a / (table_len - 1) as f64;
    let table: Vec<[f64; 2]> = (0..(l_max + 1) * n_max)
        .into_par_iter()
        .flat_map_iter(|mode| {
            let (l, n) = (mode / n_max, mode % n_max);
            let kk = k[l][n];
            let scale = norm[l][n].sqrt().recip();
            (0..table_len).map(move |i| {
                let x = kk * h * i as f64;
                let j = sph_bessel_all(l + 1, x);
                let d = if x == 0.0 {
                    if l == 1 {
                        1.0 / 3.0
                    } else {
                        0.0
                    }
                } else {
                    l as f64 / x * j[l] - j[l + 1]
                };
                [j[l] * scale, d * kk * scale]
            })
        })
        .collect();

    Ok(SwdBasis {
        a,
        l_max,
        n_max,
        k,
        norm,
        quadrature,
        r_nodes,
        r_weights,
        cos_theta,
        theta_weights,
        table_len,
        table,
    })
}
