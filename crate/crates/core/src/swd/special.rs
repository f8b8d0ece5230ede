//! Spherical Bessel functions, their zeros, Gauss-Legendre rules and
//! orthonormal associated Legendre functions.

use std::f64::consts::PI;

/// j_0(x) .. j_lmax(x).
///
/// Upward recurrence is stable while l < x; below that the values come from
/// Miller's downward recurrence normalised by Σ(2l+1)j_l² = 1.
pub fn sph_bessel_all(lmax: usize, x: f64) -> Vec<f64> {
    let mut out = vec![0.0; lmax + 1];
    if x == 0.0 {
        out[0] = 1.0;
        return out;
    }
    let x = x.abs();
    if x > lmax as f64 {
        let (s, c) = x.sin_cos();
        out[0] = s / x;
        if lmax >= 1 {
            out[1] = s / (x * x) - c / x;
        }
        for l in 1..lmax {
            out[l + 1] = (2 * l + 1) as f64 / x * out[l] - out[l - 1];
        }
        return out;
    }
    let start = lmax + 20 + (x.sqrt() * 6.0) as usize + x as usize;
    let mut next = 0.0;
    let mut cur = 1e-30;
    let mut norm = 0.0;
    let mut values = vec![0.0; start + 1];
    for l in (0..=start).rev() {
        values[l] = cur;
        norm += (2 * l + 1) as f64 * cur * cur;
        if l == 0 {
            break;
        }
        let prev = (2 * l + 1) as f64 / x * cur - next;
        next = cur;
        cur = prev;
        if cur.abs() > 1e100 {
            // rescale so the squared sum stays in range
            for v in values[l..].iter_mut() {
                *v *= 1e-100;
            }
            norm *= 1e-200;
            cur *= 1e-100;
            next *= 1e-100;
        }
    }
    let scale = norm.sqrt().recip();
    for (o, v) in out.iter_mut().zip(&values) {
        *o = v * scale;
    }
    out
}

/// j_l(x)
pub fn sph_bessel(l: usize, x: f64) -> f64 {
    sph_bessel_all(l, x)[l]
}

/// d/dx j_l(x) = (l/x)·j_l − j_{l+1}, with the limits at x = 0.
pub fn sph_bessel_derivative(l: usize, x: f64) -> f64 {
    if x == 0.0 {
        return if l == 1 { 1.0 / 3.0 } else { 0.0 };
    }
    let j = sph_bessel_all(l + 1, x);
    l as f64 / x * j[l] - j[l + 1]
}

/// First `count` positive zeros of j_l for every l ≤ lmax, as `zeros[l][n-1]`.
///
/// Zeros of j_l interlace those of j_{l-1}, so each is bracketed by two
/// consecutive zeros of the previous order and refined by bisection.
pub fn sph_bessel_zeros(lmax: usize, count: usize) -> Vec<Vec<f64>> {
    let mut prev: Vec<f64> = (1..=count + lmax).map(|n| n as f64 * PI).collect();
    let mut all = vec![prev[..count].to_vec()];
    for l in 1..=lmax {
        let needed = count + lmax - l;
        let zeros: Vec<f64> = (0..needed)
            .map(|i| bisect(|x| sph_bessel(l, x), prev[i], prev[i + 1]))
            .collect();
        all.push(zeros[..count].to_vec());
        prev = zeros;
    }
    all
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if (fm > 0.0) == (flo > 0.0) {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Gauss-Legendre nodes and weights on [-1, 1], nodes ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, z);
            dp = d;
            let dz = p / d;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, z);
        if d != 0.0 {
            dp = d;
        }
        let weight = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    (x, w)
}

fn legendre_with_derivative(n: usize, z: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, z);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0))
}

/// Index of (l, m), m ≥ 0, in the triangular table returned by [`legendre_table`].
#[inline]
pub fn lm_index(l: usize, m: usize) -> usize {
    l * (l + 1) / 2 + m
}

/// Orthonormal associated Legendre values P̄_l^m(cos θ) for 0 ≤ m ≤ l ≤ lmax,
/// including the Condon-Shortley phase, so that Y_l^m = P̄_l^m(cos θ)·e^{imφ}.
pub fn legendre_table(lmax: usize, cos_theta: f64, sin_theta: f64) -> Vec<f64> {
    let mut p = vec![0.0; lm_index(lmax, lmax) + 1];
    legendre_table_into(lmax, cos_theta, sin_theta, &mut p);
    p
}

pub fn legendre_table_into(lmax: usize, x: f64, s: f64, p: &mut [f64]) {
    let mut pmm = (0.25 / PI).sqrt();
    for m in 0..=lmax {
        if m > 0 {
            pmm *= -((2 * m + 1) as f64 / (2 * m) as f64).sqrt() * s;
        }
        p[lm_index(m, m)] = pmm;
        if m == lmax {
            break;
        }
        let mut prev2 = pmm;
        let mut prev1 = ((2 * m + 3) as f64).sqrt() * x * pmm;
        p[lm_index(m + 1, m)] = prev1;
        for l in m + 2..=lmax {
            let (lf, mf) = (l as f64, m as f64);
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0))
                .sqrt();
            let cur = a * (x * prev1 - b * prev2);
            p[lm_index(l, m)] = cur;
            prev2 = prev1;
            prev1 = cur;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x^l Σ_k (−x²/2)^k / (k!·(2l+2k+1)!!)
    fn series(l: usize, x: f64) -> f64 {
        let mut dfact = 1.0;
        for k in 1..=l {
            dfact *= (2 * k + 1) as f64;
        }
        let mut term = x.powi(l as i32) / dfact;
        let mut sum = term;
        for k in 1..200 {
            term *= -0.5 * x * x / (k as f64 * (2 * l + 2 * k + 1) as f64);
            sum += term;
            if term.abs() < 1e-18 * sum.abs() {
                break;
            }
        }
        sum
    }

    #[test]
    fn closed_forms() {
        for &x in &[0.1, 0.7, 1.0, 3.3, 9.0, 25.0, 80.0] {
            let (s, c) = (f64::sin(x), f64::cos(x));
            let j = sph_bessel_all(2, x);
            assert!((j[0] - s / x).abs() < 1e-14);
            assert!((j[1] - (s / (x * x) - c / x)).abs() < 1e-14);
            assert!((j[2] - ((3.0 / (x * x) - 1.0) * s / x - 3.0 * c / (x * x))).abs() < 1e-13);
        }
        assert_eq!(sph_bessel(0, 0.0), 1.0);
        assert_eq!(sph_bessel(3, 0.0), 0.0);
    }

    #[test]
    fn agrees_with_power_series() {
        for l in 0..20 {
            for &x in &[1e-3, 0.5, 2.0, 5.0, 8.0] {
                let want = series(l, x);
                let got = sph_bessel(l, x);
                assert!(
                    (got - want).abs() <= 1e-11 * want.abs().max(1e-300) + 1e-15,
                    "l={l} x={x}: {got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn recurrence_regimes_agree() {
        // value at l = lmax from downward recurrence versus upward from a larger x path
        for l in 0..30 {
            let x = l as f64 + 0.5;
            let down = sph_bessel_all(l + 5, x)[l];
            let up = sph_bessel_all(l, x)[l];
            assert!((down - up).abs() < 1e-12, "l={l}");
        }
    }

    #[test]
    fn derivative_by_differences() {
        for l in 0..6 {
            for &x in &[0.3, 2.0, 7.5] {
                let h = 1e-6;
                let fd = (sph_bessel(l, x + h) - sph_bessel(l, x - h)) / (2.0 * h);
                assert!((fd - sph_bessel_derivative(l, x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn known_zeros() {
        let z = sph_bessel_zeros(3, 4);
        for n in 0..4 {
            assert!((z[0][n] - (n + 1) as f64 * PI).abs() < 1e-14);
        }
        assert!((z[1][0] - 4.493409457909064).abs() < 1e-12);
        assert!((z[2][0] - 5.763459196894550).abs() < 1e-12);
        assert!((z[3][0] - 6.987932000500520).abs() < 1e-12);
        for (l, row) in z.iter().enumerate() {
            assert!(row.windows(2).all(|w| w[1] > w[0]));
            for &k in row {
                assert!(sph_bessel(l, k).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-14);
        for p in 0..14 {
            let got: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(p)).sum();
            let want = if p % 2 == 1 {
                0.0
            } else {
                2.0 / (p + 1) as f64
            };
            assert!((got - want).abs() < 1e-14, "x^{p}");
        }
        let (x, _) = gauss_legendre(8);
        assert!(x.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn low_order_harmonics() {
        let t: f64 = 0.7;
        let (c, s) = (t.cos(), t.sin());
        let p = legendre_table(2, c, s);
        let k = |v: f64| (v / (4.0 * PI)).sqrt();
        assert!((p[lm_index(0, 0)] - k(1.0)).abs() < 1e-15);
        assert!((p[lm_index(1, 0)] - k(3.0) * c).abs() < 1e-15);
        assert!((p[lm_index(1, 1)] + k(1.5) * s).abs() < 1e-15);
        assert!((p[lm_index(2, 0)] - k(5.0) * 0.5 * (3.0 * c * c - 1.0)).abs() < 1e-15);
        assert!((p[lm_index(2, 1)] + k(7.5) * s * c).abs() < 1e-15);
        assert!((p[lm_index(2, 2)] - k(7.5) * 0.5 * s * s).abs() < 1e-15);
    }

    #[test]
    fn legendre_orthonormal_under_quadrature() {
        let lmax = 20;
        let (x, w) = gauss_legendre(lmax + 1);
        let tables: Vec<Vec<f64>> = x
            .iter()
            .map(|&c| legendre_table(lmax, c, (1.0 - c * c).sqrt()))
            .collect();
        for m in 0..=lmax {
            for l1 in m..=lmax {
                for l2 in m..=lmax {
                    let s: f64 = tables
                        .iter()
                        .zip(&w)
                        .map(|(t, w)| w * t[lm_index(l1, m)] * t[lm_index(l2, m)])
                        .sum::<f64>()
                        * 2.0
                        * PI;
                    let want = if l1 == l2 { 1.0 } else { 0.0 };
                    assert!((s - want).abs() < 1e-12);
                }
            }
        }
    }
}
