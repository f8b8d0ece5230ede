use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use super::coupling::CouplingKernel;
use crate::error::{Error, Result};
use crate::reduce::tree_sum_by;
use crate::volume::ScalarVolume;

#[derive(Clone, Debug)]
pub struct EigenOptions {
    /// Relative tolerance on both the eigenvalue change and the residual norm.
    pub tol: f64,
    /// Budget in operator applications.
    pub max_iter: usize,
    /// Krylov basis size between restarts.
    pub basis: usize,
    /// Starting vector; a fixed positive pseudo-random vector if `None`.
    pub start: Option<Vec<f64>>,
}

impl Default for EigenOptions {
    fn default() -> Self {
        EigenOptions {
            tol: 1e-10,
            max_iter: 5000,
            basis: 24,
            start: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EspSolution {
    pub lambda: f64,
    /// Dominant eigenvector, Σψ² = 1 and ψ > 0.
    pub psi: ScalarVolume,
    /// ψ² normalized to unit sum.
    pub mu: ScalarVolume,
    pub iterations: usize,
    pub residual: f64,
}

/// Product of half-period sines along each axis, or a constant for periodic
/// couplings: the dominant eigenvector of plain grid adjacency, and a close
/// guess for smooth couplings on the same grid.
pub fn separable_start(q: &CouplingKernel) -> Vec<f64> {
    let g = &q.geometry;
    if q.is_periodic() {
        return vec![1.0; g.len()];
    }
    let profile: Vec<Vec<f64>> = match q.cube_radius() {
        // B ⊗ B ⊗ B − I shares eigenvectors with the banded 1-D factor B
        Some(r) => (0..3).map(|a| band_eigenvector(g.dims[a], r)).collect(),
        None => (0..3)
            .map(|a| {
                let n = g.dims[a] as f64;
                (0..g.dims[a])
                    .map(|i| (std::f64::consts::PI * (i as f64 + 1.0) / (n + 1.0)).sin())
                    .collect()
            })
            .collect(),
    };
    (0..g.len())
        .into_par_iter()
        .map(|i| {
            let c = g.coords(i);
            profile[0][c[0]] * profile[1][c[1]] * profile[2][c[2]]
        })
        .collect()
}

/// Dominant eigenvector of the n×n all-ones band matrix of half-width `r`.
fn band_eigenvector(n: usize, r: usize) -> Vec<f64> {
    let b = nalgebra::DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) <= r { 1.0 } else { 0.0 });
    let eig = nalgebra::SymmetricEigen::new(b);
    let k = eig.eigenvalues.imax();
    let v = eig.eigenvectors.column(k);
    let sign: f64 = if v.sum() < 0.0 { -1.0 } else { 1.0 };
    v.iter().map(|x| (sign * x).max(0.0)).collect()
}

/// Largest eigenpair of the coupling `Q`.
pub fn dominant_eigenpair(q: &CouplingKernel, opts: &EigenOptions) -> Result<EspSolution> {
    let (lambda, psi, iterations, residual) = dominant_eigenpair_of(q.len(), |v| q.apply(v), opts)?;
    let mu_data = psi.par_iter().map(|p| p * p).collect::<Vec<_>>();
    let total = crate::reduce::tree_sum(&mu_data);
    let mu_data = mu_data.into_par_iter().map(|m| m / total).collect();
    Ok(EspSolution {
        lambda,
        psi: ScalarVolume::new(q.geometry.clone(), psi)?,
        mu: ScalarVolume::new(q.geometry.clone(), mu_data)?,
        iterations,
        residual,
    })
}

use crate::reduce::dot;

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Dominant eigenpair of a symmetric nonnegative operator given as a
/// matrix-vector product. Restarted Lanczos with full reorthogonalization:
/// each cycle is power iteration accelerated by a Rayleigh-Ritz projection
/// onto the Krylov space it spans.
///
/// Returns `(lambda, psi, operator_applications, relative_residual)`.
pub fn dominant_eigenpair_of<F>(
    n: usize,
    apply: F,
    opts: &EigenOptions,
) -> Result<(f64, Vec<f64>, usize, f64)>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    if n == 0 {
        return Err(Error::InvalidConfig("empty operator".into()));
    }
    let mut x: Vec<f64> = match &opts.start {
        Some(s) if s.len() == n => s.clone(),
        Some(s) => {
            return Err(Error::InvalidConfig(format!(
                "start vector has length {}, expected {n}",
                s.len()
            )));
        }
        None => (0..n)
            .into_par_iter()
            .map(|i| 0.5 + (splitmix(i as u64) >> 11) as f64 / (1u64 << 53) as f64)
            .collect(),
    };
    let nx = norm(&x);
    if !(nx > 0.0) {
        return Err(Error::InvalidConfig("start vector is zero".into()));
    }
    x.par_iter_mut().for_each(|v| *v /= nx);

    let m = opts.basis.max(2).min(n);
    let mut applications = 0;
    let mut prev_theta = f64::NAN;
    let mut residual = f64::INFINITY;

    loop {
        let mut basis: Vec<Vec<f64>> = vec![x.clone()];
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut first_residual = None;
        for j in 0..m {
            let mut w = apply(&basis[j]);
            applications += 1;
            let a = dot(&basis[j], &w);
            alpha.push(a);
            if j == 0 {
                // x is the previous Ritz vector: its true residual is free here
                let r = tree_sum_by(n, &|i| (w[i] - a * x[i]).powi(2)).sqrt();
                first_residual = Some((a, r));
            }
            for _ in 0..2 {
                for v in &basis {
                    let c = dot(v, &w);
                    w.par_iter_mut()
                        .zip(v.par_iter())
                        .for_each(|(wi, vi)| *wi -= c * vi);
                }
            }
            let b = norm(&w);
            if j + 1 == m || b <= 1e-13 * a.abs().max(f64::MIN_POSITIVE) {
                beta.push(b);
                break;
            }
            beta.push(b);
            w.par_iter_mut().for_each(|wi| *wi /= b);
            basis.push(w);
        }

        if let Some((a, r)) = first_residual {
            residual = r / a.abs().max(f64::MIN_POSITIVE);
            let settled = !prev_theta.is_nan() && (a - prev_theta).abs() <= opts.tol * a.abs();
            if residual <= opts.tol && (settled || r == 0.0) {
                return finish(a, x, applications, residual);
            }
        }
        if applications >= opts.max_iter {
            return Err(Error::NoConvergence {
                iterations: applications,
                residual,
            });
        }

        let k = alpha.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for i in 0..k {
            t[(i, i)] = alpha[i];
            if i + 1 < k {
                t[(i, i + 1)] = beta[i];
                t[(i + 1, i)] = beta[i];
            }
        }
        let eig = SymmetricEigen::new(t);
        let top = (0..k).fold(0, |best, i| {
            if eig.eigenvalues[i] > eig.eigenvalues[best] {
                i
            } else {
                best
            }
        });
        let y = eig.eigenvectors.column(top);
        let mut ritz: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| basis.iter().enumerate().map(|(c, v)| y[c] * v[i]).sum())
            .collect();
        let nr = norm(&ritz);
        ritz.par_iter_mut().for_each(|v| *v /= nr);
        prev_theta = first_residual.map_or(f64::NAN, |(a, _)| a);
        x = ritz;
    }
}

fn finish(
    lambda: f64,
    mut psi: Vec<f64>,
    applications: usize,
    residual: f64,
) -> Result<(f64, Vec<f64>, usize, f64)> {
    let s = tree_sum_by(psi.len(), &|i| psi[i]);
    if s < 0.0 {
        psi.par_iter_mut().for_each(|v| *v = -*v);
    }
    // Perron vector: residual-level negatives are rounding noise
    psi.par_iter_mut().for_each(|v| *v = v.abs());
    let n = norm(&psi);
    psi.par_iter_mut().for_each(|v| *v /= n);
    Ok((lambda, psi, applications, residual))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esp::{build_adjacency_coupling, Connectivity};
    use crate::volume::GridGeometry;

    fn dense_apply(m: &DMatrix<f64>) -> impl Fn(&[f64]) -> Vec<f64> + '_ {
        move |v| {
            (m * nalgebra::DVector::from_column_slice(v))
                .as_slice()
                .to_vec()
        }
    }

    #[test]
    fn two_voxel_graph() {
        let q = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (l, psi, _, _) =
            dominant_eigenpair_of(2, dense_apply(&q), &EigenOptions::default()).unwrap();
        assert!((l - 1.0).abs() < 1e-12);
        for p in psi {
            assert!((p - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        }
    }

    #[test]
    fn three_path_graph() {
        let q = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let (l, psi, _, _) =
            dominant_eigenpair_of(3, dense_apply(&q), &EigenOptions::default()).unwrap();
        assert!((l - 2f64.sqrt()).abs() < 1e-12);
        // (1, √2, 1) / 2
        assert!((psi[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-10);
        assert!((psi[0] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn budget_exhaustion_reports_residual() {
        let g = GridGeometry::cube(10);
        let q = build_adjacency_coupling(&g, Connectivity::Six);
        let opts = EigenOptions {
            max_iter: 3,
            basis: 3,
            ..Default::default()
        };
        match dominant_eigenpair(&q, &opts) {
            Err(Error::NoConvergence {
                iterations,
                residual,
            }) => {
                assert!(iterations >= 3);
                assert!(residual > 0.0);
            }
            other => panic!("expected NoConvergence, got {other:?}"),
        }
    }

    #[test]
    fn matches_dense_oracle_on_small_grids() {
        for n in [2usize, 3, 5, 7] {
            let g = GridGeometry::cube(n);
            let q = build_adjacency_coupling(&g, Connectivity::Six);
            let sol = dominant_eigenpair(&q, &EigenOptions::default()).unwrap();
            let len = g.len();
            let mut dense = DMatrix::<f64>::zeros(len, len);
            for x in 0..len {
                for (y, w) in q.neighbors(x) {
                    dense[(x, y)] = w;
                }
            }
            let eig = SymmetricEigen::new(dense);
            let top = (0..len).fold(0, |b, i| {
                if eig.eigenvalues[i] > eig.eigenvalues[b] {
                    i
                } else {
                    b
                }
            });
            let lref = eig.eigenvalues[top];
            assert!((sol.lambda - lref).abs() / lref <= 1e-8, "n={n}");
            let v = eig.eigenvectors.column(top);
            let cos: f64 = (0..len).map(|i| v[i] * sol.psi.data[i]).sum::<f64>().abs();
            assert!(cos >= 1.0 - 1e-8);
            // analytic: 2 Σ cos(π/(n+1))
            let analytic = 6.0 * (std::f64::consts::PI / (n as f64 + 1.0)).cos();
            assert!((sol.lambda - analytic).abs() < 1e-9);
        }
    }

    #[test]
    fn solution_is_normalized_and_positive() {
        let g = GridGeometry::new([6, 4, 5], [1.0, 2.0, 0.5], [0.0; 3]).unwrap();
        let q = build_adjacency_coupling(&g, Connectivity::TwentySix);
        let sol = dominant_eigenpair(&q, &EigenOptions::default()).unwrap();
        let s2: f64 = sol.psi.data.iter().map(|p| p * p).sum();
        assert!((s2 - 1.0).abs() < 1e-12);
        assert!(sol.psi.data.iter().all(|p| *p > 0.0));
        assert!((sol.mu.data.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cube_adjacency_matches_dense_oracle() {
        let g = GridGeometry::new([6, 5, 4], [1.0; 3], [0.0; 3]).unwrap();
        let q = crate::esp::build_cube_adjacency_coupling(&g, 2).unwrap();
        let sol = dominant_eigenpair(&q, &EigenOptions::default()).unwrap();
        let len = g.len();
        let mut dense = DMatrix::<f64>::zeros(len, len);
        for x in 0..len {
            for (y, w) in q.neighbors(x) {
                dense[(x, y)] = w;
            }
        }
        let eig = SymmetricEigen::new(dense);
        let top = eig.eigenvalues.imax();
        assert!((sol.lambda - eig.eigenvalues[top]).abs() / eig.eigenvalues[top] <= 1e-8);
        let v = eig.eigenvectors.column(top);
        let cos: f64 = (0..len).map(|i| v[i] * sol.psi.data[i]).sum::<f64>().abs();
        assert!(cos >= 1.0 - 1e-8);
    }
}
