use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::coupling::{
    build_adjacency_coupling, build_cube_adjacency_coupling, build_gaussian_coupling,
    build_image_weighted_coupling, build_periodic_adjacency_coupling, Connectivity, CouplingKernel,
    CouplingKind,
};
use super::eigen::{dominant_eigenpair, separable_start, EigenOptions, EspSolution};
use crate::error::{Error, Result};
use crate::reduce::tree_sum_by;
use crate::volume::{GridGeometry, ScalarVolume, VectorVolume};

/// ρ(x'|x) = Q(x, x') ψ(x') / D(x) with D(x) = Σ_x' Q(x, x') ψ(x').
///
/// For an exact eigenvector D = λψ; using the explicit row sum keeps rows
/// stochastic to rounding even where ψ is tiny.
#[derive(Clone, Debug)]
pub struct TransitionKernel {
    pub coupling: CouplingKernel,
    pub solution: EspSolution,
    inv_norm: Vec<f64>,
}

impl TransitionKernel {
    pub fn new(coupling: CouplingKernel, solution: EspSolution) -> Result<Self> {
        coupling
            .geometry
            .ensure_same(&solution.psi.geometry, "eigenvector")?;
        let d = coupling.apply(&solution.psi.data);
        let inv_norm = d
            .into_par_iter()
            .map(|v| if v > 0.0 { 1.0 / v } else { 0.0 })
            .collect::<Vec<_>>();
        if inv_norm.iter().any(|v| *v == 0.0) {
            return Err(Error::Disconnected);
        }
        Ok(TransitionKernel {
            coupling,
            solution,
            inv_norm,
        })
    }

    /// Builds Q's dominant eigenpair and the kernel in one go.
    pub fn from_coupling(coupling: CouplingKernel, opts: &EigenOptions) -> Result<Self> {
        let sol = dominant_eigenpair(&coupling, opts)?;
        Self::new(coupling, sol)
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.coupling.geometry
    }

    /// Transition probability from voxel `x` to voxel `y`.
    pub fn rho(&self, x: usize, y: usize) -> f64 {
        self.coupling
            .neighbors(x)
            .into_iter()
            .filter(|(n, _)| *n == y)
            .map(|(_, w)| w * self.solution.psi.data[y] * self.inv_norm[x])
            .sum()
    }

    /// max_x |Σ_x' ρ(x'|x) − 1|
    pub fn row_sum_deviation(&self) -> f64 {
        let ones = vec![1.0; self.coupling.len()];
        self.propagate(&ones)
            .into_iter()
            .fold(0.0, |m, v| f64::max(m, (v - 1.0).abs()))
    }

    /// max_x' |Σ_x ρ(x'|x) μ(x) − μ(x')|
    pub fn stationarity_residual(&self) -> f64 {
        let mu = &self.solution.mu.data;
        let scaled: Vec<f64> = mu
            .par_iter()
            .zip(&self.inv_norm)
            .map(|(m, i)| m * i)
            .collect();
        // Q symmetric: Σ_x Q(x, x') g(x) = (Q g)(x')
        let back = self.coupling.apply(&scaled);
        back.par_iter()
            .zip(&self.solution.psi.data)
            .zip(mu)
            .map(|((b, p), m)| (b * p - m).abs())
            .reduce(|| 0.0, f64::max)
    }

    /// out(x) = Σ_x' ρ(x'|x) f(x')
    pub fn propagate(&self, f: &[f64]) -> Vec<f64> {
        let psi = &self.solution.psi.data;
        let weighted: Vec<f64> = f.par_iter().zip(psi).map(|(a, b)| a * b).collect();
        let mut out = self.coupling.apply(&weighted);
        out.par_iter_mut()
            .zip(&self.inv_norm)
            .for_each(|(o, i)| *o *= i);
        out
    }

    pub fn propagate_vec3(&self, f: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let psi = &self.solution.psi.data;
        let weighted: Vec<[f64; 3]> = f
            .par_iter()
            .zip(psi)
            .map(|(a, b)| [a[0] * b, a[1] * b, a[2] * b])
            .collect();
        let mut out = self.coupling.apply_vec3(&weighted);
        out.par_iter_mut().zip(&self.inv_norm).for_each(|(o, i)| {
            for c in o.iter_mut() {
                *c *= i;
            }
        });
        out
    }

    /// Σ_x μ(x) f(x)
    pub fn expectation(&self, f: &[f64]) -> f64 {
        let mu = &self.solution.mu.data;
        tree_sum_by(mu.len(), &|i| mu[i] * f[i])
    }
}

pub fn equilibrium_probability(sol: &EspSolution) -> ScalarVolume {
    sol.mu.clone()
}

/// ρ-weighted average of a local force field over the coupling support.
pub fn nonlocal_force(local_force: &VectorVolume, rho: &TransitionKernel) -> Result<VectorVolume> {
    local_force
        .geometry
        .ensure_same(rho.geometry(), "transition kernel")?;
    VectorVolume::new(
        local_force.geometry.clone(),
        rho.propagate_vec3(&local_force.data),
    )
}

/// λ = sqrt(π³ / det S) for the infinite-domain Gaussian coupling
/// exp(−dᵀ S d); the eigenvector is constant, flagged by the `true`.
pub fn gaussian_kernel_eigen(s: &Matrix3<f64>) -> Result<(f64, bool)> {
    let sym = (s - s.transpose()).abs().max();
    if sym > 1e-12 * s.abs().max() || s.cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    Ok((
        (std::f64::consts::PI.powi(3) / s.determinant()).sqrt(),
        true,
    ))
}

/// Serializable recipe for a transition kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub kind: CouplingKind,
    pub connectivity: Connectivity,
    /// Adjacency neighborhood radius in voxels. Above 1 every voxel of the
    /// surrounding cube is a neighbor and `connectivity` is ignored.
    pub radius: usize,
    /// Transition steps per force propagation: the force is averaged with
    /// ρᵏ, the k-step path kernel. Even k makes the averaging positive
    /// semidefinite, which a bipartite adjacency graph otherwise is not.
    pub path_length: usize,
    /// Image-weighted coupling strength (per intensity unit).
    pub beta: f64,
    /// Isotropic Gaussian width in mm for the stationary kind.
    pub sigma_mm: f64,
    /// Wrap the grid into a torus (Gaussian and 1-hop adjacency kinds).
    pub periodic: bool,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: CouplingKind::Adjacency,
            connectivity: Connectivity::Six,
            radius: 1,
            path_length: 1,
            beta: 1.0,
            sigma_mm: 2.0,
            periodic: false,
            tol: 1e-10,
            max_iter: 5000,
        }
    }
}

impl KernelSpec {
    pub fn coupling(&self, image: &ScalarVolume) -> Result<CouplingKernel> {
        if self.path_length == 0 {
            return Err(Error::InvalidConfig(
                "path_length must be at least 1".into(),
            ));
        }
        match self.kind {
            CouplingKind::Adjacency if self.radius > 1 && self.periodic => {
                Err(Error::InvalidConfig(
                    "cube adjacency (radius > 1) is not available on a periodic grid".into(),
                ))
            }
            CouplingKind::Adjacency if self.radius > 1 => {
                build_cube_adjacency_coupling(&image.geometry, self.radius)
            }
            CouplingKind::Adjacency if self.periodic => Ok(build_periodic_adjacency_coupling(
                &image.geometry,
                self.connectivity,
            )),
            CouplingKind::Adjacency => {
                Ok(build_adjacency_coupling(&image.geometry, self.connectivity))
            }
            CouplingKind::ImageWeighted => {
                build_image_weighted_coupling(image, self.connectivity, self.beta)
            }
            CouplingKind::GaussianStationary => {
                if !(self.sigma_mm > 0.0) {
                    return Err(Error::InvalidConfig("sigma_mm must be positive".into()));
                }
                let s = Matrix3::identity() / (2.0 * self.sigma_mm * self.sigma_mm);
                build_gaussian_coupling(&image.geometry, s, self.periodic)
            }
        }
    }

    pub fn build(&self, image: &ScalarVolume) -> Result<TransitionKernel> {
        let coupling = self.coupling(image)?;
        let opts = EigenOptions {
            tol: self.tol,
            max_iter: self.max_iter,
            start: Some(separable_start(&coupling)),
            ..Default::default()
        };
        TransitionKernel::from_coupling(coupling, &opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector, Vector3};
    use proptest::prelude::*;

    fn adjacency_kernel(n: usize) -> TransitionKernel {
        let g = GridGeometry::cube(n);
        TransitionKernel::from_coupling(
            build_adjacency_coupling(&g, Connectivity::Six),
            &EigenOptions::default(),
        )
        .unwrap()
    }

    #[test]
    fn gaussian_closed_form() {
        let (l, flat) = gaussian_kernel_eigen(&Matrix3::identity()).unwrap();
        assert!((l - std::f64::consts::PI.powf(1.5)).abs() < 1e-12);
        assert!((l - 5.568).abs() < 1e-3);
        assert!(flat);
        let (l, _) =
            gaussian_kernel_eigen(&Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).unwrap();
        assert!((l - (std::f64::consts::PI.powi(3) / 4.0).sqrt()).abs() < 1e-12);
        assert!(gaussian_kernel_eigen(&-Matrix3::identity()).is_err());
    }

    #[test]
    fn laws_on_adjacency() {
        let k = adjacency_kernel(8);
        assert!(k.row_sum_deviation() <= 1e-10);
        assert!(k.stationarity_residual() <= 1e-10);
    }

    #[test]
    fn laws_on_image_weighted() {
        let g = GridGeometry::cube(8);
        let img = ScalarVolume::from_fn(g, |p| (p[0] * 0.7).sin() + 0.1 * p[1] * p[2]);
        let q = build_image_weighted_coupling(&img, Connectivity::TwentySix, 1.5).unwrap();
        let k = TransitionKernel::from_coupling(q, &EigenOptions::default()).unwrap();
        assert!(k.row_sum_deviation() <= 1e-10);
        assert!(k.stationarity_residual() <= 1e-10);
    }

    #[test]
    fn two_voxel_line_probability() {
        // smallest grid is 2³; each voxel has three neighbors, all symmetric
        let k = adjacency_kernel(2);
        for m in &k.solution.mu.data {
            assert!((m - 0.125).abs() < 1e-14);
        }
        assert!((k.solution.lambda - 3.0).abs() < 1e-12);
    }

    #[test]
    fn periodic_regular_graph_has_uniform_mu() {
        let g = GridGeometry::cube(8);
        let s = Matrix3::identity() * 2.0;
        let q = build_gaussian_coupling(&g, s, true).unwrap();
        let k = TransitionKernel::from_coupling(q, &EigenOptions::default()).unwrap();
        let u = 1.0 / g.len() as f64;
        assert!(k.solution.mu.data.iter().all(|m| (m - u).abs() < 1e-10 * u));
    }

    #[test]
    fn periodic_adjacency_spec_gives_uniform_mu() {
        let g = GridGeometry::cube(6);
        let img = ScalarVolume::filled(g.clone(), 2.0);
        let k = KernelSpec {
            periodic: true,
            ..Default::default()
        }
        .build(&img)
        .unwrap();
        let u = 1.0 / g.len() as f64;
        assert!(k.solution.mu.data.iter().all(|m| (m - u).abs() < 1e-10 * u));
        assert!(KernelSpec {
            periodic: true,
            radius: 2,
            ..Default::default()
        }
        .build(&img)
        .is_err());
    }

    #[test]
    fn delta_kernel_is_identity() {
        let g = GridGeometry::cube(5);
        // σ far below one voxel: only the zero offset survives truncation
        let q = build_gaussian_coupling(&g, Matrix3::identity() * 400.0, false).unwrap();
        let k = TransitionKernel::from_coupling(q, &EigenOptions::default()).unwrap();
        let f = VectorVolume::new(
            g.clone(),
            (0..g.len()).map(|i| [i as f64, -(i as f64), 0.5]).collect(),
        )
        .unwrap();
        let out = nonlocal_force(&f, &k).unwrap();
        for (a, b) in out.data.iter().zip(&f.data) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 1e-12 * b[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn matches_dense_oracle() {
        let k = adjacency_kernel(6);
        let n = k.coupling.len();
        let psi = &k.solution.psi.data;
        let lambda = k.solution.lambda;
        let mut rho = DMatrix::<f64>::zeros(n, n);
        for x in 0..n {
            for (y, w) in k.coupling.neighbors(x) {
                rho[(x, y)] = w * psi[y] / (lambda * psi[x]);
            }
        }
        let mut state = 12345u64;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let f: Vec<[f64; 3]> = (0..n).map(|_| [next(), next(), next()]).collect();
        let out = nonlocal_force(
            &VectorVolume::new(k.geometry().clone(), f.clone()).unwrap(),
            &k,
        )
        .unwrap();
        for c in 0..3 {
            let col = DVector::from_iterator(n, f.iter().map(|v| v[c]));
            let want = &rho * col;
            for x in 0..n {
                assert!(
                    (out.data[x][c] - want[x]).abs() <= 1e-12,
                    "{} vs {}",
                    out.data[x][c],
                    want[x]
                );
            }
        }
        assert!(k.rho(0, 1) > 0.0);
        assert_eq!(k.rho(0, n - 1), 0.0);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let k = adjacency_kernel(4);
        let f = VectorVolume::zeros(GridGeometry::cube(5));
        assert!(matches!(
            nonlocal_force(&f, &k),
            Err(Error::GeometryMismatch(_))
        ));
    }

    #[test]
    fn recipe_round_trips_through_toml() {
        let spec = KernelSpec {
            kind: CouplingKind::ImageWeighted,
            connectivity: Connectivity::Eighteen,
            ..Default::default()
        };
        let text = toml::to_string(&spec).unwrap();
        assert!(text.contains("connectivity = 18"));
        let back: KernelSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(toml::from_str::<KernelSpec>("connectivity = 7").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn constants_are_preserved(c in prop::array::uniform3(-10.0f64..10.0), n in 3usize..7, beta in 0.0f64..3.0) {
            let g = GridGeometry::cube(n);
            let img = ScalarVolume::from_fn(g.clone(), |p| (p[0] * 1.1 + p[1]).cos());
            let q = build_image_weighted_coupling(&img, Connectivity::Eighteen, beta).unwrap();
            let k = TransitionKernel::from_coupling(q, &EigenOptions::default()).unwrap();
            let f = VectorVolume::new(g.clone(), vec![c; g.len()]).unwrap();
            let out = nonlocal_force(&f, &k).unwrap();
            for v in &out.data {
                for a in 0..3 {
                    prop_assert!((v[a] - c[a]).abs() <= 1e-12 * c[a].abs().max(1.0));
                }
            }
            prop_assert!(k.solution.psi.data.iter().all(|p| *p > 0.0));
            prop_assert!(k.row_sum_deviation() <= 1e-10);
            prop_assert!(k.stationarity_residual() <= 1e-10);
        }
    }
}
