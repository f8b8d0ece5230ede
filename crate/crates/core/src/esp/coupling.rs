use std::collections::VecDeque;

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridGeometry, ScalarVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = String;

    fn try_from(n: u8) -> std::result::Result<Self, String> {
        match n {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(format!("connectivity must be 6, 18 or 26, got {other}")),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_l1 = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut out = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let l1 = dx.abs() + dy.abs() + dz.abs();
                    if l1 >= 1 && l1 <= max_l1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingKind {
    Adjacency,
    ImageWeighted,
    GaussianStationary,
}

#[derive(Clone, Debug)]
pub(crate) enum Support {
    /// Neighbor stencil; `weights` is voxel-major (`idx * offsets.len() + o`),
    /// `None` meaning unit weight on every in-grid neighbor.
    Stencil {
        offsets: Vec<[isize; 3]>,
        weights: Option<Vec<f64>>,
        periodic: bool,
    },
    /// Separable stationary kernel (diagonal `S`): one tap table per axis.
    Separable { taps: [Vec<f64>; 3], periodic: bool },
    /// Every voxel within Chebyshev distance `radius`, unit weight, self
    /// excluded: `B ⊗ B ⊗ B − I` with `B` a banded all-ones matrix.
    Cube { radius: usize },
    /// General stationary kernel evaluated over an explicit offset list.
    Dense {
        offsets: Vec<[isize; 3]>,
        weights: Vec<f64>,
        periodic: bool,
    },
}

/// Coupling density `Q(x, x')` on a voxel grid. Always symmetric and nonnegative.
#[derive(Clone, Debug)]
pub struct CouplingKernel {
    pub geometry: GridGeometry,
    pub kind: CouplingKind,
    /// Gaussian precision matrix (1/mm²) for stationary kernels.
    pub precision: Option<Matrix3<f64>>,
    pub(crate) support: Support,
}

/// Q(x, x') = 1 for grid neighbors under `connectivity`, 0 otherwise.
pub fn build_adjacency_coupling(
    geometry: &GridGeometry,
    connectivity: Connectivity,
) -> CouplingKernel {
    CouplingKernel {
        geometry: geometry.clone(),
        kind: CouplingKind::Adjacency,
        precision: None,
        support: Support::Stencil {
            offsets: connectivity.offsets(),
            weights: None,
            periodic: false,
        },
    }
}

/// Adjacency on the torus: neighbors wrap around every face, so every voxel
/// has the same degree.
pub fn build_periodic_adjacency_coupling(
    geometry: &GridGeometry,
    connectivity: Connectivity,
) -> CouplingKernel {
    CouplingKernel {
        geometry: geometry.clone(),
        kind: CouplingKind::Adjacency,
        precision: None,
        support: Support::Stencil {
            offsets: connectivity.offsets(),
            weights: None,
            periodic: true,
        },
    }
}

/// Adjacency over a cubic neighborhood: Q(x, x') = 1 when
/// `0 < max_a |x_a - x'_a| <= radius` (in voxels). Radius 1 is 26-connectivity.
pub fn build_cube_adjacency_coupling(
    geometry: &GridGeometry,
    radius: usize,
) -> Result<CouplingKernel> {
    if radius == 0 {
        return Err(Error::InvalidConfig(
            "adjacency radius must be at least 1".into(),
        ));
    }
    Ok(CouplingKernel {
        geometry: geometry.clone(),
        kind: CouplingKind::Adjacency,
        precision: None,
        support: Support::Cube { radius },
    })
}

/// Q(x, x') = exp(-beta |I(x) - I(x')|) for grid neighbors.
pub fn build_image_weighted_coupling(
    image: &ScalarVolume,
    connectivity: Connectivity,
    beta: f64,
) -> Result<CouplingKernel> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "beta must be >= 0, got {beta}"
        )));
    }
    let g = &image.geometry;
    let offsets = connectivity.offsets();
    let m = offsets.len();
    let weights: Vec<f64> = (0..g.len())
        .into_par_iter()
        .flat_map_iter(|idx| {
            let c = g.coords(idx);
            let here = image.data[idx];
            offsets
                .iter()
                .map(move |o| match neighbor(g, c, *o, false) {
                    Some(n) => (-beta * (here - image.data[n]).abs()).exp(),
                    None => 0.0,
                })
        })
        .collect();
    debug_assert_eq!(weights.len(), g.len() * m);
    let kernel = CouplingKernel {
        geometry: g.clone(),
        kind: CouplingKind::ImageWeighted,
        precision: None,
        support: Support::Stencil {
            offsets,
            weights: Some(weights),
            periodic: false,
        },
    };
    kernel.check_symmetric()?;
    kernel.check_connected()?;
    Ok(kernel)
}

/// Stationary Gaussian coupling Q(x - x') = exp(-(x - x')ᵀ S (x - x')),
/// truncated at four standard deviations along each principal axis.
pub fn build_gaussian_coupling(
    geometry: &GridGeometry,
    precision: Matrix3<f64>,
    periodic: bool,
) -> Result<CouplingKernel> {
    let sym = (precision - precision.transpose()).abs().max();
    if sym > 1e-12 * precision.abs().max() || precision.cholesky().is_none() {
        return Err(Error::NotSpd);
    }
    // Q = exp(-d² / 2σ²) along an axis ⇒ σ_a² = (S⁻¹)_aa / 2
    let cov = precision.try_inverse().ok_or(Error::NotSpd)? * 0.5;
    let mut radius = [0isize; 3];
    for a in 0..3 {
        let sigma = cov[(a, a)].sqrt();
        radius[a] = (4.0 * sigma / geometry.spacing[a]).floor() as isize;
        if periodic && 2 * radius[a] + 1 > geometry.dims[a] as isize {
            return Err(Error::InvalidConfig(format!(
                "periodic Gaussian support {} exceeds grid size {} on axis {a}",
                2 * radius[a] + 1,
                geometry.dims[a]
            )));
        }
    }
    let diagonal = (0..3).all(|r| (0..3).all(|c| r == c || precision[(r, c)] == 0.0));
    let support = if diagonal {
        let taps = std::array::from_fn(|a| {
            (-radius[a]..=radius[a])
                .map(|o| {
                    let d = o as f64 * geometry.spacing[a];
                    (-precision[(a, a)] * d * d).exp()
                })
                .collect()
        });
        Support::Separable { taps, periodic }
    } else {
        let mut offsets = Vec::new();
        let mut weights = Vec::new();
        for dz in -radius[2]..=radius[2] {
            for dy in -radius[1]..=radius[1] {
                for dx in -radius[0]..=radius[0] {
                    let d = nalgebra::Vector3::new(
                        dx as f64 * geometry.spacing[0],
                        dy as f64 * geometry.spacing[1],
                        dz as f64 * geometry.spacing[2],
                    );
                    // inside the 4σ ellipsoid
                    if d.dot(&(cov.try_inverse().unwrap() * d)) <= 16.0 {
                        offsets.push([dx, dy, dz]);
                        weights.push((-d.dot(&(precision * d))).exp());
                    }
                }
            }
        }
        Support::Dense {
            offsets,
            weights,
            periodic,
        }
    };
    Ok(CouplingKernel {
        geometry: geometry.clone(),
        kind: CouplingKind::GaussianStationary,
        precision: Some(precision),
        support,
    })
}

#[inline]
pub(crate) fn neighbor(
    g: &GridGeometry,
    c: [usize; 3],
    o: [isize; 3],
    periodic: bool,
) -> Option<usize> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let dim = g.dims[a] as isize;
        let mut v = c[a] as isize + o[a];
        if periodic {
            v = v.rem_euclid(dim);
        } else if v < 0 || v >= dim {
            return None;
        }
        n[a] = v as usize;
    }
    Some(g.index(n[0], n[1], n[2]))
}

impl CouplingKernel {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }

    pub(crate) fn cube_radius(&self) -> Option<usize> {
        match self.support {
            Support::Cube { radius } => Some(radius),
            _ => None,
        }
    }

    pub fn is_periodic(&self) -> bool {
        match &self.support {
            Support::Cube { .. } => false,
            Support::Stencil { periodic, .. }
            | Support::Separable { periodic, .. }
            | Support::Dense { periodic, .. } => *periodic,
        }
    }

    /// Number of nonzero couplings of voxel `idx` (excluding itself).
    pub fn degree(&self, idx: usize) -> usize {
        match &self.support {
            Support::Stencil {
                offsets,
                weights,
                periodic,
            } => {
                let c = self.geometry.coords(idx);
                offsets
                    .iter()
                    .enumerate()
                    .filter(|(k, o)| {
                        neighbor(&self.geometry, c, **o, *periodic).is_some()
                            && weights
                                .as_ref()
                                .map_or(true, |w| w[idx * offsets.len() + k] > 0.0)
                    })
                    .count()
            }
            _ => self
                .neighbors(idx)
                .iter()
                .filter(|(n, w)| *n != idx && *w > 0.0)
                .count(),
        }
    }

    /// Explicit list of `(x', Q(x, x'))` for one voxel. Intended for tests and
    /// small grids; the bulk operations never materialize rows.
    pub fn neighbors(&self, idx: usize) -> Vec<(usize, f64)> {
        let g = &self.geometry;
        let c = g.coords(idx);
        let mut out: Vec<(usize, f64)> = Vec::new();
        let mut push = |n: usize, w: f64| {
            if let Some(e) = out.iter_mut().find(|(m, _)| *m == n) {
                e.1 += w;
            } else {
                out.push((n, w));
            }
        };
        match &self.support {
            Support::Stencil {
                offsets,
                weights,
                periodic,
            } => {
                for (k, o) in offsets.iter().enumerate() {
                    if let Some(n) = neighbor(g, c, *o, *periodic) {
                        push(
                            n,
                            weights.as_ref().map_or(1.0, |w| w[idx * offsets.len() + k]),
                        );
                    }
                }
            }
            Support::Separable { taps, periodic } => {
                let r: [isize; 3] = std::array::from_fn(|a| (taps[a].len() / 2) as isize);
                for dz in -r[2]..=r[2] {
                    for dy in -r[1]..=r[1] {
                        for dx in -r[0]..=r[0] {
                            if let Some(n) = neighbor(g, c, [dx, dy, dz], *periodic) {
                                let w = taps[0][(dx + r[0]) as usize]
                                    * taps[1][(dy + r[1]) as usize]
                                    * taps[2][(dz + r[2]) as usize];
                                push(n, w);
                            }
                        }
                    }
                }
            }
            Support::Cube { radius } => {
                let r = *radius as isize;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if [dx, dy, dz] != [0, 0, 0] {
                                if let Some(n) = neighbor(g, c, [dx, dy, dz], false) {
                                    push(n, 1.0);
                                }
                            }
                        }
                    }
                }
            }
            Support::Dense {
                offsets,
                weights,
                periodic,
            } => {
                for (o, w) in offsets.iter().zip(weights) {
                    if let Some(n) = neighbor(g, c, *o, *periodic) {
                        push(n, *w);
                    }
                }
            }
        }
        out
    }

    /// y = Q v for a scalar field.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let g = &self.geometry;
        assert_eq!(v.len(), g.len());
        match &self.support {
            Support::Stencil {
                offsets,
                weights,
                periodic,
            } => {
                let m = offsets.len();
                (0..g.len())
                    .into_par_iter()
                    .map(|idx| {
                        let c = g.coords(idx);
                        let mut acc = 0.0;
                        for (k, o) in offsets.iter().enumerate() {
                            if let Some(n) = neighbor(g, c, *o, *periodic) {
                                let w = weights.as_ref().map_or(1.0, |w| w[idx * m + k]);
                                acc += w * v[n];
                            }
                        }
                        acc
                    })
                    .collect()
            }
            Support::Separable { taps, periodic } => {
                let mut data = v.to_vec();
                for axis in 0..3 {
                    data = convolve_axis(&data, g, axis, &taps[axis], *periodic);
                }
                data
            }
            Support::Cube { radius } => {
                let taps = vec![1.0; 2 * radius + 1];
                let mut data = v.to_vec();
                for axis in 0..3 {
                    data = convolve_axis(&data, g, axis, &taps, false);
                }
                data.par_iter_mut().zip(v).for_each(|(d, x)| *d -= x);
                data
            }
            Support::Dense {
                offsets,
                weights,
                periodic,
            } => (0..g.len())
                .into_par_iter()
                .map(|idx| {
                    let c = g.coords(idx);
                    offsets
                        .iter()
                        .zip(weights)
                        .filter_map(|(o, w)| neighbor(g, c, *o, *periodic).map(|n| w * v[n]))
                        .sum()
                })
                .collect(),
        }
    }

    /// Q applied to each component of a vector field.
    pub fn apply_vec3(&self, v: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let g = &self.geometry;
        assert_eq!(v.len(), g.len());
        match &self.support {
            Support::Stencil {
                offsets,
                weights,
                periodic,
            } => {
                let m = offsets.len();
                (0..g.len())
                    .into_par_iter()
                    .map(|idx| {
                        let c = g.coords(idx);
                        let mut acc = [0.0; 3];
                        for (k, o) in offsets.iter().enumerate() {
                            if let Some(n) = neighbor(g, c, *o, *periodic) {
                                let w = weights.as_ref().map_or(1.0, |w| w[idx * m + k]);
                                for (a, s) in acc.iter_mut().enumerate() {
                                    *s += w * v[n][a];
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            }
            _ => {
                let comps: Vec<Vec<f64>> = (0..3)
                    .map(|a| self.apply(&v.iter().map(|x| x[a]).collect::<Vec<_>>()))
                    .collect();
                (0..g.len())
                    .map(|i| [comps[0][i], comps[1][i], comps[2][i]])
                    .collect()
            }
        }
    }

    pub(crate) fn check_symmetric(&self) -> Result<()> {
        if let Support::Stencil {
            offsets,
            weights: Some(w),
            ..
        } = &self.support
        {
            let g = &self.geometry;
            let m = offsets.len();
            let reverse: Vec<usize> = offsets
                .iter()
                .map(|o| {
                    offsets
                        .iter()
                        .position(|p| *p == [-o[0], -o[1], -o[2]])
                        .expect("stencil not symmetric")
                })
                .collect();
            let bad = (0..g.len()).into_par_iter().any(|idx| {
                let c = g.coords(idx);
                offsets
                    .iter()
                    .enumerate()
                    .any(|(k, o)| match neighbor(g, c, *o, false) {
                        Some(n) => w[idx * m + k] != w[n * m + reverse[k]] || w[idx * m + k] < 0.0,
                        None => false,
                    })
            });
            if bad {
                return Err(Error::InvalidConfig(
                    "coupling weights are not symmetric".into(),
                ));
            }
        }
        Ok(())
    }

    /// Breadth-first search over positive couplings.
    pub(crate) fn check_connected(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(x) = queue.pop_front() {
            for (y, w) in self.neighbors(x) {
                if w > 0.0 && !seen[y] {
                    seen[y] = true;
                    count += 1;
                    queue.push_back(y);
                }
            }
        }
        if count == n {
            Ok(())
        } else {
            Err(Error::Disconnected)
        }
    }
}

fn convolve_axis(
    data: &[f64],
    g: &GridGeometry,
    axis: usize,
    taps: &[f64],
    periodic: bool,
) -> Vec<f64> {
    let n = g.dims[axis];
    let r = taps.len() / 2;
    let source = |pos: usize, t: usize| -> Option<usize> {
        let q = pos as isize + t as isize - r as isize;
        if periodic {
            Some(q.rem_euclid(n as isize) as usize)
        } else if q < 0 || q >= n as isize {
            None
        } else {
            Some(q as usize)
        }
    };
    let mut out = vec![0.0; data.len()];
    let nx = g.dims[0];
    let nxy = nx * g.dims[1];
    match axis {
        0 => out
            .par_chunks_mut(nx)
            .zip(data.par_chunks(nx))
            .for_each(|(o, line)| {
                for (pos, v) in o.iter_mut().enumerate() {
                    *v = taps
                        .iter()
                        .enumerate()
                        .filter_map(|(t, w)| source(pos, t).map(|q| w * line[q]))
                        .sum();
                }
            }),
        // whole rows (axis 1) or slices (axis 2) are shifted and accumulated
        _ => {
            let block = if axis == 1 { nx } else { nxy };
            out.par_chunks_mut(nxy).enumerate().for_each(|(z, o)| {
                for (k, dst) in o.chunks_mut(block).enumerate() {
                    let (pos, base) = if axis == 1 { (k, z * nxy) } else { (z, 0) };
                    for (t, w) in taps.iter().enumerate() {
                        if let Some(q) = source(pos, t) {
                            let src = &data[base + q * block..base + (q + 1) * block];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
                        }
                    }
                }
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_degrees() {
        let g = GridGeometry::cube(3);
        let six = build_adjacency_coupling(&g, Connectivity::Six);
        assert_eq!(six.degree(g.index(1, 1, 1)), 6);
        assert_eq!(six.degree(g.index(0, 0, 0)), 3);
        let all = build_adjacency_coupling(&g, Connectivity::TwentySix);
        assert_eq!(all.degree(g.index(1, 1, 1)), 26);
        let cube = build_cube_adjacency_coupling(&GridGeometry::cube(7), 2).unwrap();
        assert_eq!(cube.degree(GridGeometry::cube(7).index(3, 3, 3)), 124);
        assert_eq!(cube.degree(0), 26);
        let mid = build_adjacency_coupling(&g, Connectivity::Eighteen);
        assert_eq!(mid.degree(g.index(1, 1, 1)), 18);
    }

    #[test]
    fn image_weighted_degenerates_to_adjacency() {
        let g = GridGeometry::cube(4);
        let img = ScalarVolume::from_fn(g.clone(), |p| p[0] * 0.3 + p[2]);
        let adj = build_adjacency_coupling(&g, Connectivity::Six);
        let w0 = build_image_weighted_coupling(&img, Connectivity::Six, 0.0).unwrap();
        let flat = build_image_weighted_coupling(
            &ScalarVolume::filled(g.clone(), 5.0),
            Connectivity::Six,
            3.0,
        )
        .unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.7).sin()).collect();
        assert_eq!(adj.apply(&v), w0.apply(&v));
        assert_eq!(adj.apply(&v), flat.apply(&v));
    }

    #[test]
    fn image_weighted_two_voxel_weight() {
        let g = GridGeometry::new([2, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let img = ScalarVolume::from_fn(g.clone(), |p| p[0] * std::f64::consts::LN_2);
        let q = build_image_weighted_coupling(&img, Connectivity::Six, 1.0).unwrap();
        let row = q.neighbors(g.index(0, 0, 0));
        let w = row.iter().find(|(n, _)| *n == g.index(1, 0, 0)).unwrap().1;
        assert!((w - 0.5).abs() < 1e-15);
    }

    #[test]
    fn image_weighted_is_symmetric_on_random_image() {
        let g = GridGeometry::cube(5);
        let img = ScalarVolume::from_fn(g.clone(), |p| (p[0] * 1.3 + p[1] * 0.2).sin() * p[2]);
        let q = build_image_weighted_coupling(&img, Connectivity::TwentySix, 2.0).unwrap();
        for x in 0..g.len() {
            for (y, w) in q.neighbors(x) {
                let back = q.neighbors(y).into_iter().find(|(z, _)| *z == x).unwrap().1;
                assert_eq!(w, back);
            }
        }
    }

    #[test]
    fn underflowing_weights_disconnect_the_graph() {
        let g = GridGeometry::cube(4);
        let img = ScalarVolume::from_fn(g, |p| if p[0] < 1.5 { 0.0 } else { 1.0 });
        assert!(matches!(
            build_image_weighted_coupling(&img, Connectivity::Six, 1e4),
            Err(Error::Disconnected)
        ));
    }

    #[test]
    fn periodic_adjacency_is_regular() {
        let g = GridGeometry::cube(4);
        let q = build_periodic_adjacency_coupling(&g, Connectivity::Six);
        assert!(q.is_periodic());
        assert!((0..g.len()).all(|i| q.degree(i) == 6));
        let ones = vec![1.0; g.len()];
        assert!(q.apply(&ones).iter().all(|v| *v == 6.0));
    }

    #[test]
    fn unit_cube_matches_twenty_six_connectivity() {
        let g = GridGeometry::new([5, 6, 4], [1.0; 3], [0.0; 3]).unwrap();
        let a = build_adjacency_coupling(&g, Connectivity::TwentySix);
        let b = build_cube_adjacency_coupling(&g, 1).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| ((i * 31) % 11) as f64 - 4.0).collect();
        for (x, y) in a.apply(&v).iter().zip(b.apply(&v)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cube_apply_matches_rows() {
        let g = GridGeometry::new([7, 5, 6], [1.0; 3], [0.0; 3]).unwrap();
        let q = build_cube_adjacency_coupling(&g, 2).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let fast = q.apply(&v);
        for x in 0..g.len() {
            let slow: f64 = q.neighbors(x).iter().map(|(n, w)| w * v[*n]).sum();
            assert!((fast[x] - slow).abs() < 1e-10);
        }
        assert!(build_cube_adjacency_coupling(&g, 0).is_err());
    }

    #[test]
    fn gaussian_rejects_non_spd() {
        let g = GridGeometry::cube(8);
        let bad = Matrix3::new(1.0, 2.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            build_gaussian_coupling(&g, bad, false),
            Err(Error::NotSpd)
        ));
    }

    #[test]
    fn separable_and_dense_gaussian_agree() {
        let g = GridGeometry::cube(9);
        let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(0.5, 0.3, 0.8));
        let sep = build_gaussian_coupling(&g, s, false).unwrap();
        let v: Vec<f64> = (0..g.len()).map(|i| ((i * 7919) % 13) as f64).collect();
        let a = sep.apply(&v);
        let b: Vec<f64> = (0..g.len())
            .map(|x| sep.neighbors(x).iter().map(|(n, w)| w * v[*n]).sum())
            .collect();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10 * y.abs().max(1.0));
        }
    }
}
