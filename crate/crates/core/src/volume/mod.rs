//! Grid geometry, scalar and vector fields on a fixed Cartesian grid, and the
//! sampling/differencing primitives the rest of the crate builds on.
//!
//! Layout is row-major with x fastest: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Sampling outside the grid clamps to the edge.

pub mod io;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reduce::tree_sum_by;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 2) {
            return Err(Error::InvalidGeometry(format!(
                "all dims must be >= 2, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGeometry(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "origin must be finite, got {origin:?}"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Unit spacing, zero origin.
    pub fn cube(n: usize) -> Self {
        Self::new([n; 3], [1.0; 3], [0.0; 3]).expect("cube side must be >= 2")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn world(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [
            self.origin[0] + self.spacing[0] * i as f64,
            self.origin[1] + self.spacing[1] * j as f64,
            self.origin[2] + self.spacing[2] * k as f64,
        ]
    }

    #[inline]
    pub fn world_of(&self, idx: usize) -> [f64; 3] {
        let [i, j, k] = self.coords(idx);
        self.world(i, j, k)
    }

    /// Continuous voxel coordinates of a world point (unclamped).
    #[inline]
    pub fn to_voxel(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    #[inline]
    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Domain measure `V`: the voxel count times the voxel volume.
    pub fn domain_volume(&self) -> f64 {
        self.len() as f64 * self.voxel_volume()
    }

    /// World coordinates of the geometric center of the voxel lattice.
    pub fn center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.origin[a] + 0.5 * self.spacing[a] * (self.dims[a] - 1) as f64;
        }
        c
    }

    /// Physical extent between the first and last voxel centers per axis.
    pub fn extent(&self) -> [f64; 3] {
        let mut e = [0.0; 3];
        for a in 0..3 {
            e[a] = self.spacing[a] * (self.dims[a] - 1) as f64;
        }
        e
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let u = self.to_voxel(p);
        (0..3).all(|a| u[a] >= -1e-9 && u[a] <= (self.dims[a] - 1) as f64 + 1e-9)
    }

    pub fn ensure_same(&self, other: &GridGeometry, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )))
        }
    }

    /// Half-resolution grid covering the same box: each coarse voxel center
    /// sits at the center of a 2×2×2 block of fine voxels.
    pub fn halved(&self) -> Option<GridGeometry> {
        let dims = [self.dims[0] / 2, self.dims[1] / 2, self.dims[2] / 2];
        if dims.iter().any(|&d| d < 4) {
            return None;
        }
        let mut spacing = self.spacing;
        let mut origin = self.origin;
        for a in 0..3 {
            origin[a] += 0.5 * spacing[a];
            spacing[a] *= 2.0;
        }
        GridGeometry::new(dims, spacing, origin).ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub geometry: GridGeometry,
    pub data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: GridGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self { geometry, data })
    }

    pub fn filled(geometry: GridGeometry, value: f64) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![value; n],
        }
    }

    /// Evaluates `f(world point)` at every voxel.
    pub fn from_fn<F>(geometry: GridGeometry, f: F) -> Self
    where
        F: Fn([f64; 3]) -> f64 + Sync,
    {
        let data = (0..geometry.len())
            .into_par_iter()
            .map(|idx| f(geometry.world_of(idx)))
            .collect();
        Self { geometry, data }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.geometry.index(i, j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn sum(&self) -> f64 {
        tree_sum_by(self.data.len(), &|i| self.data[i])
    }

    /// Trilinear interpolation at a world point, clamped to the boundary.
    pub fn sample(&self, p: [f64; 3]) -> f64 {
        let g = &self.geometry;
        let u = g.to_voxel(p);
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let (b, f) = cell(u[a], g.dims[a]);
            base[a] = b;
            t[a] = f;
        }
        trilinear(&self.data, g, base, t)
    }

    /// Value and gradient (world units) of the clamped trilinear interpolant.
    ///
    /// On a cell face the derivative across that face is the mean of the two
    /// one-sided slopes, and it is zero outside the grid where the clamped
    /// extension is flat. This makes the returned gradient agree with a central
    /// finite difference of [`ScalarVolume::sample`].
    pub fn sample_with_gradient(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        let g = &self.geometry;
        let u = g.to_voxel(p);
        let mut base = [0usize; 3];
        let mut t = [0.0; 3];
        let mut mode = [AxisMode::Inside; 3];
        for a in 0..3 {
            let n = g.dims[a];
            let (b, f) = cell(u[a], n);
            base[a] = b;
            t[a] = f;
            let top = (n - 1) as f64;
            mode[a] = if u[a] < 0.0 || u[a] > top {
                AxisMode::Outside
            } else if (u[a] - u[a].round()).abs() < KNOT_SNAP {
                AxisMode::Knot(u[a].round() as usize)
            } else {
                AxisMode::Inside
            };
        }
        if mode.iter().all(|m| matches!(m, AxisMode::Inside)) {
            return trilinear_with_gradient(&self.data, g, base, t);
        }
        let value = trilinear(&self.data, g, base, t);
        let mut grad = [0.0; 3];
        for a in 0..3 {
            let slope = |c: usize| cell_slope(&self.data, g, base, t, a, c);
            let n = g.dims[a];
            let d = match mode[a] {
                AxisMode::Outside => 0.0,
                AxisMode::Inside => slope(base[a]),
                AxisMode::Knot(k) => {
                    let left = if k >= 1 { slope(k - 1) } else { 0.0 };
                    let right = if k + 1 <= n - 1 { slope(k) } else { 0.0 };
                    0.5 * (left + right)
                }
            };
            grad[a] = d / g.spacing[a];
        }
        (value, grad)
    }

    /// Catmull-Rom (cubic convolution) interpolation, clamped at the edges.
    pub fn sample_cubic(&self, p: [f64; 3]) -> f64 {
        let g = &self.geometry;
        let u = g.to_voxel(p);
        let mut idx = [[0usize; 4]; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..3 {
            let n = g.dims[a] as isize;
            let x = u[a].clamp(0.0, (n - 1) as f64);
            let i = (x.floor() as isize).min(n - 2);
            let f = x - i as f64;
            w[a] = catmull_rom_weights(f);
            for (o, slot) in idx[a].iter_mut().enumerate() {
                *slot = (i - 1 + o as isize).clamp(0, n - 1) as usize;
            }
        }
        let mut acc = 0.0;
        for (c, &wk) in w[2].iter().enumerate() {
            let k = idx[2][c];
            for (b, &wj) in w[1].iter().enumerate() {
                let j = idx[1][b];
                let row = g.index(0, j, k);
                let mut s = 0.0;
                for (a, &wi) in w[0].iter().enumerate() {
                    s += wi * self.data[row + idx[0][a]];
                }
                acc += wk * wj * s;
            }
        }
        acc
    }

    /// Trilinear resampling onto another grid.
    pub fn resample(&self, target: &GridGeometry) -> ScalarVolume {
        ScalarVolume::from_fn(target.clone(), |p| self.sample(p))
    }

    /// Separable Gaussian blur with standard deviation given in voxels.
    pub fn gaussian_blur(&self, sigma_voxels: f64) -> ScalarVolume {
        if sigma_voxels <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma_voxels).ceil() as isize;
        let mut taps: Vec<f64> = (-radius..=radius)
            .map(|o| (-(o * o) as f64 / (2.0 * sigma_voxels * sigma_voxels)).exp())
            .collect();
        let norm: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|t| *t /= norm);
        let mut data = self.data.clone();
        for axis in 0..3 {
            data = convolve_axis(&data, &self.geometry, axis, &taps, radius);
        }
        ScalarVolume {
            geometry: self.geometry.clone(),
            data,
        }
    }

    /// Blur then decimate onto [`GridGeometry::halved`].
    pub fn downsample(&self) -> Option<ScalarVolume> {
        let coarse = self.geometry.halved()?;
        Some(self.gaussian_blur(1.0).resample(&coarse))
    }
}

/// Coordinates this close (in voxels) to a grid plane count as lying on it.
const KNOT_SNAP: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
enum AxisMode {
    Inside,
    Knot(usize),
    Outside,
}

/// Lower cell corner and fractional offsets of a world point (clamped).
pub(crate) fn cell_weights(g: &GridGeometry, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
    let u = g.to_voxel(p);
    let mut b = [0usize; 3];
    let mut t = [0.0; 3];
    for a in 0..3 {
        let (bb, f) = cell(u[a], g.dims[a]);
        b[a] = bb;
        t[a] = f;
    }
    (b, t)
}

/// Lower cell index and fractional offset for a clamped continuous coordinate.
#[inline]
pub(crate) fn cell(u: f64, n: usize) -> (usize, f64) {
    let top = (n - 1) as f64;
    let x = if u.is_nan() { 0.0 } else { u.clamp(0.0, top) };
    let b = (x.floor() as usize).min(n - 2);
    (b, x - b as f64)
}

#[inline]
fn trilinear(data: &[f64], g: &GridGeometry, b: [usize; 3], t: [f64; 3]) -> f64 {
    let nx = g.dims[0];
    let nxy = nx * g.dims[1];
    let i000 = b[0] + nx * b[1] + nxy * b[2];
    let c00 = data[i000] * (1.0 - t[0]) + data[i000 + 1] * t[0];
    let c10 = data[i000 + nx] * (1.0 - t[0]) + data[i000 + nx + 1] * t[0];
    let c01 = data[i000 + nxy] * (1.0 - t[0]) + data[i000 + nxy + 1] * t[0];
    let c11 = data[i000 + nxy + nx] * (1.0 - t[0]) + data[i000 + nxy + nx + 1] * t[0];
    let c0 = c00 * (1.0 - t[1]) + c10 * t[1];
    let c1 = c01 * (1.0 - t[1]) + c11 * t[1];
    c0 * (1.0 - t[2]) + c1 * t[2]
}

#[inline]
fn trilinear_with_gradient(
    data: &[f64],
    g: &GridGeometry,
    b: [usize; 3],
    t: [f64; 3],
) -> (f64, [f64; 3]) {
    let nx = g.dims[0];
    let nxy = nx * g.dims[1];
    let i = b[0] + nx * b[1] + nxy * b[2];
    let (c000, c100) = (data[i], data[i + 1]);
    let (c010, c110) = (data[i + nx], data[i + nx + 1]);
    let (c001, c101) = (data[i + nxy], data[i + nxy + 1]);
    let (c011, c111) = (data[i + nxy + nx], data[i + nxy + nx + 1]);
    let [tx, ty, tz] = t;
    let (sx, sy, sz) = (1.0 - tx, 1.0 - ty, 1.0 - tz);
    let c00 = c000 * sx + c100 * tx;
    let c10 = c010 * sx + c110 * tx;
    let c01 = c001 * sx + c101 * tx;
    let c11 = c011 * sx + c111 * tx;
    let c0 = c00 * sy + c10 * ty;
    let c1 = c01 * sy + c11 * ty;
    let value = c0 * sz + c1 * tz;
    let dx = ((c100 - c000) * sy + (c110 - c010) * ty) * sz
        + ((c101 - c001) * sy + (c111 - c011) * ty) * tz;
    let dy = (c10 - c00) * sz + (c11 - c01) * tz;
    let dz = c1 - c0;
    (
        value,
        [dx / g.spacing[0], dy / g.spacing[1], dz / g.spacing[2]],
    )
}

/// Slope (per voxel) across cell `c` along `axis`, interpolated in the other two axes.
#[inline]
fn cell_slope(
    data: &[f64],
    g: &GridGeometry,
    b: [usize; 3],
    t: [f64; 3],
    axis: usize,
    c: usize,
) -> f64 {
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (s1, s2, sa) = (strides[a1], strides[a2], strides[axis]);
    let lo = c * sa + b[a1] * s1 + b[a2] * s2;
    let d = |o: usize| data[lo + o + sa] - data[lo + o];
    let (t1, t2) = (t[a1], t[a2]);
    let near = d(0) * (1.0 - t1) + d(s1) * t1;
    let far = d(s2) * (1.0 - t1) + d(s2 + s1) * t1;
    near * (1.0 - t2) + far * t2
}

#[inline]
fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

fn convolve_axis(
    data: &[f64],
    g: &GridGeometry,
    axis: usize,
    taps: &[f64],
    radius: isize,
) -> Vec<f64> {
    let n = g.dims[axis] as isize;
    let stride = match axis {
        0 => 1,
        1 => g.dims[0],
        _ => g.dims[0] * g.dims[1],
    };
    (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let pos = g.coords(idx)[axis] as isize;
            let base = idx - pos as usize * stride;
            let mut acc = 0.0;
            for (o, w) in (-radius..=radius).zip(taps) {
                let q = (pos + o).clamp(0, n - 1) as usize;
                acc += w * data[base + q * stride];
            }
            acc
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorVolume {
    pub geometry: GridGeometry,
    pub data: Vec<[f64; 3]>,
}

impl VectorVolume {
    pub fn new(geometry: GridGeometry, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::InvalidGeometry(format!(
                "vector data length {} does not match {} voxels",
                data.len(),
                geometry.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| v.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(bad));
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: GridGeometry) -> Self {
        let n = geometry.len();
        Self {
            geometry,
            data: vec![[0.0; 3]; n],
        }
    }

    /// World coordinates of every voxel: the identity map.
    pub fn identity(geometry: GridGeometry) -> Self {
        let data = (0..geometry.len())
            .into_par_iter()
            .map(|i| geometry.world_of(i))
            .collect();
        Self { geometry, data }
    }

    /// Componentwise trilinear interpolation (clamped).
    pub fn sample(&self, p: [f64; 3]) -> [f64; 3] {
        let g = &self.geometry;
        let u = g.to_voxel(p);
        let mut b = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let (bb, f) = cell(u[a], g.dims[a]);
            b[a] = bb;
            t[a] = f;
        }
        let mut out = [0.0; 3];
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - t[2] } else { t[2] };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - t[0] } else { t[0] };
                    let v = self.data[g.index(b[0] + dx, b[1] + dy, b[2] + dz)];
                    let w = wx * wy * wz;
                    for c in 0..3 {
                        out[c] += w * v[c];
                    }
                }
            }
        }
        out
    }
}

/// Central differences in the interior, one-sided on boundary faces, in world units.
pub fn gradient_central(v: &ScalarVolume) -> VectorVolume {
    let g = &v.geometry;
    let data = (0..g.len())
        .into_par_iter()
        .map(|idx| {
            let c = g.coords(idx);
            let mut out = [0.0; 3];
            for a in 0..3 {
                out[a] = axis_difference(g, c, a, |i| v.data[i]) / g.spacing[a];
            }
            out
        })
        .collect();
    VectorVolume {
        geometry: g.clone(),
        data,
    }
}

/// Per-voxel difference along `axis` in voxel units (central inside, one-sided at faces).
#[inline]
pub(crate) fn axis_difference<F: Fn(usize) -> f64>(
    g: &GridGeometry,
    c: [usize; 3],
    axis: usize,
    f: F,
) -> f64 {
    let n = g.dims[axis];
    let at = |pos: usize| {
        let mut cc = c;
        cc[axis] = pos;
        f(g.index(cc[0], cc[1], cc[2]))
    };
    let p = c[axis];
    if p == 0 {
        at(1) - at(0)
    } else if p == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        0.5 * (at(p + 1) - at(p - 1))
    }
}

/// Indices `(lo, hi)` and weight `w` with `w·(f[hi] − f[lo])` the per-voxel
/// difference along an axis: central inside, one-sided at the faces.
#[inline]
pub(crate) fn axis_stencil(idx: usize, pos: usize, n: usize, stride: usize) -> (usize, usize, f64) {
    if pos == 0 {
        (idx, idx + stride, 1.0)
    } else if pos == n - 1 {
        (idx - stride, idx, 1.0)
    } else {
        (idx - stride, idx + stride, 0.5)
    }
}

/// Row-major Jacobian ∂v_r/∂x_c (world units) of a vector field, scaled by `scale`.
pub(crate) fn field_jacobian(
    g: &GridGeometry,
    v: &[[f64; 3]],
    scale: f64,
) -> Vec<nalgebra::Matrix3<f64>> {
    let [nx, ny, nz] = g.dims;
    let inv = [
        scale / g.spacing[0],
        scale / g.spacing[1],
        scale / g.spacing[2],
    ];
    let mut out = vec![nalgebra::Matrix3::zeros(); g.len()];
    out.par_chunks_mut(nx).enumerate().for_each(|(row, chunk)| {
        let (y, z) = (row % ny, row / ny);
        let base = row * nx;
        for (x, m) in chunk.iter_mut().enumerate() {
            let idx = base + x;
            let stencils = [
                axis_stencil(idx, x, nx, 1),
                axis_stencil(idx, y, ny, nx),
                axis_stencil(idx, z, nz, nx * ny),
            ];
            for (c, (lo, hi, w)) in stencils.into_iter().enumerate() {
                let k = w * inv[c];
                let (a, b) = (v[lo], v[hi]);
                for r in 0..3 {
                    m[(r, c)] = k * (b[r] - a[r]);
                }
            }
        }
    });
    out
}

/// Root-mean-square deviation over all voxels.
pub fn rmsd(a: &ScalarVolume, b: &ScalarVolume) -> Result<f64> {
    a.geometry.ensure_same(&b.geometry, "rmsd")?;
    let n = a.data.len();
    let ss = tree_sum_by(n, &|i| {
        let d = a.data[i] - b.data[i];
        d * d
    });
    Ok((ss / n as f64).sqrt())
}
