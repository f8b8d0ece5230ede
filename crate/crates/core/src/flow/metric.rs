use rayon::prelude::*;

use super::{sample_matrix, Mat3};
use crate::error::{Error, Result};
use crate::volume::GridGeometry;

/// G = (J⁻¹)ᵀ J⁻¹
pub fn metric_tensor(j: &Mat3) -> Result<Mat3> {
    let det = j.determinant();
    if det == 0.0 || !det.is_finite() {
        return Err(Error::Singular(det));
    }
    let inv = j.try_inverse().ok_or(Error::Singular(det))?;
    let g = inv.transpose() * inv;
    // symmetrize away rounding
    Ok((g + g.transpose()) * 0.5)
}

pub fn metric_field(j: &[Mat3]) -> Result<Vec<Mat3>> {
    j.par_iter().map(metric_tensor).collect()
}

/// Length of a sampled curve under a metric field on `geometry`, by the
/// trapezoid rule over segments with G interpolated trilinearly.
pub fn curve_length(curve: &[[f64; 3]], geometry: &GridGeometry, g: &[Mat3]) -> Result<f64> {
    if curve.len() < 2 {
        return Err(Error::InvalidConfig(
            "a curve needs at least two samples".into(),
        ));
    }
    if g.len() != geometry.len() {
        return Err(Error::GeometryMismatch(
            "metric field length differs from the grid".into(),
        ));
    }
    if let Some(p) = curve.iter().find(|p| !geometry.contains(**p)) {
        return Err(Error::OutsideDomain(*p));
    }
    let speed = |m: &Mat3, d: &nalgebra::Vector3<f64>| d.dot(&(m * d)).max(0.0).sqrt();
    let mut total = 0.0;
    for w in curve.windows(2) {
        let d = nalgebra::Vector3::new(w[1][0] - w[0][0], w[1][1] - w[0][1], w[1][2] - w[0][2]);
        let a = sample_matrix(geometry, g, w[0]);
        let b = sample_matrix(geometry, g, w[1]);
        total += 0.5 * (speed(&a, &d) + speed(&b, &d));
    }
    Ok(total)
}
