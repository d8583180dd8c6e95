//! Masked orthographic alignment of a canonical shape onto a reference.
//!
//! Shapes are row-major `n x 3`; the rotation acts from the right
//! (`aligned = scale * s_c * R`), so the optimal rotation comes from the SVD
//! of the masked cross-covariance `s_cᵀ s_r`.

use nalgebra::{DMatrix, Matrix3, Quaternion, UnitQuaternion, Vector3};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::keypoints::{KeypointSet3D, VisibilityMask};

/// Relative singular-value cutoff used to decide the rank of the
/// cross-covariance.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub rotation: Matrix3<f64>,
    pub scale: f64,
    pub aligned: KeypointSet3D,
    /// Frobenius norm of `s_r - aligned` over visible rows.
    pub residual: f64,
}

fn check_shapes(a: &KeypointSet3D, b: &KeypointSet3D, m: &VisibilityMask) -> Result<()> {
    if a.len() != b.len() || a.len() != m.len() {
        return Err(Error::Dimension(format!(
            "alignment inputs disagree: {} / {} rows, mask {}",
            a.len(),
            b.len(),
            m.len()
        )));
    }
    Ok(())
}

/// `Σ_visible s_c,iᵀ s_r,i`
pub fn cross_covariance(s_c: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Matrix3<f64> {
    let (a, b) = (s_c.coords(), s_r.coords());
    let mut c = Matrix3::zeros();
    for i in m.visible_indices() {
        for r in 0..3 {
            for k in 0..3 {
                c[(r, k)] += a[[i, r]] * b[[i, k]];
            }
        }
    }
    c
}

pub fn solve_rotation(s_c: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<Matrix3<f64>> {
    check_shapes(s_c, s_r, m)?;
    let vis = m.count_visible();
    if vis < 3 {
        return Err(Error::InsufficientPoints(vis));
    }
    let c = cross_covariance(s_c, s_r, m);
    // fixed-size 3x3 svd is inaccurate for close singular values
    let svd = DMatrix::from_column_slice(3, 3, c.as_slice()).svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (
            Matrix3::from_column_slice(u.as_slice()),
            Matrix3::from_column_slice(v_t.as_slice()),
        ),
        _ => return Err(Error::DegenerateGeometry(0)),
    };
    let sv = Vector3::from_column_slice(svd.singular_values.as_slice());
    let top = sv.max();
    let rank = if top > 0.0 && top.is_finite() {
        sv.iter().filter(|&&s| s > top * RANK_TOL).count()
    } else {
        0
    };
    if rank <= 1 {
        return Err(Error::DegenerateGeometry(rank));
    }
    // Flip the weakest singular direction when U Vᵀ is a reflection.
    let weakest = sv.imin();
    let mut flip = Vector3::from_element(1.0);
    if (u * v_t).determinant() < 0.0 {
        flip[weakest] = -1.0;
    }
    Ok(u * Matrix3::from_diagonal(&flip) * v_t)
}

/// Least-squares scale `⟨s_c_rot, s_r⟩ / ‖s_c_rot‖²` over visible rows, or 1
/// when the rotated shape vanishes.
pub fn solve_scale(s_c_rot: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<f64> {
    check_shapes(s_c_rot, s_r, m)?;
    let (a, b) = (s_c_rot.coords(), s_r.coords());
    let (mut num, mut den) = (0.0, 0.0);
    for i in m.visible_indices() {
        for k in 0..3 {
            num += a[[i, k]] * b[[i, k]];
            den += a[[i, k]] * a[[i, k]];
        }
    }
    Ok(if den > 0.0 { num / den } else { 1.0 })
}

pub(crate) fn rotate(s: &Array2<f64>, r: &Matrix3<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(s.raw_dim());
    for (i, row) in s.rows().into_iter().enumerate() {
        for k in 0..3 {
            out[[i, k]] = row[0] * r[(0, k)] + row[1] * r[(1, k)] + row[2] * r[(2, k)];
        }
    }
    out
}

/// Masked Frobenius distance between two shapes.
pub fn masked_residual(a: &KeypointSet3D, b: &KeypointSet3D, m: &VisibilityMask) -> f64 {
    let (a, b) = (a.coords(), b.coords());
    m.visible_indices()
        .map(|i| (0..3).map(|k| (a[[i, k]] - b[[i, k]]).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Residual of `s_r` against `scale * s_c * rotation`.
pub fn residual_for(
    s_c: &KeypointSet3D,
    s_r: &KeypointSet3D,
    m: &VisibilityMask,
    rotation: &Matrix3<f64>,
    scale: f64,
) -> f64 {
    let moved =
        KeypointSet3D::new(rotate(s_c.coords(), rotation) * scale).expect("rotation of finite shape stays finite");
    masked_residual(&moved, s_r, m)
}

pub fn align(s_c: &KeypointSet3D, s_r: &KeypointSet3D, m: &VisibilityMask) -> Result<AlignmentResult> {
    let rotation = solve_rotation(s_c, s_r, m)?;
    let rotated = KeypointSet3D::new(rotate(s_c.coords(), &rotation))?;
    let scale = solve_scale(&rotated, s_r, m)?;
    let aligned = KeypointSet3D::new(rotated.into_inner() * scale)?;
    let residual = masked_residual(&aligned, s_r, m);
    Ok(AlignmentResult {
        rotation,
        scale,
        aligned,
        residual,
    })
}

/// Uniformly distributed proper rotation, drawn through a normalized
/// Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            let quat = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]));
            return *quat.to_rotation_matrix().matrix();
        }
    }
}
