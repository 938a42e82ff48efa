//! 6D rotation representation and small 3×3 helpers.
//!
//! A rotation is stored as its first two columns `[c0, c1]` (6 values). The
//! full matrix is recovered by Gram-Schmidt orthonormalization.

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [dot(&a[0], v), dot(&a[1], v), dot(&a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn column(a: &Mat3, j: usize) -> Vec3 {
    [a[0][j], a[1][j], a[2][j]]
}

/// Rotation about the z (up) axis.
pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rodrigues' formula for an axis-angle vector.
pub fn axis_angle(w: &Vec3) -> Mat3 {
    let theta = norm(w);
    if theta < 1e-12 {
        return IDENTITY;
    }
    let k = scale(w, 1.0 / theta);
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    [
        [c + k[0] * k[0] * v, k[0] * k[1] * v - k[2] * s, k[0] * k[2] * v + k[1] * s],
        [k[1] * k[0] * v + k[2] * s, c + k[1] * k[1] * v, k[1] * k[2] * v - k[0] * s],
        [k[2] * k[0] * v - k[1] * s, k[2] * k[1] * v + k[0] * s, c + k[2] * k[2] * v],
    ]
}

/// First two columns of `r`, concatenated.
pub fn matrix_to_rot6d(r: &Mat3) -> [f64; 6] {
    [r[0][0], r[1][0], r[2][0], r[0][1], r[1][1], r[2][1]]
}

/// Gram-Schmidt: `a` is normalized, `b` has its `a` component removed and is
/// normalized, and the third column is `a × b`.
pub fn rot6d_to_matrix(v: &[f64]) -> Result<Mat3> {
    if v.len() != 6 {
        return Err(Error::DimensionMismatch { expected: 6, got: v.len() });
    }
    let a = [v[0], v[1], v[2]];
    let b = [v[3], v[4], v[5]];
    let na = norm(&a);
    if !(na > 1e-12) {
        return Err(Error::DegenerateRotation("first column has zero length".into()));
    }
    let c0 = scale(&a, 1.0 / na);
    let b_perp = sub(&b, &scale(&c0, dot(&c0, &b)));
    let nb = norm(&b_perp);
    if !(nb > 1e-12 * norm(&b).max(1.0)) {
        return Err(Error::DegenerateRotation("columns are parallel or second column is zero".into()));
    }
    let c1 = scale(&b_perp, 1.0 / nb);
    let c2 = cross(&c0, &c1);
    Ok([
        [c0[0], c1[0], c2[0]],
        [c0[1], c1[1], c2[1]],
        [c0[2], c1[2], c2[2]],
    ])
}

/// Max-abs residual of `RᵀR − I`.
pub fn orthogonality_residual(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((rtr[i][j] - target).abs());
        }
    }
    worst
}

/// Residual of a raw 6D block against orthonormality of its two columns.
pub fn rot6d_residual(v: &[f64]) -> f64 {
    let a = [v[0], v[1], v[2]];
    let b = [v[3], v[4], v[5]];
    (dot(&a, &a) - 1.0)
        .abs()
        .max((dot(&b, &b) - 1.0).abs())
        .max(dot(&a, &b).abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_identity(r: &Mat3) {
        for i in 0..3 {
            for j in 0..3 {
                let t = if i == j { 1.0 } else { 0.0 };
                assert!((r[i][j] - t).abs() < 1e-15, "{r:?}");
            }
        }
    }

    #[test]
    fn canonical_6d_is_identity() {
        assert_identity(&rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
        assert_identity(&rot6d_to_matrix(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap());
    }

    #[test]
    fn degenerate_inputs_error() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(rot6d_to_matrix(&[1.0; 5]).is_err());
    }

    #[test]
    fn axis_angle_round_trip() {
        let r = axis_angle(&[0.3, -0.2, 0.9]);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((r[i][j] - back[i][j]).abs() < 1e-14);
            }
        }
    }

    proptest! {
        #[test]
        fn gram_schmidt_is_orthonormal(v in proptest::array::uniform6(-3.0f64..3.0)) {
            let a = [v[0], v[1], v[2]];
            let b = [v[3], v[4], v[5]];
            prop_assume!(norm(&a) > 0.1 && norm(&cross(&a, &b)) > 0.1);
            let r = rot6d_to_matrix(&v).unwrap();
            prop_assert!(orthogonality_residual(&r) < 1e-12);
            prop_assert!((det(&r) - 1.0).abs() < 1e-12);
        }
    }
}
