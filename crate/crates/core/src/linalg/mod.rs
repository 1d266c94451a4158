//! Linear-algebra helpers: sparse symmetric factorization, rotations.

pub mod sparse;

pub use sparse::{conjugate_gradient, minimum_degree_order, CscUpper, LdlFactor, LdlSymbolic};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion};

use crate::{Mat3, Vec3};

/// Nearest rotation to `m` in Frobenius norm (orthogonal polar factor),
/// forced to det +1. Returns `None` when `det(m) <= min_det`.
pub fn polar_rotation(m: &Mat3, min_det: f64) -> Option<Mat3> {
    let det = m.determinant();
    if !(det > min_det) {
        return None;
    }
    let svd = m.svd(true, true);
    let u = svd.u?;
    let v_t = svd.v_t?;
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // only reachable through round-off when det(m) is tiny
        let mut u2 = u;
        let smallest = svd.singular_values.imin();
        u2.column_mut(smallest).neg_mut();
        r = u2 * v_t;
    }
    Some(r)
}

pub fn rotation_to_quaternion(r: &Mat3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r))
}

/// Weighted mean of rotations via sign-aligned quaternion averaging.
/// Weights need not be normalized.
pub fn average_rotations(rotations: &[Mat3], weights: &[f64]) -> Mat3 {
    assert_eq!(rotations.len(), weights.len());
    let quats: Vec<UnitQuaternion<f64>> = rotations.iter().map(rotation_to_quaternion).collect();
    let Some(first) = quats.first() else {
        return Mat3::identity();
    };
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    for (q, &w) in quats.iter().zip(weights) {
        let q = q.into_inner();
        let aligned = if q.dot(first.as_ref()) < 0.0 { -q } else { q };
        acc += aligned * w;
    }
    UnitQuaternion::from_quaternion(acc).to_rotation_matrix().into_inner()
}

/// Rotation by `angle` radians about the unit `axis`.
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// Angle between two rotations in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Deterministic rotation from three uniform samples (Shoemake).
pub fn rotation_from_uniform(u1: f64, u2: f64, u3: f64) -> Mat3 {
    use std::f64::consts::TAU;
    let a = (1.0 - u1).sqrt();
    let b = u1.sqrt();
    let q = Quaternion::new(b * (TAU * u3).cos(), a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin());
    UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polar_of_scaled_identity_is_identity() {
        let r = polar_rotation(&(Mat3::identity() * 2.0), 1e-9).unwrap();
        assert!((r - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn polar_recovers_rotation_times_stretch() {
        let r0 = axis_angle(&Vec3::new(1.0, 2.0, 0.5), 0.7);
        let s = Mat3::new(2.0, 0.1, 0.0, 0.1, 1.5, 0.2, 0.0, 0.2, 1.0);
        let r = polar_rotation(&(r0 * s), 1e-9).unwrap();
        assert!((r - r0).norm() < 1e-9);
    }

    #[test]
    fn polar_rejects_reflection_and_singular() {
        assert!(polar_rotation(&Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0)), 1e-9).is_none());
        assert!(polar_rotation(&Mat3::zeros(), 1e-9).is_none());
    }

    #[test]
    fn average_of_identical_rotations_is_that_rotation() {
        let r = axis_angle(&Vec3::z(), 2.5);
        let avg = average_rotations(&[r, r, r], &[0.2, 0.3, 0.5]);
        assert!((avg - r).norm() < 1e-12);
    }

    #[test]
    fn average_of_opposite_small_rotations_is_identity() {
        let a = axis_angle(&Vec3::x(), 0.3);
        let b = axis_angle(&Vec3::x(), -0.3);
        assert!((average_rotations(&[a, b], &[1.0, 1.0]) - Mat3::identity()).norm() < 1e-12);
    }

    #[test]
    fn uniform_rotations_are_orthonormal() {
        for i in 0..20 {
            let t = i as f64 / 20.0;
            let r = rotation_from_uniform(t, (t * 7.3).fract(), (t * 3.1).fract());
            assert!((r * r.transpose() - Mat3::identity()).norm() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }
}
