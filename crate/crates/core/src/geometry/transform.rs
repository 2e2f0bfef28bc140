use nalgebra::{Matrix3, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::GeometryError;

/// Rotation plus translation, `p' = R p + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub const ORTHONORMAL_TOL: f64 = 1e-9;

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let tr = Self {
            rotation,
            translation,
        };
        tr.validate()?;
        Ok(tr)
    }

    /// Builds a transform from an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::from_scaled_axis(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let r = &self.rotation;
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(err <= Self::ORTHONORMAL_TOL) || !((det - 1.0).abs() <= Self::ORTHONORMAL_TOL) {
            return Err(GeometryError::InvalidRotation {
                orthogonality_error: err,
                determinant: det,
            });
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidRotation {
                orthogonality_error: f64::NAN,
                determinant: det,
            });
        }
        Ok(())
    }

    #[inline]
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Projects the rotation back onto SO(3).
    pub fn orthonormalized(&self) -> Self {
        let rot = Rotation3::from_matrix_eps(&self.rotation, 1e-15, 100, Rotation3::identity());
        Self {
            rotation: rot.into_inner(),
            translation: self.translation,
        }
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix_unchecked(self.rotation).scaled_axis()
    }

    /// Rotation angle of `self.R * other.Rᵀ` in radians.
    pub fn rotation_angle_to(&self, other: &Self) -> f64 {
        let rel = self.rotation * other.rotation.transpose();
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        // acos is ill-conditioned near zero; use the skew part for small angles
        let skew = Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        );
        let s = 0.5 * skew.norm();
        s.atan2(c)
    }

    pub fn is_finite(&self) -> bool {
        self.rotation
            .iter()
            .chain(self.translation.iter())
            .all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn inverse_composes_to_identity() {
        let t = RigidTransform::from_axis_angle(
            Vector3::new(0.1, -0.3, 0.2),
            Vector3::new(1.0, 2.0, 3.0),
        );
        let id = t.compose(&t.inverse());
        assert_abs_diff_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_abs_diff_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let mut r = Matrix3::identity();
        r[(0, 0)] = -1.0;
        assert!(RigidTransform::new(r, Vector3::zeros()).is_err());
        assert!(RigidTransform::new(Matrix3::identity() * 1.001, Vector3::zeros()).is_err());
    }

    #[test]
    fn one_degree_relative_angle() {
        let a = RigidTransform::from_axis_angle(Vector3::new(0.2, 0.1, -0.4), Vector3::zeros());
        let delta = RigidTransform::from_axis_angle(
            Vector3::new(0.0, 1f64.to_radians(), 0.0),
            Vector3::zeros(),
        );
        let b = delta.compose(&a);
        assert_abs_diff_eq!(b.rotation_angle_to(&a).to_degrees(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn composition_chain_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = RigidTransform::identity();
        for _ in 0..100 {
            let aa = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            acc = RigidTransform::from_axis_angle(aa, Vector3::new(0.1, 0.0, 0.0)).compose(&acc);
        }
        let err = (acc.rotation.transpose() * acc.rotation - Matrix3::identity())
            .abs()
            .max();
        assert!(err < 1e-7, "drift {err}");
        let fixed = acc.orthonormalized();
        assert!(fixed.validate().is_ok());
    }

    proptest! {
        #[test]
        fn axis_angle_roundtrip(x in -1.5f64..1.5, y in -1.5f64..1.5, z in -1.5f64..1.5) {
            let aa = Vector3::new(x, y, z);
            let t = RigidTransform::from_axis_angle(aa, Vector3::zeros());
            prop_assert!((t.axis_angle() - aa).norm() < 1e-9);
            prop_assert!(t.validate().is_ok());
        }
    }
}
