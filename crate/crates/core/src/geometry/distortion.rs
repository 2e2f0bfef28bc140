//! Brown-Conrady lens distortion: three radial and two tangential terms on
//! normalized image coordinates.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use super::GeometryError;

const UNDISTORT_MAX_ITERS: usize = 50;
const UNDISTORT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DistortionCoeffs {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub p1: f64,
    pub p2: f64,
}

impl DistortionCoeffs {
    pub const ZERO: Self = Self {
        k1: 0.0,
        k2: 0.0,
        k3: 0.0,
        p1: 0.0,
        p2: 0.0,
    };

    pub fn radial(k1: f64, k2: f64, k3: f64) -> Self {
        Self {
            k1,
            k2,
            k3,
            ..Self::ZERO
        }
    }

    /// `[k1, k2, k3, p1, p2]`
    pub fn to_array(&self) -> [f64; 5] {
        [self.k1, self.k2, self.k3, self.p1, self.p2]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self {
            k1: a[0],
            k2: a[1],
            k3: a[2],
            p1: a[3],
            p2: a[4],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.to_array().iter().all(|&c| c == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    #[inline]
    fn radial_factor(&self, r2: f64) -> f64 {
        1.0 + r2 * (self.k1 + r2 * (self.k2 + r2 * self.k3))
    }

    #[inline]
    fn tangential(&self, x: f64, y: f64, r2: f64) -> (f64, f64) {
        (
            2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    /// Forward model: undistorted normalized coordinates to distorted ones.
    #[inline]
    pub fn distort(&self, x: f64, y: f64) -> (f64, f64) {
        let r2 = x * x + y * y;
        let radial = self.radial_factor(r2);
        let (tx, ty) = self.tangential(x, y, r2);
        (x * radial + tx, y * radial + ty)
    }

    /// Jacobian of [`distort`](Self::distort) with respect to `(x, y)`.
    pub fn jacobian(&self, x: f64, y: f64) -> Matrix2<f64> {
        let r2 = x * x + y * y;
        let radial = self.radial_factor(r2);
        let dr = self.k1 + r2 * (2.0 * self.k2 + 3.0 * self.k3 * r2);
        let (p1, p2) = (self.p1, self.p2);
        Matrix2::new(
            radial + 2.0 * dr * x * x + 2.0 * p1 * y + 6.0 * p2 * x,
            2.0 * dr * x * y + 2.0 * p1 * x + 2.0 * p2 * y,
            2.0 * dr * x * y + 2.0 * p1 * x + 2.0 * p2 * y,
            radial + 2.0 * dr * y * y + 6.0 * p1 * y + 2.0 * p2 * x,
        )
    }

    /// Inverts the forward model by fixed-point iteration.
    ///
    /// Fails when the iteration does not reach a residual below 1e-10 within
    /// 50 steps, which signals an input outside the injective domain.
    pub fn undistort(&self, xd: f64, yd: f64) -> Result<(f64, f64), GeometryError> {
        if self.is_zero() {
            return Ok((xd, yd));
        }
        let (mut x, mut y) = (xd, yd);
        for _ in 0..=UNDISTORT_MAX_ITERS {
            let (fx, fy) = self.distort(x, y);
            let residual = ((fx - xd).powi(2) + (fy - yd).powi(2)).sqrt();
            if residual < UNDISTORT_TOL {
                return Ok(self.newton_polish(x, y, xd, yd, residual));
            }
            let r2 = x * x + y * y;
            let radial = self.radial_factor(r2);
            if !(radial > 0.0) {
                break;
            }
            let (tx, ty) = self.tangential(x, y, r2);
            x = (xd - tx) / radial;
            y = (yd - ty) / radial;
        }
        Err(GeometryError::UndistortDiverged { x: xd, y: yd })
    }

    /// One Newton step on a converged estimate; kept only if it helps.
    fn newton_polish(&self, x: f64, y: f64, xd: f64, yd: f64, residual: f64) -> (f64, f64) {
        let (fx, fy) = self.distort(x, y);
        let Some(inv) = self.jacobian(x, y).try_inverse() else {
            return (x, y);
        };
        let step = inv * nalgebra::Vector2::new(xd - fx, yd - fy);
        let (nx, ny) = (x + step.x, y + step.y);
        let (gx, gy) = self.distort(nx, ny);
        if ((gx - xd).powi(2) + (gy - yd).powi(2)).sqrt() <= residual {
            (nx, ny)
        } else {
            (x, y)
        }
    }

    /// Checks that the radial displacement is strictly monotone along rays
    /// from the center out to `max_radius`, sampled on a polar grid.
    pub fn check_injective(&self, max_radius: f64) -> Result<(), GeometryError> {
        if !self.is_finite() {
            return Err(GeometryError::NonInjectiveDistortion { radius: f64::NAN });
        }
        const ANGLES: usize = 16;
        const STEPS: usize = 64;
        for a in 0..ANGLES {
            let theta = a as f64 * std::f64::consts::TAU / ANGLES as f64;
            let (s, c) = theta.sin_cos();
            let mut prev = 0.0;
            for i in 1..=STEPS {
                let r = max_radius * i as f64 / STEPS as f64;
                let (xd, yd) = self.distort(r * c, r * s);
                let along = xd * c + yd * s;
                if along <= prev {
                    return Err(GeometryError::NonInjectiveDistortion { radius: r });
                }
                prev = along;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn zero_coefficients_are_identity() {
        let d = DistortionCoeffs::ZERO;
        assert_eq!(d.undistort(0.3, -0.2).unwrap(), (0.3, -0.2));
        assert_eq!(d.distort(0.3, -0.2), (0.3, -0.2));
    }

    #[test]
    fn radial_k1_inverts_forward_model() {
        let d = DistortionCoeffs::radial(0.1, 0.0, 0.0);
        let (xd, yd) = d.distort(0.2, 0.1);
        let (x, y) = d.undistort(xd, yd).unwrap();
        assert_abs_diff_eq!(x, 0.2, epsilon = 1e-8);
        assert_abs_diff_eq!(y, 0.1, epsilon = 1e-8);
    }

    #[test]
    fn center_is_fixed_point() {
        let d = DistortionCoeffs {
            k1: -0.3,
            k2: 0.1,
            k3: 0.02,
            p1: 0.0,
            p2: 0.0,
        };
        assert_eq!(d.undistort(0.0, 0.0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn forward_model_spot_value() {
        let d = DistortionCoeffs::radial(0.1, 0.0, 0.0);
        let (xd, _) = d.distort(0.1, 0.0);
        assert_abs_diff_eq!(xd, 0.1001, epsilon = 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = DistortionCoeffs {
            k1: 0.05,
            k2: -0.02,
            k3: 0.004,
            p1: 1e-3,
            p2: -2e-3,
        };
        let (x, y) = (0.31, -0.22);
        let j = d.jacobian(x, y);
        let h = 1e-6;
        let (ax, ay) = d.distort(x + h, y);
        let (bx, by) = d.distort(x - h, y);
        let (cx, cy) = d.distort(x, y + h);
        let (ex, ey) = d.distort(x, y - h);
        assert_abs_diff_eq!(j[(0, 0)], (ax - bx) / (2.0 * h), epsilon = 1e-8);
        assert_abs_diff_eq!(j[(1, 0)], (ay - by) / (2.0 * h), epsilon = 1e-8);
        assert_abs_diff_eq!(j[(0, 1)], (cx - ex) / (2.0 * h), epsilon = 1e-8);
        assert_abs_diff_eq!(j[(1, 1)], (cy - ey) / (2.0 * h), epsilon = 1e-8);
    }

    #[test]
    fn strong_barrel_is_not_injective_far_out() {
        let d = DistortionCoeffs::radial(-0.5, 0.0, 0.0);
        assert!(d.check_injective(0.5).is_ok());
        assert!(d.check_injective(1.2).is_err());
    }

    proptest! {
        #[test]
        fn distort_undistort_roundtrip(
            x in -0.7f64..0.7, y in -0.55f64..0.55,
            k1 in -0.1f64..0.1, k2 in -0.05f64..0.05, k3 in -0.01f64..0.01,
            p1 in -2e-3f64..2e-3, p2 in -2e-3f64..2e-3,
        ) {
            let d = DistortionCoeffs { k1, k2, k3, p1, p2 };
            let (xd, yd) = d.distort(x, y);
            let (ux, uy) = d.undistort(xd, yd).unwrap();
            let (rx, ry) = d.distort(ux, uy);
            prop_assert!((rx - xd).abs() < 1e-8 && (ry - yd).abs() < 1e-8);
            prop_assert!((ux - x).abs() < 1e-8 && (uy - y).abs() < 1e-8);
        }
    }
}
