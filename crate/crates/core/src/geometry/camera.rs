use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

use super::{DistortionCoeffs, GeometryError, RigidTransform};

/// Depths at or below this are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |reason: &str| Err(GeometryError::InvalidIntrinsics(reason.to_string()));
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return bad("focal lengths must be positive and finite");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx outside [0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy outside [0, height)");
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// `[0, width) x [0, height)`, with a 1e-6 px allowance at the lower
    /// edges for round-off.
    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= -1e-6 && v >= -1e-6 && u < self.width as f64 && v < self.height as f64
    }

    #[inline]
    pub fn to_normalized(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    #[inline]
    pub fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.fx * x + self.cx, self.fy * y + self.cy)
    }

    /// Largest normalized radius reached by the image corners.
    pub fn max_normalized_radius(&self) -> f64 {
        let (w, h) = (self.width as f64, self.height as f64);
        [(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
            .iter()
            .map(|&(u, v)| {
                let (x, y) = self.to_normalized(u, v);
                (x * x + y * y).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Intrinsics, lens distortion and the rig-frame → camera-frame pose.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub distortion: DistortionCoeffs,
    pub pose: RigidTransform,
}

impl CameraModel {
    /// Margin applied to the sensor's corner radius when validating the
    /// distortion's injective domain.
    const DOMAIN_MARGIN: f64 = 1.2;

    pub fn new(
        intrinsics: CameraIntrinsics,
        distortion: DistortionCoeffs,
        pose: RigidTransform,
    ) -> Result<Self, GeometryError> {
        let cam = Self {
            intrinsics,
            distortion,
            pose,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn pinhole(intrinsics: CameraIntrinsics, pose: RigidTransform) -> Self {
        Self {
            intrinsics,
            distortion: DistortionCoeffs::ZERO,
            pose,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        self.pose.validate()?;
        self.distortion
            .check_injective(Self::DOMAIN_MARGIN * self.intrinsics.max_normalized_radius())
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    /// Camera center in the rig frame.
    pub fn center(&self) -> Point3<f64> {
        Point3::from(-(self.pose.rotation.transpose() * self.pose.translation))
    }

    /// Projects a camera-frame point through distortion and intrinsics
    /// without bounds checks; `None` only when the point is behind the camera.
    #[inline]
    pub fn project_camera_frame(&self, pc: &Vector3<f64>) -> Option<Point2<f64>> {
        if !(pc.z > MIN_DEPTH) {
            return None;
        }
        let (xd, yd) = self.distortion.distort(pc.x / pc.z, pc.y / pc.z);
        let (u, v) = self.intrinsics.to_pixel(xd, yd);
        Some(Point2::new(u, v))
    }

    /// Like [`project_point`](Self::project_point) without the image-bounds test.
    #[inline]
    pub fn project_unbounded(&self, p: &Point3<f64>) -> Option<Point2<f64>> {
        self.project_camera_frame(&self.pose.apply(p).coords)
    }

    /// Projects a rig-frame point; `None` when behind the camera or outside
    /// `[0, width) x [0, height)`.
    #[inline]
    pub fn project_point(&self, p: &Point3<f64>) -> Option<Point2<f64>> {
        self.project_unbounded(p)
            .filter(|px| self.intrinsics.contains(px.x, px.y))
    }

    /// Undistorted normalized coordinates of a pixel.
    pub fn normalized_ray(&self, pixel: &Point2<f64>) -> Result<(f64, f64), GeometryError> {
        let (xd, yd) = self.intrinsics.to_normalized(pixel.x, pixel.y);
        self.distortion.undistort(xd, yd)
    }

    /// Back-projects a pixel at z-depth `depth` into the rig frame.
    pub fn unproject_pixel(
        &self,
        pixel: &Point2<f64>,
        depth: f64,
    ) -> Result<Point3<f64>, GeometryError> {
        if !(depth > 0.0) || !depth.is_finite() {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        let (x, y) = self.normalized_ray(pixel)?;
        let pc = Point3::new(x * depth, y * depth, depth);
        Ok(self.pose.inverse().apply(&pc))
    }
}

/// The three fixed-or-floating cameras of the phone rig. The rig frame is the
/// ultrawide camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rig {
    pub uw: CameraModel,
    pub tof: CameraModel,
    pub fm_initial: CameraModel,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn simple(dist: DistortionCoeffs) -> CameraModel {
        CameraModel::new(
            CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap(),
            dist,
            RigidTransform::identity(),
        )
        .unwrap()
    }

    #[test]
    fn projection_examples() {
        let cam = simple(DistortionCoeffs::ZERO);
        let p = cam.project_point(&Point3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((p.x, p.y), (320.0, 240.0));
        let p = cam.project_point(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(p.x, 370.0, epsilon = 1e-12);
        assert_eq!(p.y, 240.0);
        assert!(cam.project_point(&Point3::new(0.0, 0.0, -1.0)).is_none());
        assert!(cam.project_point(&Point3::new(5.0, 0.0, 1.0)).is_none());

        let cam = simple(DistortionCoeffs::radial(0.1, 0.0, 0.0));
        let p = cam.project_point(&Point3::new(0.1, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(p.x, 370.05, epsilon = 1e-9);
    }

    #[test]
    fn unprojection_examples() {
        let cam = simple(DistortionCoeffs::ZERO);
        let p = cam
            .unproject_pixel(&Point2::new(320.0, 240.0), 2.0)
            .unwrap();
        assert_eq!(p, Point3::new(0.0, 0.0, 2.0));
        let p = cam
            .unproject_pixel(&Point2::new(370.0, 240.0), 1.0)
            .unwrap();
        assert_abs_diff_eq!(p.coords, Vector3::new(0.1, 0.0, 1.0), epsilon = 1e-12);
        assert!(matches!(
            cam.unproject_pixel(&Point2::new(1.0, 1.0), 0.0),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(cam.unproject_pixel(&Point2::new(1.0, 1.0), -2.0).is_err());
    }

    #[test]
    fn center_of_translated_camera() {
        let mut cam = simple(DistortionCoeffs::ZERO);
        cam.pose = RigidTransform::from_axis_angle(
            Vector3::new(0.0, 0.3, 0.0),
            Vector3::new(0.1, 0.2, 0.3),
        );
        let c = cam.center();
        assert_abs_diff_eq!(cam.pose.apply(&c).coords, Vector3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 1.0, -0.1, 4, 4).is_err());
    }

    proptest! {
        #[test]
        fn project_unproject_roundtrip(
            u in 0.0f64..639.0, v in 0.0f64..479.0, depth in 0.3f64..7.0,
            k1 in -0.1f64..0.1, k2 in -0.02f64..0.02, p1 in -1e-3f64..1e-3,
            rx in -0.2f64..0.2, ry in -0.2f64..0.2, tx in -0.1f64..0.1,
        ) {
            let cam = CameraModel::new(
                CameraIntrinsics::new(520.0, 515.0, 318.0, 242.0, 640, 480).unwrap(),
                DistortionCoeffs { k1, k2, k3: 0.0, p1, p2: 0.0 },
                RigidTransform::from_axis_angle(Vector3::new(rx, ry, 0.05), Vector3::new(tx, 0.01, -0.02)),
            ).unwrap();
            let p = cam.unproject_pixel(&Point2::new(u, v), depth).unwrap();
            let back = cam.project_unbounded(&p).unwrap();
            prop_assert!((back.x - u).abs() < 1e-6 && (back.y - v).abs() < 1e-6);
            prop_assert!((cam.pose.apply(&p).z - depth).abs() < 1e-9);
        }
    }
}
