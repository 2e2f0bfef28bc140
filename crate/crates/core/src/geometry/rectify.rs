use nalgebra::{Matrix3, Point2, Point3, Vector3};

use super::{CameraIntrinsics, CameraModel, GeometryError, RigidTransform};

/// Rectification of a reference/target pair onto a common image plane.
///
/// Both rectified cameras share `intrinsics` and `rotation`; only their
/// centers differ, by `baseline` along the rectified x-axis. Disparity is
/// `u_ref - u_tgt >= 0` for points in front of both cameras.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RectifiedPair {
    /// Undistorted reference pixel → rectified reference pixel.
    pub homography_ref: Matrix3<f64>,
    /// Undistorted target pixel → rectified target pixel.
    pub homography_tgt: Matrix3<f64>,
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    /// Whether the reference camera sits on the left in the original
    /// cameras' orientation. When false the rectified views are rotated by
    /// 180° so that disparity stays non-negative.
    pub ref_is_left: bool,
    /// Rig frame → rectified frame rotation.
    pub rotation: Matrix3<f64>,
    pub ref_center: Point3<f64>,
    pub tgt_center: Point3<f64>,
}

impl RectifiedPair {
    fn camera(&self, center: &Point3<f64>) -> CameraModel {
        CameraModel::pinhole(
            self.intrinsics,
            RigidTransform {
                rotation: self.rotation,
                translation: -(self.rotation * center.coords),
            },
        )
    }

    /// Distortion-free camera of the rectified reference view.
    pub fn ref_camera(&self) -> CameraModel {
        self.camera(&self.ref_center)
    }

    pub fn tgt_camera(&self) -> CameraModel {
        self.camera(&self.tgt_center)
    }

    /// Moves the shared principal point and resizes the rectified images so
    /// that every pixel of `camera` (one of the pair) lands inside them.
    /// Disparities are unchanged.
    pub fn covering(&self, camera: &CameraModel) -> Result<Self, GeometryError> {
        let (w, h) = (camera.width(), camera.height());
        let rot = self.rotation * camera.pose.rotation.transpose();
        let (mut lo, mut hi) = (
            Point2::new(f64::INFINITY, f64::INFINITY),
            Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        );
        let border = (0..w)
            .flat_map(|u| [(u, 0), (u, h - 1)])
            .chain((0..h).flat_map(|v| [(0, v), (w - 1, v)]));
        for (u, v) in border {
            let (x, y) = camera.normalized_ray(&Point2::new(u as f64, v as f64))?;
            let r = rot * Vector3::new(x, y, 1.0);
            if !(r.z > 1e-9) {
                return Err(GeometryError::InvalidIntrinsics(
                    "camera view is not in front of the rectified plane".into(),
                ));
            }
            let (pu, pv) = self.intrinsics.to_pixel(r.x / r.z, r.y / r.z);
            lo = Point2::new(lo.x.min(pu), lo.y.min(pv));
            hi = Point2::new(hi.x.max(pu), hi.y.max(pv));
        }
        let (sx, sy) = (-lo.x.floor(), -lo.y.floor());
        let mut out = *self;
        out.intrinsics.cx += sx;
        out.intrinsics.cy += sy;
        out.intrinsics.width = (hi.x + sx).ceil() as u32 + 1;
        out.intrinsics.height = (hi.y + sy).ceil() as u32 + 1;
        let shift = Matrix3::new(1.0, 0.0, sx, 0.0, 1.0, sy, 0.0, 0.0, 1.0);
        out.homography_ref = shift * self.homography_ref;
        out.homography_tgt = shift * self.homography_tgt;
        Ok(out)
    }

    /// `f · B`, the numerator of the disparity–depth relation.
    pub fn focal_baseline(&self) -> f64 {
        self.intrinsics.fx * self.baseline
    }
}

fn homography(k_rect: &Matrix3<f64>, rect_rot: &Matrix3<f64>, cam: &CameraModel) -> Matrix3<f64> {
    k_rect * rect_rot * cam.pose.rotation.transpose() * cam.intrinsics.inverse_matrix()
}

fn apply_h(h: &Matrix3<f64>, u: f64, v: f64) -> Point2<f64> {
    let p = h * Vector3::new(u, v, 1.0);
    Point2::new(p.x / p.z, p.y / p.z)
}

/// Builds a common rotation whose x-axis lies along the baseline and whose
/// z-axis is the mean optical axis made orthogonal to it.
pub fn rectify_pair(
    reference: &CameraModel,
    target: &CameraModel,
) -> Result<RectifiedPair, GeometryError> {
    let c_ref = reference.center();
    let c_tgt = target.center();
    let b = c_tgt - c_ref;
    let baseline = b.norm();
    if !(baseline > 1e-12) {
        return Err(GeometryError::CoincidentCenters);
    }
    let e1 = b / baseline;
    let axis =
        |cam: &CameraModel, row: usize| -> Vector3<f64> { cam.pose.rotation.row(row).transpose() };
    let mean_z = (axis(reference, 2) + axis(target, 2)) * 0.5;
    let z = mean_z - e1 * mean_z.dot(&e1);
    if !(z.norm() > 1e-9) {
        return Err(GeometryError::CoincidentCenters);
    }
    let e3 = z.normalize();
    let e2 = e3.cross(&e1);
    let rotation = Matrix3::from_rows(&[e1.transpose(), e2.transpose(), e3.transpose()]);
    let ref_is_left = e1.dot(&axis(reference, 0)) > 0.0;

    let ki = &reference.intrinsics;
    let kt = &target.intrinsics;
    let mut intrinsics = CameraIntrinsics {
        fx: 0.5 * (ki.fx + kt.fx),
        fy: 0.5 * (ki.fy + kt.fy),
        cx: 0.5 * (ki.cx + kt.cx),
        cy: 0.5 * (ki.cy + kt.cy),
        width: ki.width,
        height: ki.height,
    };
    // shift the shared principal point so the original principal points land,
    // on average, where they were
    let mut shift = Vector3::<f64>::zeros();
    for cam in [reference, target] {
        let h = homography(&intrinsics.matrix(), &rotation, cam);
        let m = apply_h(&h, cam.intrinsics.cx, cam.intrinsics.cy);
        shift.x += 0.5 * (m.x - cam.intrinsics.cx);
        shift.y += 0.5 * (m.y - cam.intrinsics.cy);
    }
    intrinsics.cx -= shift.x;
    intrinsics.cy -= shift.y;
    let k = intrinsics.matrix();
    Ok(RectifiedPair {
        homography_ref: homography(&k, &rotation, reference),
        homography_tgt: homography(&k, &rotation, target),
        intrinsics,
        baseline,
        ref_is_left,
        rotation,
        ref_center: c_ref,
        tgt_center: c_tgt,
    })
}
