//! Camera models, lens distortion, rigid transforms, cross-camera depth
//! reprojection and stereo rectification.

mod camera;
mod distortion;
mod rectify;
mod transform;

pub use camera::{CameraIntrinsics, CameraModel, Rig, MIN_DEPTH};
pub use distortion::DistortionCoeffs;
pub use rectify::{rectify_pair, RectifiedPair};
pub use transform::RigidTransform;

use nalgebra::{Point2, Point3};
use rayon::prelude::*;
use thiserror::Error;

use crate::image::Image;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("undistortion did not converge at normalized ({x}, {y})")]
    UndistortDiverged { x: f64, y: f64 },
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("distortion is not injective on the sensor domain (fails at radius {radius})")]
    NonInjectiveDistortion { radius: f64 },
    #[error("not a rotation: |RᵀR - I| = {orthogonality_error}, det = {determinant}")]
    InvalidRotation {
        orthogonality_error: f64,
        determinant: f64,
    },
    #[error("camera centers coincide; cannot rectify")]
    CoincidentCenters,
    #[error("depth map is {found:?} but the camera is {expected:?}")]
    ResolutionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// One depth sample carried from a source camera into a target camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReprojectedPoint {
    /// Source pixel `(u, v)`.
    pub source: (usize, usize),
    /// Subpixel coordinate in the target image.
    pub target: Point2<f64>,
    /// The 3D point in the target camera frame.
    pub point_target: Point3<f64>,
    /// The same point in the rig frame.
    pub point_rig: Point3<f64>,
    pub confidence: f64,
}

/// Carries every valid (positive) depth sample of `depth` into `to`.
///
/// Samples landing behind or outside `to` are dropped; there is no occlusion
/// reasoning. Output is ordered by source pixel index.
pub fn reproject_depth(
    depth: &Image<f64>,
    confidence: &Image<f64>,
    from: &CameraModel,
    to: &CameraModel,
) -> Result<Vec<ReprojectedPoint>, GeometryError> {
    let expected = (from.width(), from.height());
    if depth.dims() != expected || confidence.dims() != expected {
        let found = if depth.dims() != expected {
            depth.dims()
        } else {
            confidence.dims()
        };
        return Err(GeometryError::ResolutionMismatch { expected, found });
    }
    let rows: Vec<Vec<ReprojectedPoint>> = (0..depth.height())
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for u in 0..depth.width() {
                let d = depth.get(u, v);
                if !(d > 0.0) || !d.is_finite() {
                    continue;
                }
                let Ok(p_rig) = from.unproject_pixel(&Point2::new(u as f64, v as f64), d) else {
                    continue;
                };
                let pt = to.pose.apply(&p_rig);
                let Some(target) = to.project_camera_frame(&pt.coords) else {
                    continue;
                };
                if !to.intrinsics.contains(target.x, target.y) {
                    continue;
                }
                out.push(ReprojectedPoint {
                    source: (u, v),
                    target,
                    point_target: pt,
                    point_rig: p_rig,
                    confidence: confidence.get(u, v),
                });
            }
            out
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Converts radial range to z-depth for sensors that report range.
pub fn range_to_z_depth(
    range: &Image<f64>,
    camera: &CameraModel,
) -> Result<Image<f64>, GeometryError> {
    let expected = (camera.width(), camera.height());
    if range.dims() != expected {
        return Err(GeometryError::ResolutionMismatch {
            expected,
            found: range.dims(),
        });
    }
    let mut out = range.clone();
    for v in 0..range.height() {
        for u in 0..range.width() {
            let r = range.get(u, v);
            if r > 0.0 {
                let (x, y) = camera.normalized_ray(&Point2::new(u as f64, v as f64))?;
                out.set(u, v, r / (1.0 + x * x + y * y).sqrt());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn cam(dist: DistortionCoeffs, pose: RigidTransform) -> CameraModel {
        CameraModel::new(
            CameraIntrinsics::new(100.0, 100.0, 31.5, 23.5, 64, 48).unwrap(),
            dist,
            pose,
        )
        .unwrap()
    }

    #[test]
    fn identical_models_map_to_pixel_centers() {
        let c = cam(
            DistortionCoeffs::radial(0.05, 0.0, 0.0),
            RigidTransform::identity(),
        );
        let depth = Image::from_fn(64, 48, |u, _| 1.0 + u as f64 * 0.01);
        let conf = Image::new(64, 48, 0.5);
        let pts = reproject_depth(&depth, &conf, &c, &c).unwrap();
        assert_eq!(pts.len(), 64 * 48);
        for p in &pts {
            assert!((p.target.x - p.source.0 as f64).abs() < 1e-9);
            assert!((p.target.y - p.source.1 as f64).abs() < 1e-9);
            assert_eq!(p.confidence, 0.5);
        }
    }

    #[test]
    fn zero_depth_is_excluded_and_mismatch_rejected() {
        let c = cam(DistortionCoeffs::ZERO, RigidTransform::identity());
        let mut depth = Image::new(64, 48, 2.0);
        depth.set(3, 4, 0.0);
        let conf = Image::new(64, 48, 1.0);
        let pts = reproject_depth(&depth, &conf, &c, &c).unwrap();
        assert_eq!(pts.len(), 64 * 48 - 1);
        assert!(pts.iter().all(|p| p.source != (3, 4)));
        let small = Image::new(10, 10, 1.0);
        assert!(matches!(
            reproject_depth(&small, &small, &c, &c),
            Err(GeometryError::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn translated_target_matches_direct_projection() {
        let from = cam(
            DistortionCoeffs::radial(-0.05, 0.01, 0.0),
            RigidTransform::identity(),
        );
        let to = cam(
            DistortionCoeffs::radial(0.03, 0.0, 0.0),
            RigidTransform::from_axis_angle(
                Vector3::new(0.0, 0.02, 0.0),
                Vector3::new(-0.05, 0.0, 0.0),
            ),
        );
        let depth = Image::new(64, 48, 1.5);
        let conf = Image::new(64, 48, 1.0);
        for p in reproject_depth(&depth, &conf, &from, &to).unwrap() {
            let direct = to.project_point(&p.point_rig).unwrap();
            assert!((direct - p.target).norm() < 1e-9);
            assert!((to.pose.apply(&p.point_rig) - p.point_target).norm() < 1e-12);
        }
    }

    #[test]
    fn range_conversion_divides_by_ray_norm() {
        let c = cam(DistortionCoeffs::ZERO, RigidTransform::identity());
        let range = Image::new(64, 48, 2.0);
        let z = range_to_z_depth(&range, &c).unwrap();
        assert!((z.get(31, 23) - 2.0 / (1.0f64 + 0.005f64.powi(2) * 2.0).sqrt()).abs() < 1e-12);
        let p = c
            .unproject_pixel(&Point2::new(0.0, 0.0), z.get(0, 0))
            .unwrap();
        assert!((p.coords.norm() - 2.0).abs() < 1e-12);
    }
}
