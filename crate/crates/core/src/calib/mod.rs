//! Per-snapshot calibration of the floating main camera.
//!
//! ToF depth anchors 3D points in the rig frame; dense flow from the
//! ultrawide to the main image gives each point a main-camera pixel. A
//! distortion-free RANSAC hypothesis seeds a robust Levenberg–Marquardt fit
//! of intrinsics, distortion and pose. Scale comes from the metric ToF depth.

mod dlt;
mod lm;
mod ransac;

pub use dlt::{decompose_projection, dlt6, rq3};
pub use lm::{
    apply_update, classify, huber, lm_refine, residual_and_jacobian, LmParams, NUM_PARAMS,
};
pub use ransac::{ransac_pnp, required_iterations, RansacParams, MIN_SAMPLE};

use nalgebra::{Point2, Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraModel, DistortionCoeffs, GeometryError, Rig, RigidTransform};
use crate::image::{gray_to_unit, Image};
use crate::matching::{dense_flow, sample_flow, FlowField, FlowParams, MatchingError};
use crate::tof::{estimate_tof_depth, RawToFFrame, ToFConfig, ToFDepthMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibError {
    #[error("too few correspondences: {found} (need at least {needed})")]
    TooFewCorrespondences { found: usize, needed: usize },
    #[error("insufficient ToF support: {found} correspondences (need at least {needed})")]
    InsufficientToFSupport { found: usize, needed: usize },
    #[error("no valid camera hypothesis found")]
    NoHypothesis,
    #[error("invalid calibration parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Matching(#[from] MatchingError),
}

/// A rig-frame 3D point anchored by ToF depth and the raw main-camera pixel
/// it was matched to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Correspondence2D3D {
    pub point: Point3<f64>,
    pub pixel: Point2<f64>,
    /// ToF confidence in `[0, 1]`.
    pub weight: f64,
}

impl Correspondence2D3D {
    pub fn is_valid(&self) -> bool {
        self.point.coords.iter().all(|x| x.is_finite())
            && self.pixel.coords.iter().all(|x| x.is_finite())
            && (0.0..=1.0).contains(&self.weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub model: CameraModel,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub total_count: usize,
    /// RMS reprojection error over inliers (px).
    pub rms_px: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Final weighted Huber cost.
    pub cost: f64,
}

/// Relation between raw ultrawide pixels and the image the flow is defined
/// on.
#[derive(Clone, Copy, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum PreRectification {
    /// Flow is defined directly on raw ultrawide pixels.
    Identity,
    /// Flow is defined on a distortion-free virtual camera at the ultrawide
    /// center.
    Virtual {
        uw: CameraModel,
        camera: CameraModel,
    },
}

impl PreRectification {
    /// Virtual view at the ultrawide center that shares the stale main
    /// camera's orientation and intrinsics, so the flow to the main image is
    /// close to a pure parallax shift.
    pub fn toward(uw: &CameraModel, fm_initial: &CameraModel) -> Self {
        let rotation = fm_initial.pose.rotation;
        let camera = CameraModel {
            intrinsics: fm_initial.intrinsics,
            distortion: DistortionCoeffs::ZERO,
            pose: RigidTransform {
                rotation,
                translation: -(rotation * uw.center().coords),
            },
        };
        Self::Virtual { uw: *uw, camera }
    }

    pub fn to_virtual(&self, raw: &Point2<f64>) -> Option<Point2<f64>> {
        match self {
            Self::Identity => Some(*raw),
            Self::Virtual { uw, camera } => {
                let (x, y) = uw.normalized_ray(raw).ok()?;
                let dir = uw.pose.rotation.transpose() * Vector3::new(x, y, 1.0);
                camera.project_camera_frame(&(camera.pose.rotation * dir))
            }
        }
    }

    pub fn to_raw(&self, virt: &Point2<f64>) -> Option<Point2<f64>> {
        match self {
            Self::Identity => Some(*virt),
            Self::Virtual { uw, camera } => {
                let (x, y) = camera.intrinsics.to_normalized(virt.x, virt.y);
                let dir = camera.pose.rotation.transpose() * Vector3::new(x, y, 1.0);
                uw.project_camera_frame(&(uw.pose.rotation * dir))
            }
        }
    }

    /// Resamples a raw ultrawide image into the flow domain.
    pub fn warp(&self, raw: &Image<f32>) -> Image<f32> {
        let Self::Virtual { camera, .. } = self else {
            return raw.clone();
        };
        let (w, h) = (camera.width(), camera.height());
        let rows: Vec<Vec<f32>> = (0..h)
            .into_par_iter()
            .map(|v| {
                (0..w)
                    .map(|u| {
                        self.to_raw(&Point2::new(u as f64, v as f64))
                            .map(|p| {
                                let x = p.x.clamp(0.0, (raw.width() - 1) as f64);
                                let y = p.y.clamp(0.0, (raw.height() - 1) as f64);
                                raw.sample_bilinear(x, y).unwrap_or(0.0) as f32
                            })
                            .unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect();
        Image::from_vec(w, h, rows.into_iter().flatten().collect())
    }
}

/// Lifts every valid ToF pixel into the rig frame and looks up its main-
/// camera pixel through the flow. Entries with invalid flow or projections
/// outside either image are dropped; the ToF confidence becomes the weight.
pub fn build_correspondences(
    tof: &ToFDepthMap,
    rig: &Rig,
    flow: &FlowField,
    pre: &PreRectification,
) -> Vec<Correspondence2D3D> {
    let (w, h) = (tof.width(), tof.height());
    let fm = &rig.fm_initial.intrinsics;
    let rows: Vec<Vec<Correspondence2D3D>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for u in 0..w {
                if !tof.is_valid(u, v) {
                    continue;
                }
                let depth = tof.depth.get(u, v);
                let Ok(point) = rig
                    .tof
                    .unproject_pixel(&Point2::new(u as f64, v as f64), depth)
                else {
                    continue;
                };
                let Some(raw) = rig.uw.project_point(&point) else {
                    continue;
                };
                let Some(virt) = pre.to_virtual(&raw) else {
                    continue;
                };
                let Some(f) = sample_flow(flow, virt.x, virt.y) else {
                    continue;
                };
                let pixel = Point2::new(virt.x + f.x, virt.y + f.y);
                if !fm.contains(pixel.x, pixel.y) {
                    continue;
                }
                let c = Correspondence2D3D {
                    point,
                    pixel,
                    weight: tof.confidence.get(u, v).clamp(0.0, 1.0),
                };
                if c.is_valid() {
                    out.push(c);
                }
            }
            out
        })
        .collect();
    rows.into_iter().flatten().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibParams {
    pub ransac: RansacParams,
    pub lm: LmParams,
    pub flow: FlowParams,
    /// Below this many correspondences calibration is refused.
    pub min_correspondences: usize,
    /// Refit/reclassify rounds after the first refinement.
    pub refine_rounds: usize,
}

impl Default for CalibParams {
    fn default() -> Self {
        Self {
            ransac: RansacParams::default(),
            lm: LmParams::default(),
            flow: FlowParams::default(),
            min_correspondences: 50,
            refine_rounds: 3,
        }
    }
}

/// Images and raw ToF of one capture, plus an optional precomputed flow
/// from raw ultrawide pixels to raw main-camera pixels.
#[derive(Clone, Copy, Debug)]
pub struct SnapshotInputs<'a> {
    pub uw_image: &'a Image<u8>,
    pub fm_image: &'a Image<u8>,
    pub tof_raw: &'a RawToFFrame,
    pub flow: Option<&'a FlowField>,
}

/// Flow used for calibration: the supplied one, or dense matching from the
/// pre-rectified ultrawide image to the main image.
pub fn snapshot_flow(
    inputs: &SnapshotInputs,
    rig: &Rig,
    params: &FlowParams,
) -> Result<(FlowField, PreRectification), CalibError> {
    if let Some(flow) = inputs.flow {
        return Ok((flow.clone(), PreRectification::Identity));
    }
    let pre = PreRectification::toward(&rig.uw, &rig.fm_initial);
    let uw = pre.warp(&gray_to_unit(inputs.uw_image));
    let flow = dense_flow(&uw, &gray_to_unit(inputs.fm_image), params)?;
    Ok((flow, pre))
}

/// Fits the main camera to correspondences: RANSAC hypothesis, then
/// alternating refinement and inlier reclassification.
pub fn calibrate_from_correspondences(
    corr: &[Correspondence2D3D],
    width: u32,
    height: u32,
    params: &CalibParams,
) -> Result<CalibrationResult, CalibError> {
    if corr.len() < params.min_correspondences {
        return Err(CalibError::InsufficientToFSupport {
            found: corr.len(),
            needed: params.min_correspondences,
        });
    }
    let (hypothesis, inliers) = ransac_pnp(corr, width, height, &params.ransac)?;
    let threshold = params.ransac.threshold;
    let mut result = lm_refine(&hypothesis, corr, &inliers, &params.lm, threshold)?;
    for _ in 0..params.refine_rounds {
        let next = lm_refine(&result.model, corr, &result.inliers, &params.lm, threshold)?;
        let settled = next.inliers == result.inliers;
        result = next;
        if settled {
            break;
        }
    }
    Ok(result)
}

/// Full per-snapshot calibration: ToF decode, flow, correspondences, fit.
pub fn calibrate_online(
    inputs: &SnapshotInputs,
    rig: &Rig,
    tof_cfg: &ToFConfig,
    params: &CalibParams,
) -> Result<CalibrationResult, CalibError> {
    let tof = estimate_tof_depth(inputs.tof_raw, tof_cfg);
    if tof.valid_count() < params.min_correspondences {
        return Err(CalibError::InsufficientToFSupport {
            found: tof.valid_count(),
            needed: params.min_correspondences,
        });
    }
    let (flow, pre) = snapshot_flow(inputs, rig, &params.flow)?;
    let corr = build_correspondences(&tof, rig, &flow, &pre);
    let k = &rig.fm_initial.intrinsics;
    calibrate_from_correspondences(&corr, k.width, k.height, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_rig;

    #[test]
    fn prerectification_roundtrip() {
        let rig = default_rig();
        let pre = PreRectification::toward(&rig.uw, &rig.fm_initial);
        for &(u, v) in &[(0.0, 0.0), (480.0, 360.0), (959.0, 10.0), (123.4, 700.2)] {
            let raw = Point2::new(u, v);
            let back = pre.to_raw(&pre.to_virtual(&raw).unwrap()).unwrap();
            assert!((back - raw).norm() < 1e-6);
        }
        let id = PreRectification::Identity;
        assert_eq!(
            id.to_virtual(&Point2::new(1.5, 2.5)),
            Some(Point2::new(1.5, 2.5))
        );
    }
}
