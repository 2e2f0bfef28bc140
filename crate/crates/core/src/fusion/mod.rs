//! Stereo/ToF fusion on the rectified ultrawide/main pair.
//!
//! A ZNCC cost volume over a disparity band is built on the rectified
//! images; every valid ToF sample is projected into both rectified views and
//! splatted into the volume with trilinear weights scaled by `τ·ω`. Semi-
//! global aggregation and winner-take-all selection give a disparity map,
//! which is converted to z-depth in the raw ultrawide view.

mod disparity;
mod inject;
mod sgm;
mod volume;

pub use disparity::{
    argmax, disparity_to_depth, left_right_check, median_filter, parabola_offset,
    require_target_support, select_disparity, select_disparity_with, upsample_disparity,
    DisparityMap,
};
pub use inject::{inject_samples, splat_weights, InjectionSample};
pub use sgm::aggregate_semiglobal;
pub use volume::{zncc_volume, zncc_volume_masked, CostVolume};

use std::time::Instant;

use nalgebra::{Point2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{rectify_pair, CameraModel, GeometryError, RectifiedPair, Rig};
use crate::image::{gray_to_unit, Image};
use crate::tof::ToFDepthMap;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("image size mismatch: expected {expected:?}, found {found:?}")]
    SizeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matching window {window} does not fit a {width}x{height} image (must be odd and no larger)")]
    WindowTooLarge {
        window: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid fusion parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionParams {
    /// Injection strength τ; 0 gives pure stereo.
    pub tau: f64,
    /// Images are area-downsampled by this factor (1, 2 or 4) before matching.
    pub scale: usize,
    /// Largest disparity searched, in full-resolution pixels.
    pub d_max: usize,
    /// ZNCC window side (odd).
    pub window: usize,
    pub p1: f32,
    pub p2: f32,
    /// Window variance (unit intensities) below which ZNCC scores 0.
    pub variance_floor: f64,
    pub sgm: bool,
    pub lr_check: bool,
    pub median: bool,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            scale: 1,
            d_max: 128,
            window: 7,
            p1: 0.03,
            p2: 0.4,
            variance_floor: 1e-4,
            sgm: true,
            lr_check: false,
            median: true,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::InvalidParams(m.into()));
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return bad("tau must be finite and >= 0");
        }
        if !matches!(self.scale, 1 | 2 | 4) {
            return bad("scale must be 1, 2 or 4");
        }
        if self.d_max < 1 {
            return bad("d_max must be >= 1");
        }
        if self.window.is_multiple_of(2) {
            return bad("window must be odd");
        }
        if !(self.p1 >= 0.0 && self.p2 >= 0.0) {
            return bad("SGM penalties must be >= 0");
        }
        Ok(())
    }

    /// Disparity band at the working scale.
    pub fn scaled_d_max(&self) -> usize {
        self.d_max.div_ceil(self.scale)
    }
}

/// Full-resolution pixel coordinate expressed on a grid downsampled by
/// `scale`, through pixel centers.
#[inline]
pub fn to_scaled(x: f64, scale: usize) -> f64 {
    (x + 0.5) / scale as f64 - 0.5
}

/// Resamples a raw image into a distortion-free rectified view. The mask
/// marks rectified pixels whose source lies inside the raw image; others are
/// filled with the nearest border value.
pub fn rectify_image(
    raw: &Image<f32>,
    camera: &CameraModel,
    rectified: &CameraModel,
) -> (Image<f32>, Image<bool>) {
    let (w, h) = (rectified.width(), rectified.height());
    let (max_u, max_v) = ((raw.width() - 1) as f64, (raw.height() - 1) as f64);
    let rot = camera.pose.rotation * rectified.pose.rotation.transpose();
    let cells: Vec<(f32, bool)> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (x, y) = rectified
                .intrinsics
                .to_normalized((i % w) as f64, (i / w) as f64);
            let Some(p) = camera.project_camera_frame(&(rot * Vector3::new(x, y, 1.0))) else {
                return (0.0, false);
            };
            let inside = (0.0..=max_u).contains(&p.x) && (0.0..=max_v).contains(&p.y);
            let value = raw
                .sample_bilinear(p.x.clamp(0.0, max_u), p.y.clamp(0.0, max_v))
                .unwrap_or(0.0);
            (value as f32, inside)
        })
        .collect();
    (
        Image::from_fn(w, h, |u, v| cells[v * w + u].0),
        Image::from_fn(w, h, |u, v| cells[v * w + u].1),
    )
}

/// A block is valid when all of its `factor × factor` pixels are.
fn downsample_mask(mask: &Image<bool>, factor: usize) -> Image<bool> {
    if factor == 1 {
        return mask.clone();
    }
    Image::from_fn(mask.width() / factor, mask.height() / factor, |u, v| {
        (0..factor).all(|j| (0..factor).all(|i| mask.get(u * factor + i, v * factor + j)))
    })
}

/// Projects every valid ToF pixel into both rectified views, in row-major
/// ToF order, with coordinates on the working grid.
pub fn injection_samples(
    tof: &ToFDepthMap,
    tof_camera: &CameraModel,
    rect: &RectifiedPair,
    scale: usize,
) -> Vec<InjectionSample> {
    let (ref_cam, tgt_cam) = (rect.ref_camera(), rect.tgt_camera());
    let rows: Vec<Vec<InjectionSample>> = (0..tof.height())
        .into_par_iter()
        .map(|v| {
            let mut out = Vec::new();
            for u in 0..tof.width() {
                if !tof.is_valid(u, v) {
                    continue;
                }
                let Ok(p) = tof_camera
                    .unproject_pixel(&Point2::new(u as f64, v as f64), tof.depth.get(u, v))
                else {
                    continue;
                };
                let (Some(a), Some(b)) =
                    (ref_cam.project_unbounded(&p), tgt_cam.project_unbounded(&p))
                else {
                    continue;
                };
                out.push(InjectionSample {
                    u: to_scaled(a.x, scale),
                    v: to_scaled(a.y, scale),
                    u_tgt: to_scaled(b.x, scale),
                    weight: tof.confidence.get(u, v),
                });
            }
            out
        })
        .collect();
    rows.into_iter().flatten().collect()
}

/// Wall-clock time of each fusion stage, in milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionTiming {
    pub rectify_ms: f64,
    pub volume_ms: f64,
    pub inject_ms: f64,
    pub aggregate_ms: f64,
    pub select_ms: f64,
    pub total_ms: f64,
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// z-depth in the raw ultrawide view; 0 marks invalid pixels.
    pub depth: Image<f64>,
    /// Full-resolution disparity in the rectified reference view.
    pub disparity: DisparityMap,
    pub rectified: RectifiedPair,
    /// Volume cells that received ToF mass.
    pub injected_cells: usize,
    pub timing: FusionTiming,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Disparity at a continuous rectified position: bilinear when the four
/// neighbors are valid and within 1 px of each other, otherwise the nearest
/// valid neighbor.
fn sample_disparity(disp: &DisparityMap, x: f64, y: f64) -> Option<f64> {
    let (w, h) = (disp.width(), disp.height());
    if !(x > -0.5 && y > -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5) {
        return None;
    }
    let (xc, yc) = (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64));
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let n = [
        disp.get(x0, y0),
        disp.get(x1, y0),
        disp.get(x0, y1),
        disp.get(x1, y1),
    ];
    if let [Some(a), Some(b), Some(c), Some(d)] = n {
        let lo = a.min(b).min(c).min(d);
        let hi = a.max(b).max(c).max(d);
        if hi - lo <= 1.0 {
            let top = a as f64 + (b - a) as f64 * fx;
            let bottom = c as f64 + (d - c) as f64 * fx;
            return Some(top + (bottom - top) * fy);
        }
    }
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    corners
        .iter()
        .zip(n)
        .filter_map(|(&(cx, cy), d)| d.map(|d| ((fx - cx).powi(2) + (fy - cy).powi(2), d)))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d as f64)
}

/// Carries rectified-reference disparity into the raw reference camera as
/// z-depth.
pub fn depth_in_reference_view(
    disp: &DisparityMap,
    rect: &RectifiedPair,
    reference: &CameraModel,
) -> Image<f64> {
    let (w, h) = (reference.width(), reference.height());
    let rect_cam = rect.ref_camera();
    let rot = rect_cam.pose.rotation * reference.pose.rotation.transpose();
    let fb = rect.focal_baseline();
    let values: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let Ok((x, y)) = reference.normalized_ray(&Point2::new((i % w) as f64, (i / w) as f64))
            else {
                return 0.0;
            };
            let r = rot * Vector3::new(x, y, 1.0);
            if !(r.z > 1e-9) {
                return 0.0;
            }
            let (pu, pv) = rect_cam.intrinsics.to_pixel(r.x / r.z, r.y / r.z);
            match sample_disparity(disp, pu, pv) {
                Some(d) if d > 1e-6 => fb / d / r.z,
                _ => 0.0,
            }
        })
        .collect();
    Image::from_vec(w, h, values)
}

/// Winners below one pixel sit on the edge of the band and put depth beyond
/// any ToF range; they are dropped.
const MIN_DISPARITY: f32 = 1.0;

/// Rectifies, matches, injects ToF, aggregates and selects disparity, then
/// returns depth in the raw ultrawide view.
pub fn fuse_snapshot(
    uw_image: &Image<u8>,
    fm_image: &Image<u8>,
    tof: &ToFDepthMap,
    rig: &Rig,
    fm: &CameraModel,
    params: &FusionParams,
) -> Result<FusionOutput, FusionError> {
    params.validate()?;
    let expected = (rig.uw.width(), rig.uw.height());
    if uw_image.dims() != expected {
        return Err(FusionError::SizeMismatch {
            expected,
            found: uw_image.dims(),
        });
    }
    let expected_fm = (fm.width(), fm.height());
    if fm_image.dims() != expected_fm {
        return Err(FusionError::SizeMismatch {
            expected: expected_fm,
            found: fm_image.dims(),
        });
    }
    let start = Instant::now();
    let mut timing = FusionTiming::default();

    let t = Instant::now();
    let rect = rectify_pair(&rig.uw, fm)?.covering(&rig.uw)?;
    let (ref_img, ref_mask) = rectify_image(&gray_to_unit(uw_image), &rig.uw, &rect.ref_camera());
    let (tgt_img, tgt_mask) = rectify_image(&gray_to_unit(fm_image), fm, &rect.tgt_camera());
    timing.rectify_ms = ms(t);

    let s = params.scale;
    let t = Instant::now();
    let (ref_s, tgt_s) = (ref_img.downsample_area(s), tgt_img.downsample_area(s));
    let (ref_mask_s, tgt_mask_s) = (downsample_mask(&ref_mask, s), downsample_mask(&tgt_mask, s));
    let mut volume = zncc_volume_masked(
        &ref_s,
        &tgt_s,
        Some((&ref_mask_s, &tgt_mask_s)),
        params.scaled_d_max(),
        params.window,
        params.variance_floor,
    )?;
    timing.volume_ms = ms(t);

    let t = Instant::now();
    let samples = injection_samples(tof, &rig.tof, &rect, s);
    let injected_cells = inject_samples(&mut volume, &samples, params.tau);
    timing.inject_ms = ms(t);

    let t = Instant::now();
    let aggregated = params
        .sgm
        .then(|| aggregate_semiglobal(&volume, params.p1, params.p2));
    timing.aggregate_ms = ms(t);

    let t = Instant::now();
    let selection = aggregated.as_ref().unwrap_or(&volume);
    let mut disp = select_disparity_with(selection, &volume);
    if params.lr_check {
        left_right_check(&mut disp, selection, 1.0);
    }
    require_target_support(&mut disp, &tgt_mask_s);
    for (valid, &d) in disp
        .valid
        .as_mut_slice()
        .iter_mut()
        .zip(disp.disparity.as_slice())
    {
        *valid &= d >= MIN_DISPARITY;
    }
    drop(aggregated);
    drop(volume);
    if params.median {
        disp = median_filter(&disp);
    }
    let mut disp = upsample_disparity(&disp, s, ref_img.width(), ref_img.height());
    for v in 0..disp.height() {
        for u in 0..disp.width() {
            if !ref_mask.get(u, v) {
                disp.valid.set(u, v, false);
            }
        }
    }
    let depth = depth_in_reference_view(&disp, &rect, &rig.uw);
    timing.select_ms = ms(t);
    timing.total_ms = ms(start);

    Ok(FusionOutput {
        depth,
        disparity: disp,
        rectified: rect,
        injected_cells,
        timing,
    })
}

/// Depth at a continuous ToF pixel: bilinear when the four neighbors are
/// valid, nearest valid neighbor otherwise.
fn sample_tof(depth: &Image<f64>, x: f64, y: f64) -> Option<f64> {
    let (w, h) = depth.dims();
    if !(x > -0.5 && y > -0.5 && x < w as f64 - 0.5 && y < h as f64 - 0.5) {
        return None;
    }
    let (xc, yc) = (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64));
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let n = [
        depth.get(x0, y0),
        depth.get(x1, y0),
        depth.get(x0, y1),
        depth.get(x1, y1),
    ];
    if n.iter().all(|&d| d > 0.0) {
        let top = n[0] + (n[1] - n[0]) * fx;
        let bottom = n[2] + (n[3] - n[2]) * fx;
        return Some(top + (bottom - top) * fy);
    }
    let corners = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)];
    corners
        .iter()
        .zip(n)
        .filter(|(_, d)| *d > 0.0)
        .map(|(&(cx, cy), d)| ((fx - cx).powi(2) + (fy - cy).powi(2), d))
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map(|(_, d)| d)
}

/// Bilinearly upsampled ToF depth seen from `view`: each view ray is
/// intersected with the interpolated ToF surface by fixed-point iteration.
/// Returns z-depth in `view`, 0 where the ray leaves the ToF footprint.
pub fn tof_in_view(tof: &ToFDepthMap, tof_camera: &CameraModel, view: &CameraModel) -> Image<f64> {
    let mut valid: Vec<f64> = tof
        .depth
        .as_slice()
        .iter()
        .copied()
        .filter(|&d| d > 0.0)
        .collect();
    if valid.is_empty() {
        return Image::new(view.width(), view.height(), 0.0);
    }
    let mid = valid.len() / 2;
    let start = *valid.select_nth_unstable_by(mid, f64::total_cmp).1;
    let center = view.center();
    let (w, h) = (view.width(), view.height());
    let values: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let Ok((x, y)) = view.normalized_ray(&Point2::new((i % w) as f64, (i / w) as f64))
            else {
                return 0.0;
            };
            // rig-frame ray with unit z-depth in the view; ToF z is affine in s
            let dir = view.pose.rotation.transpose() * Vector3::new(x, y, 1.0);
            let r = tof_camera.pose.rotation;
            let a = (r * center.coords + tof_camera.pose.translation).z;
            let b = (r * dir).z;
            if !(b > 1e-9) {
                return 0.0;
            }
            let mut s = start;
            for _ in 0..20 {
                let p = center + dir * s;
                let Some(q) = tof_camera.project_unbounded(&p) else {
                    return 0.0;
                };
                let Some(d) = sample_tof(&tof.depth, q.x, q.y) else {
                    return 0.0;
                };
                let next = (d - a) / b;
                if !(next > 0.0) {
                    return 0.0;
                }
                let done = (next - s).abs() < 1e-7;
                s = next;
                if done {
                    break;
                }
            }
            s
        })
        .collect();
    Image::from_vec(w, h, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, DistortionCoeffs, RigidTransform};

    #[test]
    fn params_validation() {
        assert!(FusionParams::default().validate().is_ok());
        for p in [
            FusionParams {
                tau: -1.0,
                ..Default::default()
            },
            FusionParams {
                scale: 3,
                ..Default::default()
            },
            FusionParams {
                d_max: 0,
                ..Default::default()
            },
            FusionParams {
                window: 6,
                ..Default::default()
            },
        ] {
            assert!(p.validate().is_err());
        }
        assert_eq!(
            FusionParams {
                scale: 4,
                d_max: 130,
                ..Default::default()
            }
            .scaled_d_max(),
            33
        );
    }

    #[test]
    fn scaled_coordinates_follow_pixel_centers() {
        assert_eq!(to_scaled(1.5, 4), 0.0);
        assert_eq!(to_scaled(5.5, 4), 1.0);
        assert_eq!(to_scaled(7.0, 1), 7.0);
    }

    #[test]
    fn identity_rectification_keeps_image() {
        let k = CameraIntrinsics::new(100.0, 100.0, 15.5, 11.5, 32, 24).unwrap();
        let cam = CameraModel::new(k, DistortionCoeffs::ZERO, RigidTransform::identity()).unwrap();
        let img = Image::from_fn(32, 24, |u, v| (u * 3 + v) as f32);
        let (out, mask) = rectify_image(&img, &cam, &cam);
        for v in 0..24 {
            for u in 0..32 {
                assert!((out.get(u, v) - img.get(u, v)).abs() < 1e-4);
                assert!(mask.get(u, v));
            }
        }
    }
}
