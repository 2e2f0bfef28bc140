//! Depth and calibration error metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::CameraModel;
use crate::image::Image;

pub const DEFAULT_THRESHOLDS: [f64; 2] = [0.05, 0.2];

/// Ground-truth depths below this are skipped by the relative metrics.
const MIN_REL_DEPTH: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("image sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("no valid pixels to evaluate")]
    NoValidPixels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mae: f64,
    pub rmse: f64,
    pub mae_rel: f64,
    pub rmse_rel: f64,
    /// Percentage of pixels whose absolute error exceeds each threshold.
    pub bad_ratio: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub valid_pixel_count: usize,
}

/// Pairwise (cascade) summation; the result does not depend on how a caller
/// chunks work, only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Pixels where both maps hold a finite positive depth.
pub fn valid_mask(est: &Image<f64>, gt: &Image<f64>) -> Image<bool> {
    Image::from_fn(est.width(), est.height(), |u, v| {
        let (e, g) = (est.get(u, v), gt.get(u, v));
        e.is_finite() && g.is_finite() && e > 0.0 && g > 0.0
    })
}

pub fn depth_metrics(
    est: &Image<f64>,
    gt: &Image<f64>,
    mask: &Image<bool>,
    thresholds: &[f64],
) -> Result<EvalReport, EvalError> {
    if !est.same_dims(gt) {
        return Err(EvalError::SizeMismatch(est.dims(), gt.dims()));
    }
    if !est.same_dims(mask) {
        return Err(EvalError::SizeMismatch(est.dims(), mask.dims()));
    }
    let mut abs = Vec::new();
    let mut sq = Vec::new();
    let mut rel = Vec::new();
    let mut rel_sq = Vec::new();
    let mut bad = vec![0usize; thresholds.len()];
    for ((&e, &g), &m) in est
        .as_slice()
        .iter()
        .zip(gt.as_slice())
        .zip(mask.as_slice())
    {
        if !m {
            continue;
        }
        let err = e - g;
        abs.push(err.abs());
        sq.push(err * err);
        if g.abs() >= MIN_REL_DEPTH {
            rel.push(err.abs() / g);
            rel_sq.push((err / g).powi(2));
        }
        for (b, &t) in bad.iter_mut().zip(thresholds) {
            if err.abs() > t {
                *b += 1;
            }
        }
    }
    let n = abs.len();
    if n == 0 {
        return Err(EvalError::NoValidPixels);
    }
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            pairwise_sum(xs) / xs.len() as f64
        }
    };
    Ok(EvalReport {
        mae: mean(&abs),
        rmse: mean(&sq).sqrt(),
        mae_rel: mean(&rel),
        rmse_rel: mean(&rel_sq).sqrt(),
        bad_ratio: bad.iter().map(|&b| 100.0 * b as f64 / n as f64).collect(),
        thresholds: thresholds.to_vec(),
        valid_pixel_count: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationError {
    pub translation_mm: f64,
    pub rotation_deg: f64,
    pub focal_rel: f64,
}

pub fn calibration_error(est: &CameraModel, gt: &CameraModel) -> CalibrationError {
    let (ke, kg) = (&est.intrinsics, &gt.intrinsics);
    CalibrationError {
        translation_mm: (est.pose.translation - gt.pose.translation).norm() * 1e3,
        rotation_deg: est.pose.rotation_angle_to(&gt.pose).to_degrees(),
        focal_rel: ((ke.fx - kg.fx).abs() / kg.fx).max((ke.fy - kg.fy).abs() / kg.fy),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn identical_maps_have_zero_error() {
        let gt = Image::from_fn(4, 3, |u, v| 1.0 + u as f64 + v as f64);
        let r = depth_metrics(&gt, &gt, &valid_mask(&gt, &gt), &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!((r.mae, r.rmse, r.mae_rel, r.rmse_rel), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(r.bad_ratio, vec![0.0, 0.0]);
        assert_eq!(r.valid_pixel_count, 12);
    }

    #[test]
    fn masked_pixel_is_excluded() {
        let est = Image::from_vec(2, 1, vec![1.1, 5.0]);
        let gt = Image::from_vec(2, 1, vec![1.0, 2.0]);
        let mask = Image::from_vec(2, 1, vec![true, false]);
        let r = depth_metrics(&est, &gt, &mask, &DEFAULT_THRESHOLDS).unwrap();
        assert_eq!(r.valid_pixel_count, 1);
        assert!((r.mae - 0.1).abs() < 1e-12);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let a = Image::new(2, 2, 1.0);
        assert_eq!(
            depth_metrics(&a, &a, &Image::new(2, 2, false), &DEFAULT_THRESHOLDS),
            Err(EvalError::NoValidPixels)
        );
    }

    fn cam(t: Vector3<f64>, aa: Vector3<f64>, fx: f64) -> CameraModel {
        CameraModel::pinhole(
            CameraIntrinsics::new(fx, 500.0, 320.0, 240.0, 640, 480).unwrap(),
            RigidTransform::from_axis_angle(aa, t),
        )
    }

    #[test]
    fn calibration_error_examples() {
        let gt = cam(
            Vector3::new(0.02, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            500.0,
        );
        assert_eq!(
            calibration_error(&gt, &gt),
            CalibrationError {
                translation_mm: 0.0,
                rotation_deg: 0.0,
                focal_rel: 0.0
            }
        );
        let shifted = cam(
            Vector3::new(0.023, 0.0, 0.0),
            Vector3::new(0.0, 0.1, 0.0),
            505.0,
        );
        let e = calibration_error(&shifted, &gt);
        assert!((e.translation_mm - 3.0).abs() < 1e-9);
        assert!((e.focal_rel - 0.01).abs() < 1e-12);
        let mut rotated = gt;
        rotated.pose.rotation = RigidTransform::from_axis_angle(
            Vector3::new(0.0, 1f64.to_radians(), 0.0),
            Vector3::zeros(),
        )
        .rotation
            * gt.pose.rotation;
        assert!((calibration_error(&rotated, &gt).rotation_deg - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn rmse_dominates_mae_and_bad_ratio_is_monotone(
            vals in proptest::collection::vec((0.1f64..5.0, -1.0f64..1.0), 1..64)
        ) {
            let n = vals.len();
            let gt = Image::from_vec(n, 1, vals.iter().map(|v| v.0).collect());
            let est = Image::from_vec(n, 1, vals.iter().map(|v| v.0 + v.1).collect());
            let mask = Image::new(n, 1, true);
            let r = depth_metrics(&est, &gt, &mask, &[0.01, 0.05, 0.2, 0.5]).unwrap();
            prop_assert!(r.rmse >= r.mae - 1e-12 && r.mae >= 0.0);
            prop_assert!(r.rmse_rel >= r.mae_rel - 1e-12);
            for w in r.bad_ratio.windows(2) {
                prop_assert!(w[0] >= w[1]);
            }
            prop_assert!(r.bad_ratio.iter().all(|b| (0.0..=100.0).contains(b)));
        }

        #[test]
        fn metrics_are_permutation_invariant(
            vals in proptest::collection::vec((0.1f64..5.0, -1.0f64..1.0), 2..64),
            rot in 1usize..63
        ) {
            let n = vals.len();
            let mut perm = vals.clone();
            perm.rotate_left(rot % n);
            let mk = |v: &[(f64, f64)]| {
                let gt = Image::from_vec(n, 1, v.iter().map(|x| x.0).collect());
                let est = Image::from_vec(n, 1, v.iter().map(|x| x.0 + x.1).collect());
                depth_metrics(&est, &gt, &Image::new(n, 1, true), &DEFAULT_THRESHOLDS).unwrap()
            };
            let (a, b) = (mk(&vals), mk(&perm));
            prop_assert!((a.mae - b.mae).abs() < 1e-12 && (a.rmse - b.rmse).abs() < 1e-12);
            prop_assert_eq!(a.bad_ratio, b.bad_ratio);
        }
    }
}
