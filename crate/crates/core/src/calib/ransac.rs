//! Robust distortion-free camera hypothesis from 2D/3D correspondences.

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dlt::{decompose_projection, dlt6};
use super::{CalibError, Correspondence2D3D};
use crate::geometry::CameraModel;
use crate::seed::{stream_rng, Stream};

pub const MIN_SAMPLE: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacParams {
    /// Inlier reprojection threshold (px).
    pub threshold: f64,
    pub max_iterations: usize,
    /// Success probability used for the adaptive iteration bound.
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            max_iterations: 1000,
            confidence: 0.999,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<(), CalibError> {
        if !(self.threshold > 0.0) || !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(CalibError::InvalidParams(
                "RANSAC needs threshold > 0 and 0 < confidence < 1".into(),
            ));
        }
        Ok(())
    }
}

/// Iterations needed to draw one all-inlier sample with probability
/// `confidence` at the given inlier ratio.
pub fn required_iterations(inlier_ratio: f64, confidence: f64, max: usize) -> usize {
    let good = inlier_ratio.powi(MIN_SAMPLE as i32);
    if good >= 1.0 {
        return 1;
    }
    if good <= 0.0 {
        return max;
    }
    let n = (1.0 - confidence).ln() / (1.0 - good).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, max)
    } else {
        max
    }
}

struct Score {
    inliers: usize,
    mean_error: f64,
}

fn score(model: &CameraModel, corr: &[Correspondence2D3D], threshold: f64) -> Score {
    let parts: Vec<(usize, f64)> = corr
        .par_chunks(4096)
        .map(|chunk| {
            let mut n = 0;
            let mut s = 0.0;
            for c in chunk {
                if let Some(q) = model.project_unbounded(&c.point) {
                    let e = (q - c.pixel).norm();
                    if e <= threshold {
                        n += 1;
                        s += e;
                    }
                }
            }
            (n, s)
        })
        .collect();
    let (n, s) = parts
        .into_iter()
        .fold((0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    Score {
        inliers: n,
        mean_error: if n > 0 { s / n as f64 } else { f64::INFINITY },
    }
}

/// Samples six correspondences per iteration, fits a projection matrix by
/// DLT and keeps the decomposed camera with the most inliers (ties: lower
/// mean inlier error). Iteration `i` draws from its own seeded stream.
pub fn ransac_pnp(
    corr: &[Correspondence2D3D],
    width: u32,
    height: u32,
    params: &RansacParams,
) -> Result<(CameraModel, Vec<bool>), CalibError> {
    params.validate()?;
    if corr.len() < MIN_SAMPLE {
        return Err(CalibError::TooFewCorrespondences {
            found: corr.len(),
            needed: MIN_SAMPLE,
        });
    }
    let mut best: Option<(CameraModel, Score)> = None;
    let mut budget = params.max_iterations;
    let mut i = 0;
    while i < budget {
        let mut rng = stream_rng(params.seed, Stream::Ransac, i as u64);
        i += 1;
        let idx = index::sample(&mut rng, corr.len(), MIN_SAMPLE);
        let sample: [Correspondence2D3D; MIN_SAMPLE] = std::array::from_fn(|k| corr[idx.index(k)]);
        let Some(p) = dlt6(&sample) else { continue };
        let Some(model) = decompose_projection(&p, width, height) else {
            continue;
        };
        let s = score(&model, corr, params.threshold);
        let better = best.as_ref().is_none_or(|(_, b)| {
            s.inliers > b.inliers || (s.inliers == b.inliers && s.mean_error < b.mean_error)
        });
        if better {
            let ratio = s.inliers as f64 / corr.len() as f64;
            budget = budget.min(required_iterations(
                ratio,
                params.confidence,
                params.max_iterations,
            ));
            best = Some((model, s));
        }
    }
    let (model, s) = best.ok_or(CalibError::NoHypothesis)?;
    if s.inliers < MIN_SAMPLE {
        return Err(CalibError::NoHypothesis);
    }
    let mask = corr
        .iter()
        .map(|c| {
            model
                .project_unbounded(&c.point)
                .is_some_and(|q| (q - c.pixel).norm() <= params.threshold)
        })
        .collect();
    Ok((model, mask))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_bound() {
        assert_eq!(required_iterations(1.0, 0.999, 1000), 1);
        assert_eq!(required_iterations(0.0, 0.999, 1000), 1000);
        // 0.5^6 = 1/64 → ln(0.001)/ln(63/64) ≈ 438.6
        assert_eq!(required_iterations(0.5, 0.999, 1000), 439);
    }
}
