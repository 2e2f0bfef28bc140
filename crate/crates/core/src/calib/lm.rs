//! Weighted robust Levenberg–Marquardt refinement of all fifteen main-camera
//! parameters.

use nalgebra::{Matrix2, Matrix3, Rotation3, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CalibError, CalibrationResult, Correspondence2D3D};
use crate::geometry::{CameraModel, DistortionCoeffs, MIN_DEPTH};

pub const NUM_PARAMS: usize = 15;

type Jac = SMatrix<f64, 2, NUM_PARAMS>;
type Hess = SMatrix<f64, NUM_PARAMS, NUM_PARAMS>;
type Grad = SVector<f64, NUM_PARAMS>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmParams {
    /// Huber transition (px).
    pub huber_delta: f64,
    pub lambda_init: f64,
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than this fraction.
    pub rel_tolerance: f64,
}

impl Default for LmParams {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            lambda_init: 1e-3,
            max_iterations: 100,
            rel_tolerance: 1e-10,
        }
    }
}

/// Huber penalty of a residual norm.
pub fn huber(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

/// Reprojection residual (projected − observed) and its Jacobian with
/// respect to `[fx, fy, cx, cy, k1, k2, k3, p1, p2, δω, δt]`, where the
/// rotation update is `R ← exp(δω)·R`.
pub fn residual_and_jacobian(
    model: &CameraModel,
    c: &Correspondence2D3D,
) -> Option<(Vector2<f64>, Jac)> {
    let rp = model.pose.rotation * c.point.coords;
    let pc = rp + model.pose.translation;
    if !(pc.z > MIN_DEPTH) {
        return None;
    }
    let iz = 1.0 / pc.z;
    let (x, y) = (pc.x * iz, pc.y * iz);
    let d = &model.distortion;
    let (xd, yd) = d.distort(x, y);
    let k = &model.intrinsics;
    let e = Vector2::new(k.fx * xd + k.cx - c.pixel.x, k.fy * yd + k.cy - c.pixel.y);

    let mut j = Jac::zeros();
    j[(0, 0)] = xd;
    j[(1, 1)] = yd;
    j[(0, 2)] = 1.0;
    j[(1, 3)] = 1.0;
    let r2 = x * x + y * y;
    let (r4, r6) = (r2 * r2, r2 * r2 * r2);
    let ddist_x = [x * r2, x * r4, x * r6, 2.0 * x * y, r2 + 2.0 * x * x];
    let ddist_y = [y * r2, y * r4, y * r6, r2 + 2.0 * y * y, 2.0 * x * y];
    for i in 0..5 {
        j[(0, 4 + i)] = k.fx * ddist_x[i];
        j[(1, 4 + i)] = k.fy * ddist_y[i];
    }
    let scale = Matrix2::new(k.fx, 0.0, 0.0, k.fy);
    let dproj = SMatrix::<f64, 2, 3>::new(iz, 0.0, -x * iz, 0.0, iz, -y * iz);
    let chain = scale * d.jacobian(x, y) * dproj;
    // d(pc)/d(δω) = −[R·P]×
    let skew = Matrix3::new(0.0, -rp.z, rp.y, rp.z, 0.0, -rp.x, -rp.y, rp.x, 0.0);
    j.fixed_view_mut::<2, 3>(0, 9).copy_from(&(chain * -skew));
    j.fixed_view_mut::<2, 3>(0, 12).copy_from(&chain);
    Some((e, j))
}

/// Applies a parameter update.
pub fn apply_update(model: &CameraModel, delta: &Grad) -> CameraModel {
    let mut m = *model;
    m.intrinsics.fx += delta[0];
    m.intrinsics.fy += delta[1];
    m.intrinsics.cx += delta[2];
    m.intrinsics.cy += delta[3];
    let mut dist = m.distortion.to_array();
    for (i, c) in dist.iter_mut().enumerate() {
        *c += delta[4 + i];
    }
    m.distortion = DistortionCoeffs::from_array(dist);
    let rot =
        Rotation3::from_scaled_axis(Vector3::new(delta[9], delta[10], delta[11])).into_inner();
    m.pose.rotation = rot * m.pose.rotation;
    m.pose.translation += Vector3::new(delta[12], delta[13], delta[14]);
    m.pose = m.pose.orthonormalized();
    m
}

fn reprojection_error(model: &CameraModel, c: &Correspondence2D3D) -> Option<f64> {
    let q = model.project_unbounded(&c.point)?;
    Some((q - c.pixel).norm())
}

/// Weighted Huber cost over `active`; `None` if any active point falls
/// behind the camera.
fn cost(
    model: &CameraModel,
    corr: &[Correspondence2D3D],
    active: &[usize],
    delta: f64,
) -> Option<f64> {
    let parts: Vec<Option<f64>> = active
        .par_chunks(2048)
        .map(|chunk| {
            let mut s = 0.0;
            for &i in chunk {
                let r = reprojection_error(model, &corr[i])?;
                s += corr[i].weight * huber(r, delta);
            }
            Some(s)
        })
        .collect();
    parts.into_iter().sum()
}

fn normal_equations(
    model: &CameraModel,
    corr: &[Correspondence2D3D],
    active: &[usize],
    delta: f64,
) -> (Hess, Grad) {
    let parts: Vec<(Hess, Grad)> = active
        .par_chunks(2048)
        .map(|chunk| {
            let mut h = Hess::zeros();
            let mut g = Grad::zeros();
            for &i in chunk {
                let Some((e, j)) = residual_and_jacobian(model, &corr[i]) else {
                    continue;
                };
                let r = e.norm();
                let irls = if r <= delta { 1.0 } else { delta / r };
                let w = corr[i].weight * irls;
                if w == 0.0 {
                    continue;
                }
                h += j.transpose() * j * w;
                g += j.transpose() * e * w;
            }
            (h, g)
        })
        .collect();
    parts
        .into_iter()
        .fold((Hess::zeros(), Grad::zeros()), |(h, g), (a, b)| {
            (h + a, g + b)
        })
}

fn solve(h: &Hess, g: &Grad, lambda: f64) -> Option<Grad> {
    let mut a = *h;
    for i in 0..NUM_PARAMS {
        let d = h[(i, i)];
        a[(i, i)] += lambda * if d > 0.0 { d } else { 1e-12 };
    }
    let rhs = -g;
    if let Some(ch) = a.cholesky() {
        return Some(ch.solve(&rhs));
    }
    a.lu().solve(&rhs)
}

/// Root-mean-square reprojection error over inliers and the inlier mask
/// under `threshold`.
pub fn classify(
    model: &CameraModel,
    corr: &[Correspondence2D3D],
    threshold: f64,
) -> (Vec<bool>, f64) {
    let errs: Vec<Option<f64>> = corr
        .par_iter()
        .map(|c| reprojection_error(model, c))
        .collect();
    let mask: Vec<bool> = errs
        .iter()
        .map(|e| e.is_some_and(|e| e <= threshold))
        .collect();
    let sq: Vec<f64> = errs
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(e, _)| e.unwrap().powi(2))
        .collect();
    let rms = if sq.is_empty() {
        0.0
    } else {
        (crate::eval::pairwise_sum(&sq) / sq.len() as f64).sqrt()
    };
    (mask, rms)
}

/// Minimizes the ω-weighted Huber reprojection cost over the inliers, then
/// reclassifies every correspondence with `threshold`.
pub fn lm_refine(
    init: &CameraModel,
    corr: &[Correspondence2D3D],
    inliers: &[bool],
    params: &LmParams,
    threshold: f64,
) -> Result<CalibrationResult, CalibError> {
    assert_eq!(corr.len(), inliers.len(), "mask length mismatch");
    let active: Vec<usize> = (0..corr.len())
        .filter(|&i| inliers[i] && init.project_unbounded(&corr[i].point).is_some())
        .collect();
    if active.len() < 8 {
        return Err(CalibError::TooFewCorrespondences {
            found: active.len(),
            needed: 8,
        });
    }
    let delta = params.huber_delta;
    let mut model = *init;
    let mut current = cost(&model, corr, &active, delta).unwrap_or(f64::INFINITY);
    let mut lambda = params.lambda_init;
    let mut converged = false;
    let mut iterations = 0;
    if current.is_finite() {
        let (mut h, mut g) = normal_equations(&model, corr, &active, delta);
        while iterations < params.max_iterations {
            iterations += 1;
            if current == 0.0 || g.norm() == 0.0 {
                converged = true;
                break;
            }
            let Some(step) = solve(&h, &g, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let trial = apply_update(&model, &step);
            let trial_cost = if trial.validate().is_ok() {
                cost(&trial, corr, &active, delta).filter(|c| c.is_finite())
            } else {
                None
            };
            match trial_cost {
                Some(c) if c < current => {
                    let rel = (current - c) / current;
                    model = trial;
                    current = c;
                    lambda = (lambda / 10.0).max(1e-15);
                    if rel < params.rel_tolerance {
                        converged = true;
                        break;
                    }
                    (h, g) = normal_equations(&model, corr, &active, delta);
                }
                _ => {
                    lambda *= 10.0;
                    if lambda > 1e16 {
                        // no descent direction left: stationary point
                        converged = true;
                        break;
                    }
                }
            }
        }
    }
    let (mask, rms) = classify(&model, corr, threshold);
    let inlier_count = mask.iter().filter(|&&m| m).count();
    Ok(CalibrationResult {
        model,
        inliers: mask,
        inlier_count,
        total_count: corr.len(),
        rms_px: rms,
        converged: converged && current.is_finite(),
        iterations,
        cost: current,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, RigidTransform};
    use nalgebra::Point3;

    fn camera() -> CameraModel {
        CameraModel {
            intrinsics: CameraIntrinsics::new(760.0, 755.0, 482.0, 356.0, 960, 720).unwrap(),
            distortion: DistortionCoeffs {
                k1: 0.025,
                k2: -0.015,
                k3: 0.002,
                p1: 2e-4,
                p2: -1e-4,
            },
            pose: RigidTransform::from_axis_angle(
                Vector3::new(0.01, -0.02, 0.005),
                Vector3::new(-0.06, 0.001, 0.002),
            ),
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let cam = camera();
        let c = Correspondence2D3D {
            point: Point3::new(0.4, -0.3, 1.7),
            pixel: nalgebra::Point2::new(500.0, 300.0),
            weight: 1.0,
        };
        let (e0, j) = residual_and_jacobian(&cam, &c).unwrap();
        for p in 0..NUM_PARAMS {
            let h = if p < 4 { 1e-4 } else { 1e-7 };
            let mut d = Grad::zeros();
            d[p] = h;
            let (ep, _) = residual_and_jacobian(&apply_update(&cam, &d), &c).unwrap();
            d[p] = -h;
            let (em, _) = residual_and_jacobian(&apply_update(&cam, &d), &c).unwrap();
            let num = (ep - em) / (2.0 * h);
            let ana = j.column(p);
            assert!(
                (num - ana).norm() < 1e-4 * (1.0 + ana.norm()),
                "param {p}: {num} vs {ana}"
            );
        }
        let q = cam.project_unbounded(&c.point).unwrap();
        assert!((e0 - (q - c.pixel)).norm() < 1e-12);
    }

    #[test]
    fn huber_is_quadratic_then_linear() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(3.0, 1.0), 2.5);
    }
}
