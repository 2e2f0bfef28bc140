//! Projection-matrix estimation by the direct linear transform and its
//! decomposition into intrinsics and pose.

use nalgebra::{Matrix3, Matrix3x4, Matrix4, SMatrix, Vector3, SVD};

use super::Correspondence2D3D;
use crate::geometry::{CameraIntrinsics, CameraModel, DistortionCoeffs, RigidTransform};

/// Ratio of the second-smallest to the largest singular value below which
/// a sample is treated as degenerate (coplanar or collinear points).
const DEGENERACY_RATIO: f64 = 1e-9;

fn normalize_3d(pts: &[[f64; 3]]) -> Matrix4<f64> {
    let n = pts.len() as f64;
    let c = pts
        .iter()
        .fold(Vector3::zeros(), |a, p| a + Vector3::from(*p))
        / n;
    let mean = pts
        .iter()
        .map(|p| (Vector3::from(*p) - c).norm())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { 3f64.sqrt() / mean } else { 1.0 };
    #[rustfmt::skip]
    let t = Matrix4::new(
        s, 0.0, 0.0, -s * c.x,
        0.0, s, 0.0, -s * c.y,
        0.0, 0.0, s, -s * c.z,
        0.0, 0.0, 0.0, 1.0,
    );
    t
}

fn normalize_2d(pts: &[[f64; 2]]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (cx, cy) = (cx / n, cy / n);
    let mean = pts
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { 2f64.sqrt() / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Estimates the 3×4 projection matrix from exactly six correspondences.
/// Returns `None` for degenerate configurations.
pub fn dlt6(sample: &[Correspondence2D3D; 6]) -> Option<Matrix3x4<f64>> {
    let p3: Vec<[f64; 3]> = sample
        .iter()
        .map(|c| [c.point.x, c.point.y, c.point.z])
        .collect();
    let p2: Vec<[f64; 2]> = sample.iter().map(|c| [c.pixel.x, c.pixel.y]).collect();
    let t3 = normalize_3d(&p3);
    let t2 = normalize_2d(&p2);
    let mut a = SMatrix::<f64, 12, 12>::zeros();
    for (i, c) in sample.iter().enumerate() {
        let x = t3 * c.point.to_homogeneous();
        let q = t2 * c.pixel.to_homogeneous();
        let (u, v) = (q.x / q.z, q.y / q.z);
        for k in 0..4 {
            a[(2 * i, k)] = x[k];
            a[(2 * i, 8 + k)] = -u * x[k];
            a[(2 * i + 1, 4 + k)] = x[k];
            a[(2 * i + 1, 8 + k)] = -v * x[k];
        }
    }
    let svd = SVD::new(a, false, true);
    let vt = svd.v_t?;
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    let (smallest, second, largest) = (order[0], order[1], order[11]);
    if !(svd.singular_values[second] > DEGENERACY_RATIO * svd.singular_values[largest]) {
        return None;
    }
    let h = vt.row(smallest);
    let p_hat = Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    let p = t2.try_inverse()? * p_hat * t3;
    p.iter().all(|x| x.is_finite()).then_some(p)
}

/// RQ factorization of a 3×3 matrix: `m = K·R` with `K` upper triangular
/// with positive diagonal and `R` orthogonal.
pub fn rq3(m: &Matrix3<f64>) -> (Matrix3<f64>, Matrix3<f64>) {
    let e = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (e * m).transpose().qr();
    let (q, u) = (qr.q(), qr.r());
    let k = e * u.transpose() * e;
    let r = e * q.transpose();
    let d = Matrix3::from_diagonal(&Vector3::new(
        sign(k[(0, 0)]),
        sign(k[(1, 1)]),
        sign(k[(2, 2)]),
    ));
    (k * d, d * r)
}

fn sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Splits a projection matrix into a distortion-free camera; skew is
/// dropped. `None` when the decomposition is not a valid camera.
pub fn decompose_projection(p: &Matrix3x4<f64>, width: u32, height: u32) -> Option<CameraModel> {
    let mut p = *p;
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    if m.determinant() < 0.0 {
        p = -p;
    }
    let m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into();
    let (k, r) = rq3(&m);
    if !(r.determinant() > 0.0) || k[(2, 2)] <= 0.0 {
        return None;
    }
    let t = k.try_inverse()? * p.column(3);
    let k = k / k[(2, 2)];
    let intrinsics = CameraIntrinsics {
        fx: k[(0, 0)],
        fy: k[(1, 1)],
        cx: k[(0, 2)],
        cy: k[(1, 2)],
        width,
        height,
    };
    intrinsics.validate().ok()?;
    let pose = RigidTransform {
        rotation: r,
        translation: t,
    };
    if !pose.is_finite() {
        return None;
    }
    Some(CameraModel {
        intrinsics,
        distortion: DistortionCoeffs::ZERO,
        pose,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Point3;

    fn camera() -> CameraModel {
        CameraModel::pinhole(
            CameraIntrinsics::new(760.0, 755.0, 482.0, 356.0, 960, 720).unwrap(),
            RigidTransform::from_axis_angle(
                Vector3::new(0.02, -0.03, 0.01),
                Vector3::new(-0.06, 0.002, 0.001),
            ),
        )
    }

    #[test]
    fn rq_reconstructs_input() {
        let m = Matrix3::new(3.0, 1.0, 2.0, -1.0, 4.0, 0.5, 0.2, 0.3, 1.0);
        let (k, r) = rq3(&m);
        assert!((k * r - m).norm() < 1e-12);
        assert!((r * r.transpose() - Matrix3::identity()).norm() < 1e-12);
        assert!(k[(1, 0)].abs() < 1e-12 && k[(2, 0)].abs() < 1e-12 && k[(2, 1)].abs() < 1e-12);
        assert!(k[(0, 0)] > 0.0 && k[(1, 1)] > 0.0 && k[(2, 2)] > 0.0);
    }

    #[test]
    fn six_exact_points_recover_the_camera() {
        let cam = camera();
        let pts = [
            Point3::new(-0.4, -0.3, 1.5),
            Point3::new(0.5, -0.2, 2.0),
            Point3::new(0.1, 0.4, 1.2),
            Point3::new(-0.2, 0.1, 3.0),
            Point3::new(0.3, 0.3, 2.5),
            Point3::new(-0.5, 0.35, 1.8),
        ];
        let sample = pts.map(|p| Correspondence2D3D {
            point: p,
            pixel: cam.project_unbounded(&p).unwrap(),
            weight: 1.0,
        });
        let p = dlt6(&sample).unwrap();
        let est = decompose_projection(&p, 960, 720).unwrap();
        assert!((est.intrinsics.fx - 760.0).abs() < 1e-6);
        assert!((est.intrinsics.fy - 755.0).abs() < 1e-6);
        assert!((est.pose.translation - cam.pose.translation).norm() < 1e-9);
        assert!(est.pose.rotation_angle_to(&cam.pose) < 1e-9);
    }

    #[test]
    fn coplanar_sample_is_degenerate() {
        let cam = camera();
        let sample: [Correspondence2D3D; 6] = std::array::from_fn(|i| {
            let p = Point3::new(i as f64 * 0.1 - 0.3, (i * i) as f64 * 0.05 - 0.2, 2.0);
            Correspondence2D3D {
                point: p,
                pixel: cam.project_unbounded(&p).unwrap(),
                weight: 1.0,
            }
        });
        assert!(dlt6(&sample).is_none());
    }
}
