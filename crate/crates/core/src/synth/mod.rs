//! Deterministic synthetic snapshots with exact ground truth.
//!
//! All randomness derives from the scene seed through named sub-streams so a
//! test can vary one stage while holding the others fixed.

mod scene;

pub use scene::{Hit, Material, Primitive, SceneSpec, Shape, Texture};

use std::f64::consts::TAU;

use nalgebra::{Matrix3, Point2, Rotation3, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calib::Correspondence2D3D;
use crate::geometry::{
    CameraIntrinsics, CameraModel, DistortionCoeffs, GeometryError, Rig, RigidTransform,
};
use crate::image::Image;
use crate::matching::FlowField;
pub use crate::seed::{derive_seed, stream_rng, Stream};
use crate::tof::{Frequency, RawToFFrame, ToFConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("scene has no primitives")]
    EmptyScene,
    #[error("invalid scene: {0}")]
    InvalidSpec(String),
    #[error(
        "depth {depth} m at ToF pixel ({u}, {v}) is outside the unambiguous range (0, {max}) m"
    )]
    DepthOutOfRange {
        u: usize,
        v: usize,
        depth: f64,
        max: f64,
    },
    #[error("rendered {camera} depth {depth} m falls outside the scene depth range")]
    SceneDepthRange { camera: &'static str, depth: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Gaussian read noise on every raw quad sample (counts).
    pub tof_read_sigma: f64,
    /// Adds Poisson-like noise with variance equal to the sample value.
    pub tof_shot_noise: bool,
    /// ToF amplitude (counts) of a unit-albedo surface at 1 m; `A = A₀·albedo/d²`.
    pub tof_amplitude_scale: f64,
    /// Gaussian noise on 8-bit images (gray levels).
    pub image_sigma: f64,
    /// Gaussian noise on flow vectors (px).
    pub flow_sigma: f64,
    /// Fraction of flow blocks replaced by gross outliers.
    pub flow_outlier_rate: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::noiseless()
    }
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        Self {
            tof_read_sigma: 0.0,
            tof_shot_noise: false,
            tof_amplitude_scale: 2000.0,
            image_sigma: 0.0,
            flow_sigma: 0.0,
            flow_outlier_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let ok = self.tof_read_sigma >= 0.0
            && self.tof_amplitude_scale >= 0.0
            && self.image_sigma >= 0.0
            && self.flow_sigma >= 0.0
            && (0.0..=1.0).contains(&self.flow_outlier_rate);
        if ok {
            Ok(())
        } else {
            Err(SynthError::InvalidSpec(
                "noise parameters must be non-negative".into(),
            ))
        }
    }
}

/// Read noise (counts) that produces a depth standard deviation of
/// `depth_sigma` at the high frequency for a pixel of amplitude `amplitude`.
pub fn read_sigma_for_depth_sigma(depth_sigma: f64, amplitude: f64, cfg: &ToFConfig) -> f64 {
    // each phase component is a difference of two samples, so the phase
    // noise is σ/(√2·A)
    depth_sigma * 2f64.sqrt() * amplitude * 4.0 * std::f64::consts::PI * cfg.f_high
        / cfg.speed_of_light
}

/// Median amplitude (counts) over the pixels of `tof_camera` that see the
/// scene.
pub fn median_tof_amplitude(
    scene: &SceneSpec,
    tof_camera: &CameraModel,
    amplitude_scale: f64,
) -> f64 {
    let view = render_view(scene, tof_camera, false);
    let mut amps: Vec<f64> = view
        .depth
        .as_slice()
        .iter()
        .zip(view.ir_albedo.as_slice())
        .filter(|(&d, _)| d > 0.0)
        .map(|(&d, &a)| amplitude_scale * a / (d * d))
        .collect();
    if amps.is_empty() {
        return 0.0;
    }
    let mid = amps.len() / 2;
    *amps.select_nth_unstable_by(mid, f64::total_cmp).1
}

impl NoiseSpec {
    /// Sets the read noise so that a pixel of median amplitude has a
    /// high-frequency depth standard deviation of `depth_sigma`.
    pub fn with_tof_depth_sigma(
        mut self,
        depth_sigma: f64,
        scene: &SceneSpec,
        tof_camera: &CameraModel,
        cfg: &ToFConfig,
    ) -> Self {
        let amp = median_tof_amplitude(scene, tof_camera, self.tof_amplitude_scale);
        self.tof_read_sigma = read_sigma_for_depth_sigma(depth_sigma, amp, cfg);
        self
    }
}

/// Upper bounds of the random floating-lens perturbation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbMagnitudes {
    /// In-plane lens shift radius (m).
    pub translation: f64,
    /// Pitch/yaw tilt radius (degrees).
    pub tilt_deg: f64,
    /// Relative focal change.
    pub focal_rel: f64,
    /// Principal-point shift per axis (px).
    pub principal_px: f64,
    /// Relative change of each distortion coefficient.
    pub distortion_rel: f64,
}

impl Default for PerturbMagnitudes {
    fn default() -> Self {
        Self {
            translation: 0.005,
            tilt_deg: 2.0,
            focal_rel: 0.02,
            principal_px: 5.0,
            distortion_rel: 0.1,
        }
    }
}

impl PerturbMagnitudes {
    pub fn zero() -> Self {
        Self {
            translation: 0.0,
            tilt_deg: 0.0,
            focal_rel: 0.0,
            principal_px: 0.0,
            distortion_rel: 0.0,
        }
    }
}

fn uniform_disk(rng: &mut impl Rng, radius: f64) -> (f64, f64) {
    let r = radius * rng.random::<f64>().sqrt();
    let a = TAU * rng.random::<f64>();
    (r * a.cos(), r * a.sin())
}

/// Randomly perturbs the floating camera: the optical center moves in the
/// sensor plane, the lens tilts about the camera x/y axes, and focal length,
/// principal point and distortion are jittered.
pub fn perturb_floating_lens(
    base: &CameraModel,
    seed: u64,
    mags: &PerturbMagnitudes,
) -> CameraModel {
    let mut rng = stream_rng(seed, Stream::Perturbation, 0);
    let (sx, sy) = uniform_disk(&mut rng, mags.translation);
    let (pitch, yaw) = uniform_disk(&mut rng, mags.tilt_deg.to_radians());
    let focal = 1.0 + mags.focal_rel * rng.random_range(-1.0..=1.0);
    let dcx = mags.principal_px * rng.random_range(-1.0..=1.0);
    let dcy = mags.principal_px * rng.random_range(-1.0..=1.0);
    let mut dist = base.distortion.to_array();
    for c in &mut dist {
        *c *= 1.0 + mags.distortion_rel * rng.random_range(-1.0..=1.0);
    }
    let tilt = Rotation3::from_scaled_axis(Vector3::new(pitch, yaw, 0.0)).into_inner();
    let shift = Vector3::new(sx, sy, 0.0);
    let k = &base.intrinsics;
    CameraModel {
        intrinsics: CameraIntrinsics {
            fx: k.fx * focal,
            fy: k.fy * focal,
            cx: k.cx + dcx,
            cy: k.cy + dcy,
            ..*k
        },
        distortion: DistortionCoeffs::from_array(dist),
        pose: RigidTransform {
            rotation: tilt * base.pose.rotation,
            translation: tilt * (base.pose.translation - shift),
        },
    }
}

/// Desk-scale rig: 960×720 ultrawide at the rig origin, 960×720 floating
/// main camera 6 cm to its right, 240×180 ToF sensor between them.
pub fn default_rig() -> Rig {
    let uw = CameraModel {
        intrinsics: CameraIntrinsics {
            fx: 700.0,
            fy: 700.0,
            cx: 479.5,
            cy: 359.5,
            width: 960,
            height: 720,
        },
        distortion: DistortionCoeffs::radial(-0.03, 0.01, 0.0),
        pose: RigidTransform::identity(),
    };
    let fm_rot = Rotation3::from_euler_angles(0.002, -0.006, 0.003).into_inner();
    let fm_center = Vector3::new(0.06, 0.001, 0.0);
    let fm = CameraModel {
        intrinsics: CameraIntrinsics {
            fx: 760.0,
            fy: 760.0,
            cx: 482.0,
            cy: 356.0,
            width: 960,
            height: 720,
        },
        distortion: DistortionCoeffs {
            k1: 0.025,
            k2: -0.015,
            k3: 0.002,
            p1: 2e-4,
            p2: -1e-4,
        },
        pose: RigidTransform {
            rotation: fm_rot,
            translation: -(fm_rot * fm_center),
        },
    };
    let tof = CameraModel {
        intrinsics: CameraIntrinsics {
            fx: 180.0,
            fy: 180.0,
            cx: 119.5,
            cy: 89.5,
            width: 240,
            height: 180,
        },
        distortion: DistortionCoeffs::radial(-0.01, 0.0, 0.0),
        pose: RigidTransform {
            rotation: Matrix3::identity(),
            translation: -Vector3::new(0.03, 0.012, 0.0),
        },
    };
    Rig {
        uw,
        tof,
        fm_initial: fm,
    }
}

/// Per-pixel render products of one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    /// Supersampled intensity in `[0, 1]`.
    pub intensity: Image<f64>,
    /// z-depth at pixel centers; 0 where the ray escapes.
    pub depth: Image<f64>,
    /// Hit primitive at pixel centers; `u16::MAX` where the ray escapes.
    pub primitive: Image<u16>,
    pub ir_albedo: Image<f64>,
}

const SUBSAMPLES: [(f64, f64); 4] = [(-0.25, -0.25), (0.25, -0.25), (-0.25, 0.25), (0.25, 0.25)];

/// Ray-casts every pixel of `camera` (with its distortion) against the scene.
pub fn render_view(scene: &SceneSpec, camera: &CameraModel, supersample: bool) -> RenderedView {
    let (w, h) = (camera.width(), camera.height());
    let origin = camera.center();
    let rt = camera.pose.rotation.transpose();
    let cast = |u: f64, v: f64| -> Option<Hit> {
        let (x, y) = camera.normalized_ray(&Point2::new(u, v)).ok()?;
        scene.cast(&origin, &(rt * Vector3::new(x, y, 1.0)))
    };
    let rows: Vec<Vec<(f64, f64, u16, f64)>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let (uf, vf) = (u as f64, v as f64);
                    let center = cast(uf, vf);
                    let shade = |hit: Option<Hit>| {
                        hit.map_or(0.0, |hit| {
                            scene.primitives[hit.primitive].material.intensity(hit.st)
                        })
                    };
                    let intensity = if supersample {
                        SUBSAMPLES
                            .iter()
                            .map(|&(du, dv)| shade(cast(uf + du, vf + dv)))
                            .sum::<f64>()
                            / 4.0
                    } else {
                        shade(center)
                    };
                    match center {
                        Some(hit) => (
                            intensity,
                            hit.t,
                            hit.primitive as u16,
                            scene.primitives[hit.primitive].material.ir_albedo,
                        ),
                        None => (intensity, 0.0, u16::MAX, 0.0),
                    }
                })
                .collect()
        })
        .collect();
    let flat: Vec<_> = rows.into_iter().flatten().collect();
    RenderedView {
        intensity: Image::from_vec(w, h, flat.iter().map(|p| p.0).collect()),
        depth: Image::from_vec(w, h, flat.iter().map(|p| p.1).collect()),
        primitive: Image::from_vec(w, h, flat.iter().map(|p| p.2).collect()),
        ir_albedo: Image::from_vec(w, h, flat.iter().map(|p| p.3).collect()),
    }
}

/// Quantizes intensity to 8 bits with optional Gaussian noise (gray levels).
pub fn to_gray8(intensity: &Image<f64>, sigma: f64, seed: u64, index: u64) -> Image<u8> {
    let (w, h) = intensity.dims();
    let rows: Vec<Vec<u8>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut rng = stream_rng(seed, Stream::ImageNoise, (index << 32) | v as u64);
            let normal = Normal::new(0.0, sigma.max(0.0)).unwrap();
            (0..w)
                .map(|u| {
                    let n = if sigma > 0.0 {
                        normal.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (intensity.get(u, v) * 255.0 + n).round().clamp(0.0, 255.0) as u8
                })
                .collect()
        })
        .collect();
    Image::from_vec(w, h, rows.into_iter().flatten().collect())
}

/// Noiseless correlation samples `[Q_0, Q_π/2, Q_π, Q_3π/2]` whose decoded
/// phase is exactly `phase` and whose decoded amplitude is exactly
/// `amplitude`.
pub fn exact_inverse_quad(phase: f64, amplitude: f64) -> [f64; 4] {
    let a = amplitude;
    let (s, c) = phase.sin_cos();
    let delta = s - c;
    let offset = 4.0 * a;
    let u = a * (-delta + (2.0 - delta * delta).sqrt());
    let q0 = offset + u;
    let q_half = offset;
    [q0, q_half, q0 + 2.0 * a * s, q_half + 2.0 * a * c]
}

/// Encodes ToF z-depths into raw dual-frequency quads. Depth 0 marks "no
/// return" and yields all-zero samples (plus noise).
pub fn synthesize_tof_raw(
    depth: &Image<f64>,
    ir_albedo: &Image<f64>,
    cfg: &ToFConfig,
    noise: &NoiseSpec,
    seed: u64,
) -> Result<RawToFFrame, SynthError> {
    let (w, h) = depth.dims();
    assert!(ir_albedo.same_dims(depth), "albedo and depth sizes differ");
    let max = cfg.unambiguous_range();
    for v in 0..h {
        for u in 0..w {
            let d = depth.get(u, v);
            if d != 0.0 && !(d > 0.0 && d < max) {
                return Err(SynthError::DepthOutOfRange {
                    u,
                    v,
                    depth: d,
                    max,
                });
            }
        }
    }
    let encode = |f: Frequency| -> [Image<f64>; 4] {
        let freq = cfg.frequency_hz(f);
        let rows: Vec<Vec<[f64; 4]>> = (0..h)
            .into_par_iter()
            .map(|v| {
                let mut rng = stream_rng(
                    seed,
                    Stream::ToFNoise,
                    ((f.index() as u64) << 32) | v as u64,
                );
                let read = Normal::new(0.0, noise.tof_read_sigma).unwrap();
                (0..w)
                    .map(|u| {
                        let d = depth.get(u, v);
                        let mut q = if d > 0.0 {
                            let phase = (4.0 * std::f64::consts::PI * freq * d
                                / cfg.speed_of_light)
                                .rem_euclid(TAU);
                            let amplitude =
                                noise.tof_amplitude_scale * ir_albedo.get(u, v) / (d * d);
                            exact_inverse_quad(phase, amplitude)
                        } else {
                            [0.0; 4]
                        };
                        for x in &mut q {
                            let mut n = 0.0;
                            if noise.tof_read_sigma > 0.0 {
                                n += read.sample(&mut rng);
                            }
                            if noise.tof_shot_noise && *x > 0.0 {
                                n += x.sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal);
                            }
                            *x = (*x + n).max(0.0);
                        }
                        q
                    })
                    .collect()
            })
            .collect();
        let flat: Vec<[f64; 4]> = rows.into_iter().flatten().collect();
        std::array::from_fn(|theta| Image::from_vec(w, h, flat.iter().map(|q| q[theta]).collect()))
    };
    let planes = [encode(Frequency::Low), encode(Frequency::High)];
    Ok(RawToFFrame::new(planes).expect("planes share dimensions"))
}

/// Geometric flow from `from` pixels to `to` pixels given the `from` depth.
/// Not occlusion-aware: a pixel is valid when its scene point projects
/// inside `to`.
pub fn ground_truth_flow(depth: &Image<f64>, from: &CameraModel, to: &CameraModel) -> FlowField {
    let (w, h) = depth.dims();
    let rows: Vec<Vec<Option<(f64, f64)>>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let d = depth.get(u, v);
                    if !(d > 0.0) {
                        return None;
                    }
                    let px = Point2::new(u as f64, v as f64);
                    let p = from.unproject_pixel(&px, d).ok()?;
                    let q = to.project_point(&p)?;
                    Some((q.x - px.x, q.y - px.y))
                })
                .collect()
        })
        .collect();
    let flat: Vec<_> = rows.into_iter().flatten().collect();
    FlowField::from_fn(w, h, |u, v| flat[v * w + u])
}

/// Side of the square blocks that share one gross flow outlier.
const OUTLIER_BLOCK: usize = 8;

/// Adds per-pixel Gaussian noise and block-wise gross outliers (random
/// displacement of 3–30 px) to a flow field.
pub fn corrupt_flow(flow: &FlowField, sigma: f64, outlier_rate: f64, seed: u64) -> FlowField {
    let (w, h) = (flow.width(), flow.height());
    let (bw, bh) = (w.div_ceil(OUTLIER_BLOCK), h.div_ceil(OUTLIER_BLOCK));
    let mut rng = stream_rng(seed, Stream::FlowNoise, u64::MAX);
    let blocks: Vec<Option<(f64, f64)>> = (0..bw * bh)
        .map(|_| {
            let hit = rng.random::<f64>() < outlier_rate;
            let r = rng.random_range(3.0..30.0);
            let a = TAU * rng.random::<f64>();
            hit.then(|| (r * a.cos(), r * a.sin()))
        })
        .collect();
    let mut out = FlowField::new_invalid(w, h);
    for v in 0..h {
        let mut rng = stream_rng(seed, Stream::FlowNoise, v as u64);
        let normal = Normal::new(0.0, sigma.max(0.0)).unwrap();
        for u in 0..w {
            let (nu, nv) = if sigma > 0.0 {
                (normal.sample(&mut rng), normal.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            let Some(f) = flow.get(u, v) else { continue };
            let (ou, ov) =
                blocks[(v / OUTLIER_BLOCK) * bw + u / OUTLIER_BLOCK].unwrap_or((0.0, 0.0));
            out.set(u, v, Some((f.x + nu + ou, f.y + nv + ov)));
        }
    }
    out
}

/// One synthetic capture with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotBundle {
    pub seed: u64,
    /// Rig with the stale (pre-perturbation) main-camera calibration.
    pub rig: Rig,
    pub fm_gt: CameraModel,
    pub uw_image: Image<u8>,
    pub fm_image: Image<u8>,
    pub tof_raw: RawToFFrame,
    pub gt_depth_uw: Image<f64>,
    pub gt_depth_fm: Image<f64>,
    pub gt_depth_tof: Image<f64>,
    /// Raw UW pixel → raw FM pixel.
    pub gt_flow: FlowField,
    pub gt_correspondences: Vec<Correspondence2D3D>,
    /// Hit primitive per UW pixel (`u16::MAX` for none).
    pub uw_primitive: Image<u16>,
}

impl SnapshotBundle {
    /// Fraction of UW pixels showing an untextured primitive.
    /// Ultrawide pixels that see an untextured primitive.
    pub fn textureless_mask(&self, scene: &SceneSpec) -> Image<bool> {
        let flat = scene.textureless_primitives();
        self.uw_primitive.map(|p| flat.contains(&(p as usize)))
    }

    /// Ultrawide pixels whose surface point is also visible, unoccluded, in
    /// the main camera: its main-camera depth agrees with the rendered main
    /// depth at the nearest pixel within `rel_tol`.
    pub fn covisible_mask(&self, rel_tol: f64) -> Image<bool> {
        let (w, h) = self.gt_depth_uw.dims();
        let cells: Vec<bool> = (0..w * h)
            .into_par_iter()
            .map(|i| {
                let z = self.gt_depth_uw.as_slice()[i];
                if !(z > 0.0) {
                    return false;
                }
                let Ok(p) = self
                    .rig
                    .uw
                    .unproject_pixel(&Point2::new((i % w) as f64, (i / w) as f64), z)
                else {
                    return false;
                };
                let Some(q) = self.fm_gt.project_point(&p) else {
                    return false;
                };
                let (qu, qv) = (q.x.round() as usize, q.y.round() as usize);
                if qu >= self.gt_depth_fm.width() || qv >= self.gt_depth_fm.height() {
                    return false;
                }
                let z_fm = self.fm_gt.pose.apply(&p).z;
                (self.gt_depth_fm.get(qu, qv) - z_fm).abs() <= rel_tol * z_fm
            })
            .collect();
        Image::from_vec(w, h, cells)
    }

    pub fn textureless_fraction(&self, scene: &SceneSpec) -> f64 {
        let n = self
            .textureless_mask(scene)
            .as_slice()
            .iter()
            .filter(|&&m| m)
            .count();
        n as f64 / self.uw_primitive.len() as f64
    }
}

fn check_range(
    depth: &Image<f64>,
    range: (f64, f64),
    camera: &'static str,
) -> Result<(), SynthError> {
    match depth
        .as_slice()
        .iter()
        .find(|&&d| d != 0.0 && !(d > range.0 && d < range.1))
    {
        Some(&d) => Err(SynthError::SceneDepthRange { camera, depth: d }),
        None => Ok(()),
    }
}

/// Renders a snapshot for an explicit ground-truth main camera.
pub fn render_snapshot(
    scene: &SceneSpec,
    rig: &Rig,
    fm_gt: &CameraModel,
    noise: &NoiseSpec,
    tof_cfg: &ToFConfig,
) -> Result<SnapshotBundle, SynthError> {
    scene.validate()?;
    noise.validate()?;
    rig.uw.validate()?;
    rig.tof.validate()?;
    fm_gt.validate()?;
    let seed = scene.seed;
    let uw = render_view(scene, &rig.uw, true);
    let fm = render_view(scene, fm_gt, true);
    let tof = render_view(scene, &rig.tof, false);
    check_range(&uw.depth, scene.depth_range, "ultrawide")?;
    check_range(&fm.depth, scene.depth_range, "main")?;
    check_range(&tof.depth, scene.depth_range, "ToF")?;
    let tof_raw = synthesize_tof_raw(&tof.depth, &tof.ir_albedo, tof_cfg, noise, seed)?;
    let gt_flow = ground_truth_flow(&uw.depth, &rig.uw, fm_gt);
    let mut gt_correspondences = Vec::new();
    for v in 0..tof.depth.height() {
        for u in 0..tof.depth.width() {
            let d = tof.depth.get(u, v);
            if d <= 0.0 {
                continue;
            }
            let p = rig
                .tof
                .unproject_pixel(&Point2::new(u as f64, v as f64), d)?;
            if let Some(pixel) = fm_gt.project_point(&p) {
                gt_correspondences.push(Correspondence2D3D {
                    point: p,
                    pixel,
                    weight: 1.0,
                });
            }
        }
    }
    Ok(SnapshotBundle {
        seed,
        rig: *rig,
        fm_gt: *fm_gt,
        uw_image: to_gray8(&uw.intensity, noise.image_sigma, seed, 0),
        fm_image: to_gray8(&fm.intensity, noise.image_sigma, seed, 1),
        tof_raw,
        gt_depth_uw: uw.depth,
        gt_depth_fm: fm.depth,
        gt_depth_tof: tof.depth,
        gt_flow,
        gt_correspondences,
        uw_primitive: uw.primitive,
    })
}

/// Perturbs the rig's main camera with the scene seed and renders a snapshot.
pub fn generate_snapshot(
    scene: &SceneSpec,
    rig: &Rig,
    perturb: &PerturbMagnitudes,
    noise: &NoiseSpec,
    tof_cfg: &ToFConfig,
) -> Result<SnapshotBundle, SynthError> {
    let fm_gt = perturb_floating_lens(&rig.fm_initial, scene.seed, perturb);
    render_snapshot(scene, rig, &fm_gt, noise, tof_cfg)
}
