//! File formats: calibration and rig JSON, 8-bit PNG, snapshot bundle
//! directories and ASCII PLY point clouds.
//!
//! Float images go through [`crate::pfm`]. Everything written here is a pure
//! function of its input, so repeated runs produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Point3, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    CameraIntrinsics, CameraModel, DistortionCoeffs, GeometryError, Rig, RigidTransform,
};
use crate::image::Image;
use crate::matching::{FlowField, MatchingError};
use crate::pfm::{self, PfmError};
use crate::synth::SnapshotBundle;
use crate::tof::{Frequency, RawToFFrame, ToFError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: line {line}, column {column}: {source}")]
    Json {
        path: PathBuf,
        line: usize,
        column: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Png {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
    #[error(transparent)]
    Pfm(#[from] PfmError),
    #[error("{path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Camera {
        path: PathBuf,
        #[source]
        source: GeometryError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> IoError {
    IoError::Invalid {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads and parses a JSON file; syntax errors carry line and column.
pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: source.line(),
        column: source.column(),
        source,
    })
}

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        line: 0,
        column: 0,
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

/// On-disk camera calibration. `R` and `t` map rig-frame points into the
/// camera frame; `R` is row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraJson {
    pub image_size: [u32; 2],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// `[k1, k2, k3, p1, p2]`.
    pub dist: [f64; 5],
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl From<&CameraModel> for CameraJson {
    fn from(cam: &CameraModel) -> Self {
        let k = &cam.intrinsics;
        let r = &cam.pose.rotation;
        Self {
            image_size: [k.width, k.height],
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            dist: cam.distortion.to_array(),
            r: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            t: [
                cam.pose.translation.x,
                cam.pose.translation.y,
                cam.pose.translation.z,
            ],
        }
    }
}

impl CameraJson {
    pub fn to_model(&self) -> Result<CameraModel, GeometryError> {
        let k = CameraIntrinsics::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.image_size[0],
            self.image_size[1],
        )?;
        let pose = RigidTransform::new(
            Matrix3::from_row_slice(&self.r),
            Vector3::from_column_slice(&self.t),
        )?;
        CameraModel::new(k, DistortionCoeffs::from_array(self.dist), pose)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigJson {
    pub uw: CameraJson,
    pub tof: CameraJson,
    pub fm_initial: CameraJson,
}

impl From<&Rig> for RigJson {
    fn from(rig: &Rig) -> Self {
        Self {
            uw: (&rig.uw).into(),
            tof: (&rig.tof).into(),
            fm_initial: (&rig.fm_initial).into(),
        }
    }
}

pub fn read_camera(path: impl AsRef<Path>) -> Result<CameraModel, IoError> {
    let path = path.as_ref();
    let json: CameraJson = read_json(path)?;
    json.to_model().map_err(|source| IoError::Camera {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_camera(path: impl AsRef<Path>, cam: &CameraModel) -> Result<(), IoError> {
    write_json(path, &CameraJson::from(cam))
}

pub fn read_rig(path: impl AsRef<Path>) -> Result<Rig, IoError> {
    let path = path.as_ref();
    let json: RigJson = read_json(path)?;
    let cam = |c: &CameraJson| {
        c.to_model().map_err(|source| IoError::Camera {
            path: path.to_path_buf(),
            source,
        })
    };
    Ok(Rig {
        uw: cam(&json.uw)?,
        tof: cam(&json.tof)?,
        fm_initial: cam(&json.fm_initial)?,
    })
}

pub fn write_rig(path: impl AsRef<Path>, rig: &Rig) -> Result<(), IoError> {
    write_json(path, &RigJson::from(rig))
}

/// Reads an 8-bit image; color inputs are converted to luma.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<Image<u8>, IoError> {
    let path = path.as_ref();
    let img = ::image::open(path)
        .map_err(|source| IoError::Png {
            path: path.to_path_buf(),
            source,
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok(Image::from_vec(w as usize, h as usize, img.into_raw()))
}

pub fn write_gray_png(path: impl AsRef<Path>, img: &Image<u8>) -> Result<(), IoError> {
    let path = path.as_ref();
    let buf = ::image::GrayImage::from_raw(
        img.width() as u32,
        img.height() as u32,
        img.as_slice().to_vec(),
    )
    .ok_or_else(|| invalid(path, "image buffer size mismatch"))?;
    buf.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|source| IoError::Png {
            path: path.to_path_buf(),
            source,
        })
}

const PHASE_DEG: [u32; 4] = [0, 90, 180, 270];

fn quad_file(f: Frequency, theta: usize) -> String {
    let mhz = match f {
        Frequency::Low => 20,
        Frequency::High => 100,
    };
    format!("q_{mhz}_{}.pfm", PHASE_DEG[theta])
}

/// Writes the eight raw planes as `q_<MHz>_<deg>.pfm` (single precision).
pub fn write_raw_tof(dir: impl AsRef<Path>, frame: &RawToFFrame) -> Result<(), IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for f in Frequency::ALL {
        for theta in 0..4 {
            let plane = frame.plane(f, theta).map(|x| x as f32);
            pfm::write_pfm(dir.join(quad_file(f, theta)), &plane)?;
        }
    }
    Ok(())
}

pub fn read_raw_tof(dir: impl AsRef<Path>) -> Result<RawToFFrame, IoError> {
    let dir = dir.as_ref();
    let read = |f: Frequency, theta: usize| -> Result<Image<f64>, IoError> {
        Ok(pfm::read_pfm(dir.join(quad_file(f, theta)))?.map(|x| x as f64))
    };
    let mut planes = Vec::with_capacity(8);
    for f in Frequency::ALL {
        for theta in 0..4 {
            planes.push(read(f, theta)?);
        }
    }
    let mut planes = planes.into_iter();
    let planes = std::array::from_fn(|_| std::array::from_fn(|_| planes.next().unwrap()));
    RawToFFrame::new(planes).map_err(|e: ToFError| invalid(dir, e.to_string()))
}

/// Writes `depth` as single-precision PFM.
pub fn write_depth(path: impl AsRef<Path>, depth: &Image<f64>) -> Result<(), IoError> {
    Ok(pfm::write_pfm(path, &depth.map(|x| x as f32))?)
}

pub fn read_depth(path: impl AsRef<Path>) -> Result<Image<f64>, IoError> {
    Ok(pfm::read_pfm(path)?.map(|x| x as f64))
}

/// Flow as a three-channel PFM `(du, dv, valid)`.
pub fn write_flow(path: impl AsRef<Path>, flow: &FlowField) -> Result<(), IoError> {
    Ok(pfm::write_pfm3(path, &flow.to_image())?)
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<FlowField, IoError> {
    let path = path.as_ref();
    let img = pfm::read_pfm3(path)?;
    FlowField::from_image(&img).map_err(|e: MatchingError| invalid(path, e.to_string()))
}

/// Files of a bundle directory.
pub mod bundle_files {
    pub const UW_IMAGE: &str = "uw.png";
    pub const FM_IMAGE: &str = "fm.png";
    pub const TOF_DIR: &str = "tof";
    pub const GT_DEPTH_UW: &str = "gt_depth_uw.pfm";
    pub const GT_DEPTH_FM: &str = "gt_depth_fm.pfm";
    pub const GT_DEPTH_TOF: &str = "gt_depth_tof.pfm";
    pub const GT_FLOW: &str = "gt_flow.pfm";
    pub const RIG: &str = "rig.json";
    pub const GT_FM: &str = "gt_fm.json";
    pub const META: &str = "meta.json";
}

/// Writes every artifact of `bundle` into `dir`, plus `meta` as `meta.json`.
pub fn write_bundle<M: Serialize>(
    dir: impl AsRef<Path>,
    bundle: &SnapshotBundle,
    meta: &M,
) -> Result<(), IoError> {
    use bundle_files::*;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_gray_png(dir.join(UW_IMAGE), &bundle.uw_image)?;
    write_gray_png(dir.join(FM_IMAGE), &bundle.fm_image)?;
    write_raw_tof(dir.join(TOF_DIR), &bundle.tof_raw)?;
    write_depth(dir.join(GT_DEPTH_UW), &bundle.gt_depth_uw)?;
    write_depth(dir.join(GT_DEPTH_FM), &bundle.gt_depth_fm)?;
    write_depth(dir.join(GT_DEPTH_TOF), &bundle.gt_depth_tof)?;
    write_flow(dir.join(GT_FLOW), &bundle.gt_flow)?;
    write_rig(dir.join(RIG), &bundle.rig)?;
    write_camera(dir.join(GT_FM), &bundle.fm_gt)?;
    write_json(dir.join(META), meta)
}

/// The capture part of a bundle directory: what the pipeline consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureFiles {
    pub uw_image: Image<u8>,
    pub fm_image: Image<u8>,
    pub tof_raw: RawToFFrame,
    pub rig: Rig,
}

/// Loads images, raw ToF and the rig from a bundle directory. `rig`
/// overrides `<dir>/rig.json` when given.
pub fn read_capture(dir: impl AsRef<Path>, rig: Option<&Path>) -> Result<CaptureFiles, IoError> {
    use bundle_files::*;
    let dir = dir.as_ref();
    let rig_path = rig.map_or_else(|| dir.join(RIG), Path::to_path_buf);
    let capture = CaptureFiles {
        uw_image: read_gray_png(dir.join(UW_IMAGE))?,
        fm_image: read_gray_png(dir.join(FM_IMAGE))?,
        tof_raw: read_raw_tof(dir.join(TOF_DIR))?,
        rig: read_rig(&rig_path)?,
    };
    let check = |name: &str, found: (usize, usize), cam: &CameraModel| {
        let expected = (cam.width(), cam.height());
        if found == expected {
            Ok(())
        } else {
            Err(invalid(
                &dir.join(name),
                format!("size {found:?} does not match the rig camera {expected:?}"),
            ))
        }
    };
    check(UW_IMAGE, capture.uw_image.dims(), &capture.rig.uw)?;
    check(FM_IMAGE, capture.fm_image.dims(), &capture.rig.fm_initial)?;
    check(
        TOF_DIR,
        (capture.tof_raw.width(), capture.tof_raw.height()),
        &capture.rig.tof,
    )?;
    Ok(capture)
}

/// Writes an ASCII PLY with `x y z confidence` vertex properties.
pub fn write_ply(path: impl AsRef<Path>, points: &[(Point3<f64>, f64)]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(64 + points.len() * 48);
    let header = format!(
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\n\
         property float z\nproperty float confidence\nend_header\n",
        points.len()
    );
    out.extend_from_slice(header.as_bytes());
    for (p, c) in points {
        writeln!(
            out,
            "{} {} {} {}",
            p.x as f32, p.y as f32, p.z as f32, *c as f32
        )
        .map_err(io_err(path))?;
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Reads the vertices of an ASCII PLY written by [`write_ply`].
pub fn read_ply(path: impl AsRef<Path>) -> Result<Vec<(Point3<f64>, f64)>, IoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let mut count = None;
    for line in lines.by_ref() {
        if let Some(n) = line.strip_prefix("element vertex ") {
            count = n.trim().parse::<usize>().ok();
        }
        if line == "end_header" {
            break;
        }
    }
    let count = count.ok_or_else(|| invalid(path, "missing vertex count"))?;
    let mut points = Vec::with_capacity(count);
    for (i, line) in lines.take(count).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| invalid(path, format!("vertex {i}: unparsable number")))?;
        let [x, y, z, c] = vals[..] else {
            return Err(invalid(path, format!("vertex {i}: expected 4 values")));
        };
        points.push((Point3::new(x, y, z), c));
    }
    if points.len() != count {
        return Err(invalid(
            path,
            format!("expected {count} vertices, found {}", points.len()),
        ));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::default_rig;

    #[test]
    fn camera_json_roundtrip() {
        let rig = default_rig();
        for cam in [rig.uw, rig.tof, rig.fm_initial] {
            let json = CameraJson::from(&cam);
            assert_eq!(json.to_model().unwrap(), cam);
            let text = serde_json::to_string(&json).unwrap();
            assert!(text.contains("\"R\"") && text.contains("\"image_size\""));
        }
    }

    #[test]
    fn rig_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let rig = default_rig();
        let path = dir.path().join("rig.json");
        write_rig(&path, &rig).unwrap();
        assert_eq!(read_rig(&path).unwrap(), rig);
    }

    #[test]
    fn json_errors_report_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, "{\n  \"fx\": oops\n}").unwrap();
        match read_camera(&path) {
            Err(IoError::Json { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(7, 5, |u, v| (u * 30 + v * 7) as u8);
        let path = dir.path().join("a.png");
        write_gray_png(&path, &img).unwrap();
        assert_eq!(read_gray_png(&path).unwrap(), img);
    }

    #[test]
    fn ply_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            (Point3::new(0.5, -0.25, 2.0), 0.75),
            (Point3::new(1.0, 2.0, 3.0), 0.0),
        ];
        let path = dir.path().join("p.ply");
        write_ply(&path, &pts).unwrap();
        assert_eq!(read_ply(&path).unwrap(), pts);
    }
}
