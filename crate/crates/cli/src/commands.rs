use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use floatfuse::calib::{calibrate_online, CalibrationResult, SnapshotInputs};
use floatfuse::eval::{depth_metrics, valid_mask, EvalReport, DEFAULT_THRESHOLDS};
use floatfuse::fusion::fuse_snapshot;
use floatfuse::geometry::CameraModel;
use floatfuse::io::{self, bundle_files, CaptureFiles};
use floatfuse::matching::FlowField;
use floatfuse::synth::{default_rig, generate_snapshot, NoiseSpec, PerturbMagnitudes, SceneSpec};
use floatfuse::tof::{estimate_tof_depth, ToFConfig};
use nalgebra::Point2;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::{CalibrateArgs, Command, EvalArgs, SceneKind, SynthArgs, TofArgs};

/// Default synthetic sensor noise: 2 cm ToF depth, 2 gray levels.
pub const DEFAULT_TOF_NOISE: f64 = 0.02;
pub const DEFAULT_IMAGE_NOISE: f64 = 2.0;

pub fn apply_overrides(cfg: &mut PipelineConfig, command: &Command) {
    match command {
        Command::Synth(args) => {
            cfg.seed = args.seed;
            cfg.out = Some(args.out.clone());
        }
        Command::Tof(args) => {
            cfg.out = Some(args.out.clone());
            if args.rig.is_some() {
                cfg.rig = args.rig.clone();
            }
        }
        Command::Calibrate(args) => {
            set_paths(
                cfg,
                &args.bundle,
                &args.rig,
                &args.flow,
                &Some(args.out.clone()),
            );
            set_seed(cfg, args.seed);
        }
        Command::Fuse(args) => {
            set_paths(cfg, &args.bundle, &args.rig, &args.flow, &args.out);
            set_seed(cfg, args.seed);
            cfg.ignore_ois |= args.ignore_ois;
            if let Some(tau) = args.tau {
                cfg.fusion.tau = tau;
            }
            if let Some(d) = args.dmax {
                cfg.fusion.d_max = d;
            }
            if let Some(s) = &args.scale {
                cfg.fusion.scale = s.parse().expect("restricted to 1, 2, 4");
            }
            if let Some(c) = &args.calib {
                cfg.calib_file = Some(c.clone());
            }
        }
        Command::Eval(_) => {}
    }
}

fn set_paths(
    cfg: &mut PipelineConfig,
    bundle: &Option<PathBuf>,
    rig: &Option<PathBuf>,
    flow: &Option<PathBuf>,
    out: &Option<PathBuf>,
) {
    for (dst, src) in [
        (&mut cfg.bundle, bundle),
        (&mut cfg.rig, rig),
        (&mut cfg.flow, flow),
        (&mut cfg.out, out),
    ] {
        if src.is_some() {
            dst.clone_from(src);
        }
    }
}

/// `--seed` drives every stochastic stage; for calibration that is RANSAC.
fn set_seed(cfg: &mut PipelineConfig, seed: Option<u64>) {
    if let Some(seed) = seed {
        cfg.seed = seed;
        cfg.calib.ransac.seed = seed;
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .with_context(|| format!("{flag} is required (flag or config)"))
}

#[derive(Serialize)]
struct SynthMeta<'a> {
    seed: u64,
    scene_kind: &'a str,
    tof_depth_sigma: f64,
    noise: &'a NoiseSpec,
    perturb: &'a PerturbMagnitudes,
    tof: &'a ToFConfig,
    scene: &'a SceneSpec,
}

pub fn synth(args: &SynthArgs, cfg: &PipelineConfig) -> Result<()> {
    let (scene, kind) = match args.scene {
        SceneKind::Desk => (SceneSpec::desk(cfg.seed), "desk"),
        SceneKind::Textureless => (SceneSpec::desk_with_textureless(cfg.seed), "textureless"),
        SceneKind::Plane => (SceneSpec::fronto_parallel_plane(1.2, cfg.seed), "plane"),
    };
    let rig = default_rig();
    let (tof_sigma, image_sigma) = if args.noiseless {
        (0.0, 0.0)
    } else {
        (DEFAULT_TOF_NOISE, DEFAULT_IMAGE_NOISE)
    };
    let tof_sigma = args.tof_noise.unwrap_or(tof_sigma);
    let noise = NoiseSpec {
        image_sigma: args.image_noise.unwrap_or(image_sigma),
        ..NoiseSpec::noiseless()
    }
    .with_tof_depth_sigma(tof_sigma, &scene, &rig.tof, &cfg.tof);
    let perturb = if args.no_perturb {
        PerturbMagnitudes::zero()
    } else {
        PerturbMagnitudes::default()
    };
    let bundle = generate_snapshot(&scene, &rig, &perturb, &noise, &cfg.tof)?;
    let meta = SynthMeta {
        seed: cfg.seed,
        scene_kind: kind,
        tof_depth_sigma: tof_sigma,
        noise: &noise,
        perturb: &perturb,
        tof: &cfg.tof,
        scene: &scene,
    };
    io::write_bundle(&args.out, &bundle, &meta)?;
    Ok(())
}

/// `<dir>/<stem>_conf.pfm` for `<dir>/<stem>.pfm`.
pub fn confidence_path(depth: &Path) -> PathBuf {
    let stem = depth.file_stem().unwrap_or_default().to_string_lossy();
    depth.with_file_name(format!("{stem}_conf.pfm"))
}

pub fn tof(args: &TofArgs, cfg: &PipelineConfig) -> Result<()> {
    cfg.tof.validate()?;
    let raw = io::read_raw_tof(&args.raw)?;
    let tof = estimate_tof_depth(&raw, &cfg.tof);
    io::write_depth(&args.out, &tof.depth)?;
    io::write_depth(confidence_path(&args.out), &tof.confidence)?;
    if let Some(ply) = &args.ply {
        let rig_path = match &cfg.rig {
            Some(p) => p.clone(),
            None => args
                .raw
                .parent()
                .unwrap_or(Path::new("."))
                .join(bundle_files::RIG),
        };
        let rig = io::read_rig(&rig_path)?;
        if (rig.tof.width(), rig.tof.height()) != (raw.width(), raw.height()) {
            bail!(
                "{}: ToF camera is {}x{}, raw frames are {}x{}",
                rig_path.display(),
                rig.tof.width(),
                rig.tof.height(),
                raw.width(),
                raw.height()
            );
        }
        let mut points = Vec::with_capacity(tof.valid_count());
        for v in 0..tof.height() {
            for u in 0..tof.width() {
                let d = tof.depth.get(u, v);
                if !tof.is_valid(u, v) {
                    continue;
                }
                let p = rig
                    .tof
                    .unproject_pixel(&Point2::new(u as f64, v as f64), d)?;
                points.push((p, tof.confidence.get(u, v)));
            }
        }
        io::write_ply(ply, &points)?;
    }
    Ok(())
}

fn load_capture(cfg: &PipelineConfig) -> Result<CaptureFiles> {
    let bundle = required(&cfg.bundle, "--bundle")?;
    Ok(io::read_capture(bundle, cfg.rig.as_deref())?)
}

fn load_flow(cfg: &PipelineConfig, capture: &CaptureFiles) -> Result<Option<FlowField>> {
    let Some(path) = &cfg.flow else {
        return Ok(None);
    };
    let flow = io::read_flow(path)?;
    let expected = (capture.rig.uw.width(), capture.rig.uw.height());
    if (flow.width(), flow.height()) != expected {
        bail!(
            "{}: flow is {}x{}, expected the ultrawide size {}x{}",
            path.display(),
            flow.width(),
            flow.height(),
            expected.0,
            expected.1
        );
    }
    Ok(Some(flow))
}

fn run_calibration(
    cfg: &PipelineConfig,
    capture: &CaptureFiles,
    flow: Option<&FlowField>,
) -> Result<CalibrationResult> {
    let inputs = SnapshotInputs {
        uw_image: &capture.uw_image,
        fm_image: &capture.fm_image,
        tof_raw: &capture.tof_raw,
        flow,
    };
    Ok(calibrate_online(
        &inputs,
        &capture.rig,
        &cfg.tof,
        &cfg.calib,
    )?)
}

#[derive(Serialize)]
struct CalibrationSummary {
    inlier_count: usize,
    total_count: usize,
    rms_px: f64,
    converged: bool,
    iterations: usize,
}

impl From<&CalibrationResult> for CalibrationSummary {
    fn from(r: &CalibrationResult) -> Self {
        Self {
            inlier_count: r.inlier_count,
            total_count: r.total_count,
            rms_px: r.rms_px,
            converged: r.converged,
            iterations: r.iterations,
        }
    }
}

pub fn calibrate(_args: &CalibrateArgs, cfg: &PipelineConfig) -> Result<()> {
    let capture = load_capture(cfg)?;
    let flow = load_flow(cfg, &capture)?;
    let result = run_calibration(cfg, &capture, flow.as_ref())?;
    let out = required(&cfg.out, "--out")?;
    io::write_camera(out, &result.model)?;
    eprintln!(
        "calibrated: {}/{} inliers, rms {:.3} px",
        result.inlier_count, result.total_count, result.rms_px
    );
    Ok(())
}

pub mod fuse_files {
    pub const DEPTH: &str = "depth.pfm";
    pub const DISPARITY: &str = "disparity.pfm";
    pub const CALIB: &str = "calib.json";
    pub const REPORT: &str = "fuse.json";
}

#[derive(Serialize)]
struct FuseReport {
    /// `online`, `file` or `factory`.
    calibration_source: &'static str,
    calibration: Option<CalibrationSummary>,
    injected_cells: usize,
    valid_pixels: usize,
    /// Against the bundle's `gt_depth_uw.pfm`, when there is one.
    metrics: Option<EvalReport>,
    timing: floatfuse::fusion::FusionTiming,
}

pub fn fuse(cfg: &PipelineConfig) -> Result<()> {
    cfg.tof.validate()?;
    let out = required(&cfg.out, "--out")?.to_path_buf();
    let capture = load_capture(cfg)?;
    let flow = load_flow(cfg, &capture)?;
    let (fm, source, summary): (CameraModel, _, _) = if let Some(path) = &cfg.calib_file {
        (io::read_camera(path)?, "file", None)
    } else if cfg.ignore_ois {
        (capture.rig.fm_initial, "factory", None)
    } else {
        let r = run_calibration(cfg, &capture, flow.as_ref())?;
        let summary = CalibrationSummary::from(&r);
        (r.model, "online", Some(summary))
    };
    let tof = estimate_tof_depth(&capture.tof_raw, &cfg.tof);
    let fused = fuse_snapshot(
        &capture.uw_image,
        &capture.fm_image,
        &tof,
        &capture.rig,
        &fm,
        &cfg.fusion,
    )?;
    std::fs::create_dir_all(&out).with_context(|| format!("{}", out.display()))?;
    io::write_depth(out.join(fuse_files::DEPTH), &fused.depth)?;
    floatfuse::pfm::write_pfm(out.join(fuse_files::DISPARITY), &fused.disparity.to_image())?;
    io::write_camera(out.join(fuse_files::CALIB), &fm)?;
    let gt_path = required(&cfg.bundle, "--bundle")?.join(bundle_files::GT_DEPTH_UW);
    let metrics = if gt_path.exists() {
        let gt = io::read_depth(&gt_path)?;
        depth_metrics(
            &fused.depth,
            &gt,
            &valid_mask(&fused.depth, &gt),
            &DEFAULT_THRESHOLDS,
        )
        .ok()
    } else {
        None
    };
    let report = FuseReport {
        calibration_source: source,
        calibration: summary,
        injected_cells: fused.injected_cells,
        valid_pixels: fused.depth.as_slice().iter().filter(|&&d| d > 0.0).count(),
        metrics,
        timing: fused.timing,
    };
    io::write_json(out.join(fuse_files::REPORT), &report)?;
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let gt = io::read_depth(&args.gt)?;
    let est = io::read_depth(&args.est)?;
    let mask = valid_mask(&est, &gt);
    let report = depth_metrics(&est, &gt, &mask, &DEFAULT_THRESHOLDS)
        .with_context(|| format!("{} vs {}", args.est.display(), args.gt.display()))?;
    match &args.report {
        Some(path) => io::write_json(path, &report)?,
        None => writeln!(
            std::io::stdout().lock(),
            "{}",
            serde_json::to_string_pretty(&report)?
        )?,
    }
    Ok(())
}
