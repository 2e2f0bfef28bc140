use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use floatfuse::eval::EvalReport;
use floatfuse::image::Image;
use floatfuse::io;
use floatfuse::tof::RawToFFrame;

fn floatfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_floatfuse"))
        .args(args)
        .env_remove("FLOATFUSE_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = floatfuse(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    floatfuse(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("s{seed}"));
    let seed = seed.to_string();
    let mut args = vec!["synth", "--seed", &seed, "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn eval(gt: &Path, est: &Path, report: &Path) -> EvalReport {
    ok(&[
        "eval",
        "--gt",
        s(gt),
        "--est",
        s(est),
        "--report",
        s(report),
    ]);
    io::read_json(report).unwrap()
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = synth(&tmp.path().join("a"), 7, &[]);
    let b = synth(&tmp.path().join("b"), 7, &[]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa.len(), 17);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.strip_prefix(&a).unwrap(), y.strip_prefix(&b).unwrap());
        assert!(
            fs::read(x).unwrap() == fs::read(y).unwrap(),
            "{x:?} differs"
        );
    }
}

#[test]
fn tof_decodes_noiseless_bundle_to_ground_truth() {
    let tmp = tempfile::tempdir().unwrap();
    let b = synth(tmp.path(), 3, &["--noiseless"]);
    let depth = tmp.path().join("d.pfm");
    let ply = tmp.path().join("p.ply");
    ok(&[
        "tof",
        "--raw",
        s(&b.join("tof")),
        "--out",
        s(&depth),
        "--ply",
        s(&ply),
    ]);
    let report = eval(
        &b.join("gt_depth_tof.pfm"),
        &depth,
        &tmp.path().join("r.json"),
    );
    assert!(report.mae < 1e-6, "{}", report.mae);
    assert_eq!(report.valid_pixel_count, 240 * 180);

    let conf = io::read_depth(tmp.path().join("d_conf.pfm")).unwrap();
    assert!(conf.as_slice().iter().all(|&c| (0.0..=1.0).contains(&c)));
    let points = io::read_ply(&ply).unwrap();
    assert_eq!(points.len(), 240 * 180);
    // the ToF camera is only translated, so rig-frame z equals ToF z-depth
    let gt = io::read_depth(b.join("gt_depth_tof.pfm")).unwrap();
    let (p, _) = points[90 * 240 + 120];
    assert!((p.z - gt.get(120, 90)).abs() < 1e-4);
}

#[test]
fn ignoring_ois_is_worse() {
    let tmp = tempfile::tempdir().unwrap();
    let b = synth(tmp.path(), 5, &["--noiseless"]);
    let online = tmp.path().join("online");
    let stale = tmp.path().join("stale");
    ok(&[
        "fuse",
        "--bundle",
        s(&b),
        "--scale",
        "2",
        "--out",
        s(&online),
    ]);
    ok(&[
        "fuse",
        "--bundle",
        s(&b),
        "--scale",
        "2",
        "--ignore-ois",
        "--out",
        s(&stale),
    ]);
    let gt = b.join("gt_depth_uw.pfm");
    let good = eval(&gt, &online.join("depth.pfm"), &tmp.path().join("a.json"));
    let bad = eval(&gt, &stale.join("depth.pfm"), &tmp.path().join("b.json"));
    assert!(bad.mae > good.mae, "{} vs {}", bad.mae, good.mae);
    assert_eq!(
        io::read_camera(stale.join("calib.json")).unwrap(),
        io::read_rig(b.join("rig.json")).unwrap().fm_initial
    );
    for name in ["depth.pfm", "disparity.pfm", "fuse.json"] {
        assert!(online.join(name).exists(), "{name}");
    }

    // a supplied calibration skips the online step
    let reuse = tmp.path().join("reuse");
    ok(&[
        "fuse",
        "--bundle",
        s(&b),
        "--scale",
        "2",
        "--calib",
        s(&online.join("calib.json")),
        "--out",
        s(&reuse),
    ]);
    assert_eq!(
        fs::read(online.join("depth.pfm")).unwrap(),
        fs::read(reuse.join("depth.pfm")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--seed", "x", "--out", "o"]), 1);
    assert_eq!(code(&["synth", "--bogus"]), 1);
    assert_eq!(code(&["fuse", "--scale", "3", "--out", "o"]), 1);
    assert_eq!(
        code(&["fuse", "--bundle", "b", "--calib", "c.json", "--ignore-ois"]),
        1
    );
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_floatfuse"))
        .args(["--print-config", "eval", "--gt", "a", "--est", "b"])
        .env("FLOATFUSE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.pfm");
    assert_eq!(
        code(&["eval", "--gt", s(&missing), "--est", s(&missing)]),
        2
    );

    let garbage = tmp.path().join("garbage.pfm");
    fs::write(&garbage, b"P6\n1 1\n255\n\0\0\0").unwrap();
    let out = floatfuse(&["eval", "--gt", s(&garbage), "--est", s(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(
        msg.contains("garbage.pfm") && msg.contains("offset 0"),
        "{msg}"
    );

    let zeros = tmp.path().join("zeros.pfm");
    io::write_depth(&zeros, &Image::new(4, 3, 0.0)).unwrap();
    assert_eq!(code(&["eval", "--gt", s(&zeros), "--est", s(&zeros)]), 2);

    // a bundle whose ToF frames carry no signal cannot anchor calibration
    let b = synth(tmp.path(), 2, &["--noiseless"]);
    let dark = RawToFFrame::zeros(240, 180);
    io::write_raw_tof(b.join("tof"), &dark).unwrap();
    let out = floatfuse(&[
        "calibrate",
        "--bundle",
        s(&b),
        "--out",
        s(&tmp.path().join("c.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ToF"));
}

#[test]
fn printed_config_parses_back_to_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let first = ok(&[
        "--threads",
        "3",
        "--print-config",
        "fuse",
        "--bundle",
        "b",
        "--tau",
        "0.7",
        "--dmax",
        "96",
        "--scale",
        "2",
        "--seed",
        "11",
        "--ignore-ois",
        "--out",
        "o",
    ]);
    let text = String::from_utf8(first.stdout).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(value["threads"], 3);
    assert_eq!(value["fusion"]["tau"], 0.7);
    assert_eq!(value["fusion"]["d_max"], 96);
    assert_eq!(value["fusion"]["scale"], 2);
    assert_eq!(value["calib"]["ransac"]["seed"], 11);
    assert_eq!(value["ignore_ois"], true);

    let path = tmp.path().join("cfg.json");
    fs::write(&path, &text).unwrap();
    let second = ok(&["--config", s(&path), "--print-config", "fuse"]);
    assert_eq!(String::from_utf8(second.stdout).unwrap(), text);

    fs::write(&path, r#"{"fusion": {"tau": 1.0, "bogus": 2}}"#).unwrap();
    assert_eq!(code(&["--config", s(&path), "--print-config", "fuse"]), 2);
}
