//! End-to-end tests of the command-line pipeline, including the pinned
//! synth -> train -> infer -> eval regression run.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Frame accuracy @1km floor of the pinned CLI smoke run, measured on the
/// phase-1 (initial-stage) predictions (seed 42, 64 sequences, 40 epochs;
/// observed 40.2).
const PIN_CLI_FRAME_ACC_1KM: f64 = 38.0;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_vidtag")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("VIDTAG_CONFIG")
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed ({:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("vidtag_cli_tests").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    for args in [
        vec!["--help"],
        vec!["synth", "--help"],
        vec!["gallery", "--help"],
        vec!["gallery", "build", "--help"],
        vec!["gallery", "from-val", "--help"],
        vec!["train", "--help"],
        vec!["train", "phase1", "--help"],
        vec!["train", "phase2", "--help"],
        vec!["infer", "--help"],
        vec!["eval", "--help"],
        vec!["ablate", "--help"],
    ] {
        let out = run(&args);
        assert!(
            out.status.code() == Some(0),
            "{args:?} exited {:?}",
            out.status.code()
        );
    }
}

#[test]
fn usage_error_exits_two() {
    let out = run(&["synth"]); // missing required --out
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_vtag_magic_exits_three_with_offset() {
    let dir = workdir("badmagic");
    let bad = dir.join("bad.vtag");
    std::fs::write(&bad, b"NOTAMAGICFILE").unwrap();
    let ckpt = dir.join("ckpt.vtck");
    let out = run(&[
        "train",
        "phase1",
        "--data",
        path_str(&bad),
        "--out",
        path_str(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("byte 0") && stderr.contains("magic"),
        "stderr: {stderr}"
    );
}

#[test]
fn eval_id_mismatch_exits_three() {
    let dir = workdir("mismatch");
    let pred = dir.join("preds.csv");
    let manifest = dir.join("val.csv");
    std::fs::write(
        &pred,
        "seq_id,frame_idx,pred_lat,pred_lon,score,stage\nxyz,0,1.000000,2.000000,0.9,refined\n",
    )
    .unwrap();
    std::fs::write(&manifest, "seq_id,frame_idx,lat,lon\nabc,0,1.000000,2.000000\n").unwrap();
    let report = dir.join("report.json");
    let out = run(&[
        "eval",
        "--pred",
        path_str(&pred),
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&report),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("xyz") && stderr.contains("abc"), "{stderr}");
}

#[test]
fn config_file_flag_precedence() {
    let dir = workdir("precedence");
    let data = dir.join("data.vtag");
    let out = run(&[
        "synth",
        "--out",
        path_str(&data),
        "--sequences",
        "8",
        "--frames",
        "16",
        "--seed",
        "1",
    ]);
    assert_success(&out, "synth");
    let manifest = dir.join("data.csv");

    // File config sets a coarse resolution.
    let cfg_path = dir.join("cfg.json");
    std::fs::write(&cfg_path, r#"{ "resolution_km": 4.0 }"#).unwrap();
    let coarse = dir.join("coarse.csv");
    let out = run(&[
        "--config",
        path_str(&cfg_path),
        "gallery",
        "build",
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&coarse),
    ]);
    assert_success(&out, "gallery via file config");

    // The flag overrides the file.
    let fine = dir.join("fine.csv");
    let out = run(&[
        "--config",
        path_str(&cfg_path),
        "gallery",
        "build",
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&fine),
        "--resolution-km",
        "1.0",
    ]);
    assert_success(&out, "gallery with flag override");

    let count = |p: &Path| std::fs::read_to_string(p).unwrap().lines().count() - 1;
    let coarse_n = count(&coarse);
    let fine_n = count(&fine);
    assert!(
        fine_n > 4 * coarse_n,
        "expected ~16x density: coarse {coarse_n}, fine {fine_n}"
    );

    // Defaults apply when neither flag nor file sets the value
    // (default resolution 0.1 km is finer than both).
    let default = dir.join("default.csv");
    let out = run(&[
        "gallery",
        "build",
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&default),
    ]);
    assert_success(&out, "gallery with defaults");
    assert!(count(&default) > 4 * fine_n);
}

#[test]
fn gallery_from_val_dedups_manifest_points() {
    let dir = workdir("fromval");
    let manifest = dir.join("val.csv");
    std::fs::write(
        &manifest,
        "seq_id,frame_idx,lat,lon\na,0,1.000000,2.000000\na,1,1.000000,2.000000\na,2,3.000000,4.000000\n",
    )
    .unwrap();
    let out_csv = dir.join("gallery.csv");
    let out = run(&[
        "gallery",
        "from-val",
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&out_csv),
    ]);
    assert_success(&out, "gallery from-val");
    let lines = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(lines.lines().count(), 3); // header + 2 unique points
}

/// The pinned end-to-end CLI run: synth -> gallery -> phase1 -> phase2 ->
/// infer (both stages) -> eval. Deterministic under --deterministic.
#[test]
fn pipeline_end_to_end_pinned() {
    let dir = workdir("e2e");
    let data = dir.join("train.vtag");
    let out = run(&[
        "--deterministic",
        "synth",
        "--out",
        path_str(&data),
        "--sequences",
        "64",
        "--frames",
        "24",
        "--seed",
        "42",
    ]);
    assert_success(&out, "synth");
    let manifest = dir.join("train.csv");
    assert!(manifest.exists());

    let gallery = dir.join("gallery.csv");
    let out = run(&[
        "--deterministic",
        "gallery",
        "build",
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&gallery),
        "--resolution-km",
        "2.0",
        "--padding-deg",
        "0.02",
    ]);
    assert_success(&out, "gallery build");

    let ckpt1 = dir.join("phase1.vtck");
    let log1 = dir.join("phase1.log");
    let out = run(&[
        "--deterministic",
        "train",
        "phase1",
        "--data",
        path_str(&data),
        "--out",
        path_str(&ckpt1),
        "--epochs",
        "40",
        "--seed",
        "42",
        "--log",
        path_str(&log1),
    ]);
    assert_success(&out, "train phase1");
    // Line-oriented JSON log.
    let log_text = std::fs::read_to_string(&log1).unwrap();
    let first_line = log_text.lines().next().expect("log has lines");
    let parsed: serde_json::Value = serde_json::from_str(first_line).unwrap();
    assert!(parsed.get("loss").is_some() && parsed.get("lr").is_some());

    let ckpt2 = dir.join("phase2.vtck");
    let out = run(&[
        "--deterministic",
        "train",
        "phase2",
        "--data",
        path_str(&data),
        "--init",
        path_str(&ckpt1),
        "--out",
        path_str(&ckpt2),
        "--epochs",
        "20",
        "--seed",
        "42",
    ]);
    assert_success(&out, "train phase2");

    // Phase 2 without --init is a usage error.
    let out = run(&[
        "train",
        "phase2",
        "--data",
        path_str(&data),
        "--out",
        path_str(&dir.join("nope.vtck")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let preds = dir.join("preds.csv");
    let traj = dir.join("traj.geojson");
    let out = run(&[
        "--deterministic",
        "infer",
        "--data",
        path_str(&data),
        "--ckpt",
        path_str(&ckpt2),
        "--gallery",
        path_str(&gallery),
        "--out",
        path_str(&preds),
        "--trajectories",
        path_str(&traj),
        "--stage",
        "refined",
        "--embed-cache",
    ]);
    assert_success(&out, "infer refined");
    assert!(gallery.with_extension("embcache").exists());

    let initial_preds = dir.join("initial.csv");
    let out = run(&[
        "--deterministic",
        "infer",
        "--data",
        path_str(&data),
        "--ckpt",
        path_str(&ckpt2),
        "--gallery",
        path_str(&gallery),
        "--out",
        path_str(&initial_preds),
        "--stage",
        "initial",
        "--embed-cache",
    ]);
    assert_success(&out, "infer initial");

    let geo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&traj).unwrap()).unwrap();
    assert_eq!(geo["type"], "FeatureCollection");
    assert_eq!(geo["features"].as_array().unwrap().len(), 64);

    // Refined-stage report: structure and trajectory metrics.
    let report_path = dir.join("report.json");
    let out = run(&[
        "eval",
        "--pred",
        path_str(&preds),
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&report_path),
    ]);
    assert_success(&out, "eval refined");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in [
        "frame_acc_0_5km",
        "frame_acc_1km",
        "frame_acc_5km",
        "frame_acc_25km",
        "frame_median_km",
        "video_acc_1km",
        "video_median_km",
        "dfd_mean",
        "mrd_mean",
        "per_sequence",
    ] {
        assert!(report.get(key).is_some(), "missing report key {key}");
    }

    // Initial-stage report: the pinned regression value.
    let initial_report = dir.join("initial_report.json");
    let out = run(&[
        "eval",
        "--pred",
        path_str(&initial_preds),
        "--manifest",
        path_str(&manifest),
        "--out",
        path_str(&initial_report),
    ]);
    assert_success(&out, "eval initial");
    let initial: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&initial_report).unwrap()).unwrap();
    let acc1 = initial["frame_acc_1km"].as_f64().unwrap();
    assert!(
        acc1 >= PIN_CLI_FRAME_ACC_1KM,
        "frame_acc_1km {acc1} below pinned {PIN_CLI_FRAME_ACC_1KM}"
    );
    println!(
        "cli e2e: initial frame_acc_1km {acc1:.1}; refined DFD {} vs initial DFD {}",
        report["dfd_mean"], initial["dfd_mean"]
    );
}
