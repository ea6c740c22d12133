use std::path::Path;
use std::process::{Command, Output};

fn kinefuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinefuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SHORT_SCENARIO: &str = "duration = 2.0\n";

fn simulate(root: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let scenario = root.join("scenario_in.toml");
    std::fs::write(&scenario, SHORT_SCENARIO).unwrap();
    let out = root.join(name);
    let o = kinefuse(&["simulate", "--scenario", path(&scenario), "--seed", seed, "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn fit(sim: &Path, out: &Path, mode: &str) -> Output {
    kinefuse(&["fit", path(sim), "--mode", mode, "--steps", "40", "--out", path(out)])
}

#[test]
fn simulate_fit_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), "sim", "4");
    for f in ["manifest.json", "keypoints.jsonl", "imu_thigh.jsonl", "imu_shank.jsonl", "ground_truth.json", "scenario.toml"] {
        assert!(sim.join(f).is_file(), "{f}");
    }
    let (video, fusion) = (tmp.path().join("video"), tmp.path().join("fusion"));
    for (dir, mode) in [(&video, "video"), (&fusion, "fusion")] {
        let o = fit(&sim, dir, mode);
        assert!(o.status.success(), "{}", stderr(&o));
        for f in ["trajectory.bin", "fit_state.json", "summary.json", "residuals.json", "timing.json"] {
            assert!(dir.join(f).is_file(), "{mode}: {f}");
        }
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(video.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 40);
    assert!(summary["residuals"]["attitude_deg"].is_null());
    assert!(summary.get("wall_time_s").is_none());

    let report = tmp.path().join("report");
    let o = kinefuse(&[
        "report",
        path(&video),
        path(&fusion),
        "--truth",
        path(&sim.join("ground_truth.json")),
        "--out",
        path(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(report.join("comparison.csv")).unwrap();
    assert!(csv.lines().any(|l| l.contains(",video,knee_angle_r,")));
    assert!(csv.lines().any(|l| l.contains(",fusion,hip_flexion_r,")));
    let deltas = std::fs::read_to_string(report.join("paired_deltas.csv")).unwrap();
    assert!(deltas.starts_with("scenario_hash,pair,joint,delta_mae_deg,delta_mae_ma_deg,delta_pearson"));
    assert!(deltas.contains("fusion-video"));
}

#[test]
fn report_rejects_other_scenarios_and_broken_fit_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let a = simulate(tmp.path(), "a", "1");
    let b = simulate(tmp.path(), "b", "2");
    let fit_a = tmp.path().join("fit_a");
    assert!(fit(&a, &fit_a, "video").status.success());
    let out = tmp.path().join("report");
    let o = kinefuse(&["report", path(&fit_a), "--truth", path(&b.join("ground_truth.json")), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("scenario hash"), "{}", stderr(&o));

    let broken = tmp.path().join("broken");
    std::fs::create_dir(&broken).unwrap();
    std::fs::write(broken.join("fit_state.json"), "{}").unwrap();
    let o = kinefuse(&["report", path(&broken), "--truth", path(&a.join("ground_truth.json")), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("trajectory.bin") && e.contains("model.toml"), "{e}");
}

#[test]
fn exit_codes_separate_usage_io_and_numerical_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let o = kinefuse(&["fit", "--mode", "sideways", "x", "--out", "y"]);
    assert_eq!(o.status.code(), Some(1));

    let o = kinefuse(&["fit", path(&tmp.path().join("absent.json")), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));

    let sim = simulate(tmp.path(), "sim", "1");
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[optimizer]\nbatch_size = 0\n").unwrap();
    let o = kinefuse(&["fit", path(&sim), "--config", path(&bad), "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    let wild = tmp.path().join("wild.toml");
    std::fs::write(&wild, "[optimizer.group_a]\nlr_start = 1e12\nlr_end = 1e12\n").unwrap();
    let o = kinefuse(&["fit", path(&sim), "--config", path(&wild), "--steps", "200", "--out", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let blocked = tmp.path().join("file");
    std::fs::write(&blocked, "").unwrap();
    let o = kinefuse(&["simulate", "--out", path(&blocked.join("sub"))]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn fusion_needs_sensors_and_manifest_needs_intrinsics() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulate(tmp.path(), "sim", "1");
    let manifest = sim.join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["sensors"] = serde_json::json!([]);
    std::fs::write(&manifest, m.to_string()).unwrap();
    let o = fit(&sim, &tmp.path().join("o"), "fusion");
    assert_eq!(o.status.code(), Some(1));
    // Video mode does not need the sensor files.
    assert!(fit(&sim, &tmp.path().join("v"), "video").status.success());

    m.as_object_mut().unwrap().remove("intrinsics");
    std::fs::write(&manifest, m.to_string()).unwrap();
    let o = fit(&sim, &tmp.path().join("o"), "video");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("intrinsics"), "{}", stderr(&o));
}
