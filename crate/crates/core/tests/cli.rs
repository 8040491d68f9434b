use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_radioloc");

fn radioloc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn short_config(dir: &Path, duration: f64) -> PathBuf {
    let path = dir.join("short.toml");
    fs::write(
        &path,
        format!("seed = 3\n[mission]\nkind = \"coordinated\"\nduration = {duration}\n"),
    )
    .unwrap();
    path
}

fn metric(dir: &Path, key: &str) -> f64 {
    let text = fs::read_to_string(dir.join("metrics.txt")).unwrap();
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("{key} missing from metrics"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_and_print_config() {
    let out = radioloc(&["version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("radioloc "));

    let out = radioloc(&["print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[rte]") && text.contains("[pose_graph]"));
    // the printed defaults are themselves a valid configuration
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("printed.toml");
    fs::write(&path, &text).unwrap();
    assert!(radioloc(&["print-config", s(&path)]).status.success());
}

#[test]
fn malformed_config_exits_one_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[uwb]\nsigma = -0.1\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = radioloc(&["run-sim", s(&cfg), "--out", s(&out_dir)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("uwb.sigma"));
    assert!(!out_dir.exists());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    let out = radioloc(&["run-sim", s(&dir.path().join("missing.toml"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runs_are_deterministic_and_replay_matches() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 30.0);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = radioloc(&["run-sim", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in [
        "metrics.txt",
        "rte_estimates.csv",
        "trajectories.csv",
        "graph.txt",
        "uwb_ranges.csv",
    ] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let r = dir.path().join("r");
    let o = radioloc(&["replay", s(&a), s(&cfg), "--out", s(&r)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(a.join("metrics.txt")).unwrap(),
        fs::read(r.join("metrics.txt")).unwrap()
    );
}

#[test]
fn disabling_fusion_grows_ugv_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path(), 60.0);
    let full = dir.path().join("full");
    let odo = dir.path().join("odo");
    assert!(radioloc(&["run-sim", s(&cfg), "--out", s(&full)])
        .status
        .success());
    let o = radioloc(&[
        "replay",
        s(&full),
        s(&cfg),
        "--no-rte",
        "--no-radar",
        "--out",
        s(&odo),
    ]);
    assert!(o.status.success());
    assert_eq!(metric(&odo, "encounters"), 0.0);
    assert!(metric(&odo, "ugv_ate") > metric(&full, "ugv_ate"));
}

#[test]
fn paced_replay_follows_the_clock() {
    let dir = tempfile::tempdir().unwrap();
    let duration = 20.0;
    let cfg = short_config(dir.path(), duration);
    let data = dir.path().join("data");
    assert!(radioloc(&["run-sim", s(&cfg), "--out", s(&data)])
        .status
        .success());
    let started = Instant::now();
    let o = radioloc(&[
        "replay",
        s(&data),
        s(&cfg),
        "--paced",
        "--out",
        s(&dir.path().join("paced")),
    ]);
    let elapsed = started.elapsed().as_secs_f64();
    assert!(o.status.success());
    // samples span [0, duration - dt]
    let span = duration - 0.1;
    assert!(
        (elapsed - span).abs() <= 0.05 * span,
        "{elapsed} s for {span} s of data"
    );
}

#[test]
fn assert_flag_reports_threshold_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("drifting.toml");
    // no radar data and 30% odometry drift leave the UGV far outside its band
    fs::write(
        &cfg,
        "[mission]\nduration = 40.0\n[odometry]\nrate = 0.3\n[radar]\nenabled = false\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = radioloc(&["run-sim", s(&cfg), "--no-rte", "--assert", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ugv_ate"));
    assert!(metric(&out, "ugv_ate") > 0.5);
    // without --assert the same run succeeds
    assert!(radioloc(&["run-sim", s(&cfg), "--no-rte", "--out", s(&out)])
        .status
        .success());
}
