use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use maskpolicy_cli::config::RunConfig;
use serde_json::Value;

fn run(dir: &Path, args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskpolicy"));
    cmd.current_dir(dir).env_remove("MASKPOLICY_SEED");
    if let Some(s) = seed {
        cmd.env("MASKPOLICY_SEED", s);
    }
    cmd.args(args).output().expect("spawn maskpolicy")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

fn tiny_config(dir: &Path) -> String {
    let mut cfg = RunConfig::default();
    cfg.data.shape = [4, 16, 16];
    cfg.data.train_volumes = 2;
    cfg.data.heldout_volumes = 1;
    cfg.model.embed_dim = 8;
    cfg.schedule.phase1_iters = 8;
    cfg.schedule.phase2_iters = 4;
    cfg.policy.update_period = 2;
    cfg.probe.iters = 20;
    cfg.seg.seed_threshold = 0.5;
    cfg.seg.bias = 0.1;
    fs::write(dir.join("tiny.json"), cfg.to_json()).unwrap();
    "tiny.json".into()
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["--help"], None);
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "gen-data",
        "pretrain",
        "pretrain-fixed",
        "probe",
        "segment",
        "evaluate",
        "gradcheck",
        "ratio-plot",
    ] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn gradcheck_passes_and_fails_on_impossible_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let v = ok_json(&run(dir.path(), &["gradcheck"], None));
    assert_eq!(v["passed"], true);
    assert_eq!(v["checks"].as_array().unwrap().len(), 4);
    let out = run(dir.path(), &["gradcheck", "--tol", "0"], None);
    assert!(!out.status.success());
}

#[test]
fn invalid_configs_report_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"policy": {"gamma": 2}, "seg": {"bias": -1}}"#,
    )
    .unwrap();
    let e = err_json(&run(
        dir.path(),
        &["--config", "bad.json", "gen-data", "--out", "d"],
        None,
    ));
    assert_eq!(e["violations"].as_array().unwrap().len(), 2);

    fs::write(dir.path().join("unknown.json"), r#"{"sched": {}}"#).unwrap();
    let e = err_json(&run(
        dir.path(),
        &["--config", "unknown.json", "gen-data", "--out", "d"],
        None,
    ));
    assert!(e["error"].as_str().unwrap().contains("sched"));

    let e = err_json(&run(
        dir.path(),
        &["--config", "missing.json", "gen-data", "--out", "d"],
        None,
    ));
    assert!(e["error"].as_str().unwrap().contains("missing.json"));
}

#[test]
fn seed_environment_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok_json(&run(
        dir.path(),
        &["--config", &cfg, "gen-data", "--out", "d"],
        Some("31"),
    ));
    let echoed = RunConfig::from_json(&fs::read_to_string(dir.path().join("d/config.json")).unwrap()).unwrap();
    assert_eq!(
        (echoed.data.seed, echoed.schedule.seed, echoed.probe.seed),
        (31, 31, 31)
    );
    err_json(&run(
        dir.path(),
        &["--config", &cfg, "gen-data", "--out", "e"],
        Some("abc"),
    ));
}

#[test]
fn evaluate_identical_labels_is_zero_and_appends_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok_json(&run(dir.path(), &["--config", &cfg, "gen-data", "--out", "d"], None));
    let args = [
        "evaluate",
        "--pred",
        "d/train_000_labels.vol",
        "--gt",
        "d/train_000_labels.vol",
        "--csv",
        "m.csv",
    ];
    for _ in 0..2 {
        let v = ok_json(&run(dir.path(), &args, None));
        assert_eq!(v["voi"], 0.0);
        assert_eq!(v["arand"], 0.0);
    }
    let csv = fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("pred,gt,voi_split"));
}

#[test]
fn fixed_ratio_probe_segment_evaluate_compose() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = ["--config", cfg.as_str()];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let a = with(rest);
        ok_json(&run(
            dir.path(),
            &a.iter().map(String::as_str).collect::<Vec<_>>(),
            None,
        ))
    };
    let fixed = call(&["pretrain-fixed", "--ratio", "0.85", "--out", "fixed"]);
    assert_eq!(fixed["runs"][0]["ratio"], 0.85);
    call(&["probe", "--run", "fixed/ratio_0.85", "--out", "probe"]);
    for f in [
        "probe.json",
        "heldout_000_aff.vol",
        "heldout_000_labels.vol",
        "checkpoints/probe.bin",
    ] {
        assert!(dir.path().join("probe").join(f).exists(), "{f}");
    }
    call(&["segment", "--affinity", "probe/heldout_000_aff.vol", "--out", "seg/h0"]);
    let m = call(&[
        "evaluate",
        "--pred",
        "seg/h0.vol",
        "--gt",
        "probe/heldout_000_labels.vol",
    ]);
    let (s, g, v) = (
        m["voi_split"].as_f64().unwrap(),
        m["voi_merge"].as_f64().unwrap(),
        m["voi"].as_f64().unwrap(),
    );
    assert!((v - s - g).abs() < 1e-12);
    assert!((0.0..=1.0).contains(&m["arand"].as_f64().unwrap()));
}

#[test]
fn pretrain_writes_logs_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    ok_json(&run(dir.path(), &["--config", &cfg, "pretrain", "--out", "run"], None));
    let mim = fs::read_to_string(dir.path().join("run/mim.jsonl")).unwrap();
    assert_eq!(mim.lines().count(), 12);
    let first: Value = serde_json::from_str(mim.lines().next().unwrap()).unwrap();
    for key in ["iter", "L_MSE", "L_HOG", "L_pretrain", "masking_ratio"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let policy = fs::read_to_string(dir.path().join("run/policy.jsonl")).unwrap();
    let rec: Value = serde_json::from_str(policy.lines().next().unwrap()).unwrap();
    assert!(rec.get("r_mean").is_some() && rec.get("R_mean").is_some());
    let echoed = fs::read_to_string(dir.path().join("run/config.json")).unwrap();
    assert_eq!(echoed, fs::read_to_string(dir.path().join(&cfg)).unwrap());

    let plot = ok_json(&run(dir.path(), &["ratio-plot", "--run", "run", "--window", "4"], None));
    assert_eq!(plot["points"], 12);
    let csv = fs::read_to_string(dir.path().join("run/ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13);
    assert!(fs::read_to_string(dir.path().join("run/ratio.svg"))
        .unwrap()
        .contains("<polyline"));
    err_json(&run(dir.path(), &["ratio-plot", "--run", "nowhere"], None));
}

#[test]
fn probe_needs_a_run_or_random_init() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!run(dir.path(), &["probe", "--out", "p"], None).status.success());
    assert!(
        !run(dir.path(), &["pretrain-fixed", "--ratio", "1.5", "--out", "f"], None)
            .status
            .success()
    );
}
