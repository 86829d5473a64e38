//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits nonzero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use maskpolicy_cli::checks;
use maskpolicy_cli::commands::read_trajectory;
use maskpolicy_cli::config::RunConfig;
use maskpolicy_core::metrics::{self, Background, MetricsConfig};
use maskpolicy_core::mim::{LossConfig, MaskDecision, ModelConfig, Sample, TargetModel};
use maskpolicy_core::nn::AdamConfig;
use maskpolicy_core::policy::{act, bandit, reward, run_episode, DecisionState, PolicyConfig, PolicyParams};
use maskpolicy_core::seg::{
    self, affinity_from_labels, agglomerate, replay, watershed_fragments, AffinityMap, MergeScore, SegConfig,
};
use maskpolicy_core::volume::{gen_phantom, LabelVolume, PhantomConfig};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&Path) -> Outcome,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_maskpolicy")
}

/// Runs the CLI and returns stdout, failing on a nonzero exit.
fn cli(config: Option<&Path>, args: &[&str]) -> Result<Vec<u8>, String> {
    let mut cmd = Command::new(bin());
    cmd.env_remove("MASKPOLICY_SEED");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    let out = cmd
        .args(args)
        .output()
        .map_err(|e| format!("cannot run {}: {e}", bin()))?;
    if !out.status.success() {
        return Err(format!(
            "maskpolicy {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(out.stdout)
}

fn cli_json(config: Option<&Path>, args: &[&str]) -> Result<Value, String> {
    let out = cli(config, args)?;
    serde_json::from_slice(&out).map_err(|e| format!("bad JSON from {args:?}: {e}"))
}

fn write_config(dir: &Path, name: &str, cfg: &RunConfig) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, cfg.to_json()).expect("write config");
    p
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradients(_: &Path) -> Outcome {
    let results = checks::run_all(1e-6).map_err(|e| e.to_string())?;
    let out = cli_json(None, &["gradcheck", "--tol", "1e-6"])?;
    let detail = results
        .iter()
        .map(|r| format!("{} {:.2e}", r.name, r.max_rel_err))
        .collect::<Vec<_>>()
        .join(", ");
    check(results.iter().all(|r| r.passed) && out["passed"] == true, detail)
}

fn tiny_model() -> (TargetModel, Vec<Sample>) {
    let cfg = ModelConfig {
        embed_dim: 8,
        ..ModelConfig::default()
    };
    let samples: Vec<Sample> = (0..2)
        .map(|k| {
            let (vol, _) = gen_phantom(40 + k, [4, 16, 16], 3, 0.05, &PhantomConfig::default()).unwrap();
            Sample::from_volume(&vol, &cfg).unwrap()
        })
        .collect();
    (TargetModel::new(&samples[0].grid, &cfg, 2).unwrap(), samples)
}

fn telescoping(_: &Path) -> Outcome {
    let (model, samples) = tiny_model();
    let loss = LossConfig::default();
    let n = samples[0].grid.num_patches();
    let mut zero_ok = true;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let k = rng.random_range(1..n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let d = MaskDecision::from_masked(n, &idx[..k]);
        zero_ok &= reward(&model, &samples[0], &d, &d, &loss).map_err(|e| e.to_string())? == 0.0;
    }
    let cfg = PolicyConfig {
        gamma: 1.0,
        horizon: 6,
        episode_steps: 6,
        ..PolicyConfig::default()
    };
    let policy = PolicyParams::new(model.embed_dim(), 8, 1);
    let refs: Vec<&Sample> = samples.iter().collect();
    let ep = run_episode(&policy, &model, &refs, &cfg, &loss, &mut ChaCha8Rng::seed_from_u64(3))
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (b, &(l0, lt)) in ep.endpoint_losses.iter().enumerate() {
        let total: f64 = (1..=cfg.episode_steps).map(|t| ep.trace.rewards(t)[b]).sum();
        worst = worst.max((total - (lt - l0)).abs());
    }
    check(
        worst < 1e-9 && zero_ok,
        format!("max |sum r - (L_T - L_0)| = {worst:.1e}, equal decisions give r = 0: {zero_ok}"),
    )
}

fn uniform_ratio(_: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, e) = (128, 64);
    let state = DecisionState::from_observations(Array2::from_shape_fn((n, e), |_| rng.random_range(-1.0..1.0)));
    let policy = PolicyParams::new(e, 32, 4);
    let draws = 10_000;
    let masked: usize = (0..draws)
        .map(|_| act(&policy, &state, &mut rng).decision.num_masked())
        .sum();
    let ratio = masked as f64 / (draws * n) as f64;
    check(
        (ratio - 0.5).abs() <= 0.02,
        format!("ratio {ratio:.4} over {draws} joint actions of {n} agents"),
    )
}

fn bandit_learning(_: &Path) -> Outcome {
    let cfg = bandit::BanditConfig::default();
    let mut solved = 0;
    let mut at = Vec::new();
    for seed in 0..10 {
        let o = bandit::run(seed, &cfg).map_err(|e| e.to_string())?;
        if let Some(u) = o.solved_at {
            solved += 1;
            at.push(u);
        }
    }
    check(
        solved >= 9,
        format!("{solved}/10 seeds solved within {} updates, at {at:?}", cfg.max_updates),
    )
}

fn mim_learning(_: &Path) -> Outcome {
    let cfg = ModelConfig::default();
    let (vol, _) = gen_phantom(7, [16, 32, 32], 6, 0.05, &PhantomConfig::default()).map_err(|e| e.to_string())?;
    let sample = Sample::from_volume(&vol, &cfg).map_err(|e| e.to_string())?;
    let mut model = TargetModel::new(&sample.grid, &cfg, 0).map_err(|e| e.to_string())?;
    let n = sample.grid.num_patches();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let decision = MaskDecision::from_masked(n, &idx[..n / 2]);
    let loss = LossConfig::default();
    let adam = AdamConfig::default();
    let l0 = model.loss(&sample, &decision, &loss).map_err(|e| e.to_string())?.total;
    for _ in 0..500 {
        model
            .train_step(&[(&sample, &decision)], &loss, &adam)
            .map_err(|e| e.to_string())?;
    }
    let l1 = model.loss(&sample, &decision, &loss).map_err(|e| e.to_string())?.total;
    let drop = 1.0 - l1 / l0;
    check(
        drop >= 0.5,
        format!("L_pretrain {l0:.4} -> {l1:.4} ({:.1}% reduction)", 100.0 * drop),
    )
}

fn heldout_mse(cfg: &Path, run: Option<&Path>, out: &Path) -> Result<f64, String> {
    let mut args = vec!["probe", "--out", path_str(out)];
    match run {
        Some(r) => args.extend(["--run", path_str(r)]),
        None => args.push("--random-init"),
    }
    let v = cli_json(Some(cfg), &args)?;
    v["heldout_mse"]
        .as_f64()
        .ok_or_else(|| "probe report lacks heldout_mse".into())
}

fn pretrain_run(dir: &Path) -> PathBuf {
    dir.join("c6_pretrain")
}

fn transfer(dir: &Path) -> Outcome {
    let cfg = RunConfig::default();
    let cfg_path = write_config(dir, "c6.json", &cfg);
    let mut mse_only = cfg.clone();
    mse_only.loss.enable_hog = false;
    let mse_path = write_config(dir, "c6_mse_only.json", &mse_only);

    let run = pretrain_run(dir);
    cli(Some(&cfg_path), &["pretrain", "--out", path_str(&run)])?;
    let fixed = dir.join("c6_fixed");
    cli(
        Some(&cfg_path),
        &["pretrain-fixed", "--ratio", "0.5", "--out", path_str(&fixed)],
    )?;
    let mse_run = dir.join("c6_pretrain_mse_only");
    cli(Some(&mse_path), &["pretrain", "--out", path_str(&mse_run)])?;

    let random = heldout_mse(&cfg_path, None, &dir.join("c6_probe_random"))?;
    let policy = heldout_mse(&cfg_path, Some(&run), &dir.join("c6_probe_policy"))?;
    let baseline = heldout_mse(&cfg_path, Some(&fixed.join("ratio_0.5")), &dir.join("c6_probe_fixed"))?;
    let mse = heldout_mse(&cfg_path, Some(&mse_run), &dir.join("c6_probe_mse_only"))?;

    let gain = (random - policy) / random;
    let beats_random = gain >= 0.10;
    let beats_fixed = policy < baseline;
    let hog_ok = policy <= 1.02 * mse;
    check(
        beats_random && beats_fixed && hog_ok,
        format!(
            "probe MSE random {random:.5}, decision-based {policy:.5} ({:+.1}% vs random, needs >= 10%: {beats_random}), \
             fixed-0.5 {baseline:.5} (beaten: {beats_fixed}), MSE-only {mse:.5} (HOG+MSE within 2%: {hog_ok}, {})",
            100.0 * gain,
            if policy < mse { "HOG helps" } else { "HOG does not help" }
        ),
    )
}

type Oracle = (f64, f64, f64);

/// Conditional entropies and adapted Rand error by direct summation over
/// foreground voxels and all ordered voxel pairs.
fn brute_force(pred: &LabelVolume, gt: &LabelVolume) -> Oracle {
    let fg: Vec<(u32, u32)> = pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|(_, &g)| g != 0)
        .map(|(&p, &g)| (p, g))
        .collect();
    let n = fg.len() as f64;
    let mut joint: HashMap<(u32, u32), f64> = HashMap::new();
    let mut pm: HashMap<u32, f64> = HashMap::new();
    let mut gm: HashMap<u32, f64> = HashMap::new();
    for &(p, g) in &fg {
        *joint.entry((p, g)).or_default() += 1.0 / n;
        *pm.entry(p).or_default() += 1.0 / n;
        *gm.entry(g).or_default() += 1.0 / n;
    }
    let mut split = 0.0;
    let mut merge = 0.0;
    for (&(p, g), &pij) in &joint {
        split -= pij * (pij / gm[&g]).ln();
        merge -= pij * (pij / pm[&p]).ln();
    }
    let (mut both, mut same_p, mut same_g) = (0u64, 0u64, 0u64);
    for a in &fg {
        for b in &fg {
            let sp = a.0 == b.0;
            let sg = a.1 == b.1;
            same_p += sp as u64;
            same_g += sg as u64;
            both += (sp && sg) as u64;
        }
    }
    let precision = both as f64 / same_p as f64;
    let recall = both as f64 / same_g as f64;
    (split, merge, 1.0 - 2.0 * precision * recall / (precision + recall))
}

fn random_labels(rng: &mut ChaCha8Rng, shape: [usize; 3], k: u32) -> LabelVolume {
    let n = shape.iter().product();
    LabelVolume::new(shape, (0..n).map(|_| rng.random_range(0..k)).collect()).unwrap()
}

fn relabel(v: &LabelVolume, rng: &mut ChaCha8Rng) -> LabelVolume {
    let ids = v.distinct_ids();
    let mut fresh: Vec<u32> = (1..=ids.len() as u32).map(|i| i * 7919 % 100_003).collect();
    fresh.shuffle(rng);
    // keep background where it is so the foreground mask is unchanged
    let map: HashMap<u32, u32> = ids
        .iter()
        .zip(fresh)
        .map(|(&a, b)| (a, if a == 0 { 0 } else { b }))
        .collect();
    LabelVolume::new(
        v.shape(),
        v.data().iter().map(|x| map.get(x).copied().unwrap_or(0)).collect(),
    )
    .unwrap()
}

fn metric_oracles(_: &Path) -> Outcome {
    let cfg = MetricsConfig::default();
    let include = MetricsConfig {
        background: Background::Include,
        ..cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    let mut pairs = 0;
    while pairs < 200 {
        let shape = [
            rng.random_range(1..=6),
            rng.random_range(1..=6),
            rng.random_range(1..=6),
        ];
        let kp = rng.random_range(1..6);
        let pred = random_labels(&mut rng, shape, kp);
        let kg = rng.random_range(2..6);
        let gt = random_labels(&mut rng, shape, kg);
        if gt.data().iter().all(|&g| g == 0) {
            continue;
        }
        pairs += 1;
        let r = metrics::evaluate(&pred, &gt, &cfg).map_err(|e| e.to_string())?;
        let (s, m, a) = brute_force(&pred, &gt);
        worst = worst
            .max((r.voi_split - s).abs())
            .max((r.voi_merge - m).abs())
            .max((r.arand - a).abs());

        let renamed =
            metrics::evaluate(&relabel(&pred, &mut rng), &relabel(&gt, &mut rng), &cfg).map_err(|e| e.to_string())?;
        exact &= renamed == r;
        let ab = metrics::voi(&pred, &gt, &include).map_err(|e| e.to_string())?;
        let ba = metrics::voi(&gt, &pred, &include).map_err(|e| e.to_string())?;
        exact &= ab.split == ba.merge && ab.merge == ba.split;
    }
    let gt = LabelVolume::new([2, 2, 2], vec![1; 8]).unwrap();
    let pred = LabelVolume::new([2, 2, 2], vec![1, 1, 1, 1, 2, 2, 2, 2]).unwrap();
    let v = metrics::voi(&pred, &gt, &cfg).map_err(|e| e.to_string())?;
    let ln2 = v.split == std::f64::consts::LN_2 && v.merge == 0.0;
    check(
        worst < 1e-10 && exact && ln2,
        format!("max oracle error {worst:.1e} over {pairs} pairs, invariance and duality exact: {exact}, 4/4 split = ln 2: {ln2}"),
    )
}

fn refines(fine: &LabelVolume, coarse: &LabelVolume) -> bool {
    let mut owner: HashMap<u32, u32> = HashMap::new();
    fine.data()
        .iter()
        .zip(coarse.data())
        .all(|(&f, &c)| *owner.entry(f).or_insert(c) == c)
}

fn segmentation(_: &Path) -> Outcome {
    let (_, gt) = gen_phantom(11, [16, 32, 32], 5, 0.0, &PhantomConfig::default()).map_err(|e| e.to_string())?;
    let aff = affinity_from_labels(&gt);
    let result = seg::segment(&aff, &SegConfig::default()).map_err(|e| e.to_string())?;
    let report = metrics::evaluate(&result.labels, &gt, &MetricsConfig::default()).map_err(|e| e.to_string())?;
    let exact = result.num_segments() == 5 && report.voi < 0.1 && report.arand < 0.05;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noisy: Vec<f64> = aff
        .data()
        .iter()
        .map(|&a| (0.7 * a + 0.3 * rng.random::<f64>()).clamp(0.0, 1.0))
        .collect();
    let noisy = AffinityMap::new(aff.shape(), noisy).map_err(|e| e.to_string())?;
    let frags = watershed_fragments(&noisy, 0.9, 0.3).map_err(|e| e.to_string())?;
    let mut monotone = true;
    let mut counts = Vec::new();
    let mut prev: Option<LabelVolume> = None;
    for t in [0.3, 0.45, 0.6, 0.75, 0.9] {
        let s = agglomerate(&frags, &noisy, t, MergeScore::Mean).map_err(|e| e.to_string())?;
        monotone &= replay(&frags, &s.history) == s.labels;
        if let Some(p) = &prev {
            monotone &= refines(&s.labels, p);
        }
        counts.push(s.num_segments());
        prev = Some(s.labels);
    }
    check(
        exact && monotone,
        format!(
            "{} segments, VOI {:.2e}, ARAND {:.2e}; segments across thresholds {counts:?}, refinement holds: {monotone}",
            result.num_segments(),
            report.voi,
            report.arand
        ),
    )
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.shape = [8, 16, 16];
    cfg.data.train_volumes = 3;
    cfg.data.heldout_volumes = 1;
    cfg.model.embed_dim = 16;
    cfg.schedule.phase1_iters = 24;
    cfg.schedule.phase2_iters = 8;
    cfg.policy.update_period = 2;
    cfg.probe.iters = 50;
    cfg
}

fn same_bytes(a: &Path, b: &Path, file: &str) -> Result<(), String> {
    let x = fs::read(a.join(file)).map_err(|e| format!("{}: {e}", a.join(file).display()))?;
    let y = fs::read(b.join(file)).map_err(|e| format!("{}: {e}", b.join(file).display()))?;
    if x.is_empty() || x != y {
        return Err(format!("{file} differs between runs"));
    }
    Ok(())
}

fn determinism(dir: &Path) -> Outcome {
    let cfg = write_config(dir, "c9.json", &small_config());
    let mut compared = 0;
    let mut runs = Vec::new();
    for k in 0..2 {
        let root = dir.join(format!("c9_{k}"));
        let s = |p: &str| root.join(p);
        let mut stdout = Vec::new();
        cli(Some(&cfg), &["gen-data", "--out", path_str(&s("data"))])?;
        cli(Some(&cfg), &["pretrain", "--out", path_str(&s("run"))])?;
        cli(
            Some(&cfg),
            &[
                "pretrain-fixed",
                "--ratio",
                "0.5,0.85",
                "--jobs",
                "2",
                "--out",
                path_str(&s("fixed")),
            ],
        )?;
        cli(
            Some(&cfg),
            &["probe", "--run", path_str(&s("run")), "--out", path_str(&s("probe"))],
        )?;
        cli(
            Some(&cfg),
            &[
                "segment",
                "--affinity",
                path_str(&s("probe/heldout_000_aff.vol")),
                "--out",
                path_str(&s("seg/h0")),
            ],
        )?;
        stdout.push(cli(
            Some(&cfg),
            &[
                "evaluate",
                "--pred",
                path_str(&s("seg/h0.vol")),
                "--gt",
                path_str(&s("probe/heldout_000_labels.vol")),
            ],
        )?);
        stdout.push(cli(None, &["gradcheck"])?);
        cli(None, &["ratio-plot", "--run", path_str(&s("run"))])?;
        runs.push((root, stdout));
    }
    let (a, b) = (&runs[0].0, &runs[1].0);
    for file in [
        "data/train_000.vol",
        "data/heldout_000_labels.vol",
        "run/mim.jsonl",
        "run/policy.jsonl",
        "run/ratio.jsonl",
        "run/checkpoints/target.bin",
        "run/checkpoints/policy.bin",
        "fixed/ratio_0.5/mim.jsonl",
        "fixed/ratio_0.85/mim.jsonl",
        "probe/heldout_000_aff.vol",
        "seg/h0.vol",
        "seg/h0_merges.jsonl",
        "run/ratio.svg",
        "run/ratio.csv",
    ] {
        same_bytes(a, b, file)?;
        compared += 1;
    }
    let score = |root: &Path| -> Result<Value, String> {
        let v: Value = serde_json::from_slice(&fs::read(root.join("probe/probe.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        Ok(serde_json::json!([v["train_mse"], v["heldout_mse"], v["per_volume"]]))
    };
    if score(a)? != score(b)? {
        return Err("probe scores differ between runs".into());
    }
    check(
        runs[0].1 == runs[1].1,
        format!("{compared} artifacts and every subcommand's stdout byte-identical across two runs"),
    )
}

fn ratio_trajectory(dir: &Path) -> Outcome {
    let run = pretrain_run(dir);
    if !run.join("ratio.jsonl").exists() {
        let cfg = write_config(dir, "c10.json", &RunConfig::default());
        cli(Some(&cfg), &["pretrain", "--out", path_str(&run)])?;
    }
    let out = dir.join("c10_plot");
    let plot = cli_json(None, &["ratio-plot", "--run", path_str(&run), "--out", path_str(&out)])?;
    let emitted = out.join("ratio.svg").exists() && out.join("ratio.csv").exists();
    let traj = read_trajectory(&run.join("ratio.jsonl")).map_err(|e| e.to_string())?;
    let phase1 = RunConfig::default().schedule.phase1_iters;
    let (mean, std) = traj.window_before(phase1, 200);
    let (first, _) = traj.stats(0..50);
    check(
        std < 0.05 && emitted,
        format!(
            "phase-1 last-200 ratio mean {mean:.3} std {std:.4}; first-50 mean {first:.3}; end of run {:.3}; CSV+SVG emitted: {emitted}",
            plot["last_window_mean"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "gradient correctness",
            budget: Some(Duration::from_secs(120)),
            run: gradients,
        },
        Criterion {
            id: 2,
            name: "telescoping reward identity",
            budget: None,
            run: telescoping,
        },
        Criterion {
            id: 3,
            name: "uniform-policy masking ratio",
            budget: None,
            run: uniform_ratio,
        },
        Criterion {
            id: 4,
            name: "bandit policy learning",
            budget: Some(Duration::from_secs(300)),
            run: bandit_learning,
        },
        Criterion {
            id: 5,
            name: "MIM learning",
            budget: Some(Duration::from_secs(300)),
            run: mim_learning,
        },
        Criterion {
            id: 6,
            name: "transfer to affinity probe",
            budget: Some(Duration::from_secs(1800)),
            run: transfer,
        },
        Criterion {
            id: 7,
            name: "metric oracles",
            budget: None,
            run: metric_oracles,
        },
        Criterion {
            id: 8,
            name: "segmentation pipeline",
            budget: None,
            run: segmentation,
        },
        Criterion {
            id: 9,
            name: "determinism",
            budget: None,
            run: determinism,
        },
        Criterion {
            id: 10,
            name: "ratio trajectory",
            budget: None,
            run: ratio_trajectory,
        },
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let dir = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    for c in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let mut outcome = (c.run)(dir.path());
        let took = start.elapsed();
        if let (Ok(d), Some(b)) = (&outcome, c.budget) {
            if took > b {
                outcome = Err(format!("{d}; exceeded {}s budget", b.as_secs()));
            }
        }
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!(
            "{tag} criterion {:>2} {}: {detail} [{:.1}s]",
            c.id,
            c.name,
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
