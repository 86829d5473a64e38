//! Subcommand implementations. Each returns a JSON summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use maskpolicy_core::metrics::{self, MetricsReport};
use maskpolicy_core::mim::{Sample, TargetModel};
use maskpolicy_core::nn::{load_checkpoint, save_checkpoint};
use maskpolicy_core::seg::{self, AffinityMap};
use maskpolicy_core::trainer::{
    self, fixed_ratio_pretrain, prepare, pretrain, probe_eval, probe_train, write_jsonl, ProbeHead, RatioPoint,
    RatioTrajectory, Specimen,
};
use maskpolicy_core::volume::{read_volume, write_volume, PatchGrid, StoredVolume};
use serde_json::{json, Value};

use crate::checks;
use crate::config::RunConfig;
use crate::plot;

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    fs::write(dir.join("config.json"), cfg.to_json())?;
    Ok(())
}

fn write_specimens(dir: &Path, prefix: &str, specs: &[Specimen]) -> anyhow::Result<Vec<String>> {
    let mut names = Vec::new();
    for (k, s) in specs.iter().enumerate() {
        let name = format!("{prefix}_{k:03}");
        write_volume(
            &StoredVolume::Intensity(s.volume.clone()),
            &dir.join(format!("{name}.vol")),
        )?;
        write_volume(
            &StoredVolume::Labels(s.labels.clone()),
            &dir.join(format!("{name}_labels.vol")),
        )?;
        names.push(name);
    }
    Ok(names)
}

/// Writes the training and held-out phantoms with their labels.
pub fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    create_dir(out)?;
    echo_config(cfg, out)?;
    let train = write_specimens(out, "train", &cfg.data.train_set()?)?;
    let heldout = write_specimens(out, "heldout", &cfg.data.heldout_set()?)?;
    Ok(json!({ "command": "gen-data", "out": out, "train": train, "heldout": heldout }))
}

fn checkpoints(dir: &Path) -> PathBuf {
    dir.join("checkpoints")
}

fn train_samples(cfg: &RunConfig) -> anyhow::Result<(Vec<Specimen>, Vec<Sample>)> {
    let specs = cfg.data.train_set()?;
    let samples = prepare(&specs, &cfg.model)?;
    Ok((specs, samples))
}

/// Decision-based pretraining with logs and checkpoints under `out`.
pub fn pretrain_cmd(cfg: &RunConfig, out: &Path) -> anyhow::Result<Value> {
    create_dir(&checkpoints(out))?;
    echo_config(cfg, out)?;
    let (_, samples) = train_samples(cfg)?;
    let res = pretrain(&samples, &cfg.train_config())?;
    write_jsonl(&out.join("mim.jsonl"), &res.mim_log)?;
    write_jsonl(&out.join("policy.jsonl"), &res.policy_log)?;
    write_jsonl(&out.join("ratio.jsonl"), &res.trajectory.points)?;
    save_checkpoint(&res.model, &checkpoints(out).join("target"))?;
    save_checkpoint(&res.policy, &checkpoints(out).join("policy"))?;
    let t = &res.trajectory;
    let p1 = cfg.schedule.phase1_iters;
    let first = t.stats(0..t.len().min(50));
    let window = t.window_before(p1.max(1).min(t.len()), 200);
    Ok(json!({
        "command": "pretrain",
        "out": out,
        "iters": t.len(),
        "final_L_pretrain": res.mim_log.last().map(|r| r.l_pretrain),
        "ratio_first50_mean": first.0,
        "ratio_phase1_window_mean": window.0,
        "ratio_phase1_window_std": window.1,
    }))
}

fn ratio_dir(out: &Path, ratio: f64) -> PathBuf {
    out.join(format!("ratio_{ratio}"))
}

fn pretrain_fixed_one(cfg: &RunConfig, samples: &[Sample], ratio: f64, out: &Path) -> anyhow::Result<Value> {
    let dir = ratio_dir(out, ratio);
    create_dir(&checkpoints(&dir))?;
    echo_config(cfg, &dir)?;
    let (model, log) = fixed_ratio_pretrain(samples, ratio, cfg.schedule.total_iters(), &cfg.train_config())?;
    write_jsonl(&dir.join("mim.jsonl"), &log)?;
    save_checkpoint(&model, &checkpoints(&dir).join("target"))?;
    Ok(json!({
        "ratio": ratio,
        "out": dir,
        "final_L_pretrain": log.last().map(|r| r.l_pretrain),
    }))
}

/// Fixed-ratio MAE baselines, one run directory per ratio, `jobs` at a time.
pub fn pretrain_fixed(cfg: &RunConfig, out: &Path, ratios: &[f64], jobs: usize) -> anyhow::Result<Value> {
    if ratios.is_empty() {
        bail!("--ratio needs at least one value");
    }
    for &r in ratios {
        if !(r > 0.0 && r < 1.0) {
            bail!("masking ratio {r} must lie in (0, 1)");
        }
    }
    create_dir(out)?;
    let (_, samples) = train_samples(cfg)?;
    let mut runs = Vec::with_capacity(ratios.len());
    for chunk in ratios.chunks(jobs.max(1)) {
        let results: Vec<anyhow::Result<Value>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&r| {
                    let samples = &samples;
                    s.spawn(move || pretrain_fixed_one(cfg, samples, r, out))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(anyhow::anyhow!("worker panicked"))))
                .collect()
        });
        for r in results {
            runs.push(r?);
        }
    }
    Ok(json!({ "command": "pretrain-fixed", "runs": runs }))
}

fn load_target(cfg: &RunConfig, grid: &PatchGrid, run: Option<&Path>) -> anyhow::Result<TargetModel> {
    let mut model = TargetModel::new(grid, &cfg.model, cfg.schedule.seed)?;
    if let Some(run) = run {
        let base = checkpoints(run).join("target");
        load_checkpoint(&mut model, &base).with_context(|| format!("loading {}", base.display()))?;
    }
    Ok(model)
}

/// Trains the affinity probe on frozen features and evaluates it on the
/// held-out phantoms. Without a run directory the encoder is random-init.
pub fn probe_cmd(cfg: &RunConfig, run: Option<&Path>, out: &Path) -> anyhow::Result<Value> {
    create_dir(&checkpoints(out))?;
    echo_config(cfg, out)?;
    let (train, samples) = train_samples(cfg)?;
    let held = cfg.data.heldout_set()?;
    let held_samples = prepare(&held, &cfg.model)?;
    let model = load_target(cfg, &samples[0].grid, run)?;
    let data: Vec<_> = samples.iter().zip(train.iter().map(|s| &s.labels)).collect();
    let head = probe_train(&model, &data, &cfg.probe)?;
    save_checkpoint(&head, &checkpoints(out).join("probe"))?;
    let mut per_volume = Vec::new();
    let mut total = 0.0;
    for (k, (s, specimen)) in held_samples.iter().zip(&held).enumerate() {
        let ev = probe_eval(&model, &head, s, &specimen.labels)?;
        total += ev.mse;
        let name = format!("heldout_{k:03}");
        write_volume(
            &StoredVolume::Affinity(ev.affinities.to_volume()),
            &out.join(format!("{name}_aff.vol")),
        )?;
        write_volume(
            &StoredVolume::Labels(specimen.labels.clone()),
            &out.join(format!("{name}_labels.vol")),
        )?;
        per_volume.push(json!({ "name": name, "mse": ev.mse }));
    }
    let train_mse = trainer::probe_score(&model, &head, &data)?;
    let report = json!({
        "command": "probe",
        "out": out,
        "encoder": run.map_or("random-init".to_string(), |r| r.display().to_string()),
        "features": cfg.probe.features,
        "train_mse": train_mse,
        "heldout_mse": total / held.len().max(1) as f64,
        "per_volume": per_volume,
    });
    fs::write(out.join("probe.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    Ok(report)
}

/// Reloads a saved probe head for the model config and grid.
pub fn load_probe(cfg: &RunConfig, grid: &PatchGrid, dir: &Path) -> anyhow::Result<ProbeHead> {
    let mut head = ProbeHead::empty(cfg.model.embed_dim, 3 * grid.patch_len(), cfg.probe.features);
    load_checkpoint(&mut head, &checkpoints(dir).join("probe"))?;
    Ok(head)
}

fn stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("vol") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

/// Watershed plus agglomeration of one affinity volume.
pub fn segment_cmd(cfg: &RunConfig, affinity: &Path, out: &Path) -> anyhow::Result<Value> {
    let aff = AffinityMap::from_volume(&read_volume(affinity)?.into_affinity()?)?;
    let seg = seg::segment(&aff, &cfg.seg)?;
    let base = stem(out);
    if let Some(dir) = base.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_volume(&StoredVolume::Labels(seg.labels.clone()), &base.with_extension("vol"))?;
    let merges = PathBuf::from(format!("{}_merges.jsonl", base.display()));
    write_jsonl(&merges, &seg.history)?;
    Ok(json!({
        "command": "segment",
        "labels": base.with_extension("vol"),
        "merges": merges,
        "segments": seg.num_segments(),
        "num_merges": seg.history.len(),
    }))
}

/// VOI and ARAND of a predicted labeling against ground truth; optionally
/// appends a CSV row (writing the header for a new file).
pub fn evaluate_cmd(cfg: &RunConfig, pred: &Path, gt: &Path, csv: Option<&Path>) -> anyhow::Result<MetricsReport> {
    let p = read_volume(pred)?.into_labels()?;
    let g = read_volume(gt)?.into_labels()?;
    let report = metrics::evaluate(&p, &g, &cfg.metrics)?;
    if let Some(csv) = csv {
        use std::io::Write;
        let fresh = !csv.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(csv)?;
        if fresh {
            writeln!(f, "pred,gt,voi_split,voi_merge,voi,arand,voxels")?;
        }
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            pred.display(),
            gt.display(),
            report.voi_split,
            report.voi_merge,
            report.voi,
            report.arand,
            report.voxels
        )?;
    }
    Ok(report)
}

pub fn gradcheck_cmd(tol: f64) -> anyhow::Result<(bool, Value)> {
    let results = checks::run_all(tol)?;
    let passed = results.iter().all(|r| r.passed);
    let summary: Vec<Value> = results
        .iter()
        .map(|r| json!({ "name": r.name, "max_rel_err": r.max_rel_err, "passed": r.passed }))
        .collect();
    Ok((
        passed,
        json!({ "command": "gradcheck", "tolerance": tol, "passed": passed, "checks": summary }),
    ))
}

pub fn read_trajectory(path: &Path) -> anyhow::Result<RatioTrajectory> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut t = RatioTrajectory::default();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: RatioPoint = serde_json::from_str(line).with_context(|| format!("{} line {}", path.display(), i + 1))?;
        t.points.push(p);
    }
    Ok(t)
}

/// Renders `ratio.jsonl` of a run as `ratio.svg` and `ratio.csv`.
pub fn ratio_plot(run: &Path, out: &Path, window: usize) -> anyhow::Result<Value> {
    let t = read_trajectory(&run.join("ratio.jsonl"))?;
    if t.is_empty() {
        bail!("{} has no ratio points", run.join("ratio.jsonl").display());
    }
    create_dir(out)?;
    let (mean, std) = t.window_before(t.len(), window);
    let title = format!("masking ratio (last {window}: mean {mean:.3}, std {std:.3})");
    fs::write(out.join("ratio.svg"), plot::ratio_svg(&t, &title))?;
    fs::write(out.join("ratio.csv"), t.to_csv())?;
    Ok(json!({
        "command": "ratio-plot",
        "svg": out.join("ratio.svg"),
        "csv": out.join("ratio.csv"),
        "points": t.len(),
        "last_window_mean": mean,
        "last_window_std": std,
    }))
}
