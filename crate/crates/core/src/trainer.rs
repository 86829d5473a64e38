//! Two-phase pretraining: MIM steps with policy-sampled masks interleaved
//! with policy episodes, then MIM alone with the policy frozen. Also the
//! fixed-ratio baseline and the frozen-feature affinity probe.

use std::io::Write;
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mim::{random_decision, LossConfig, MaskDecision, ModelConfig, Sample, TargetModel};
use crate::nn::{self, adam_step, AdamConfig, Dense, Parameterized};
use crate::policy::{self, a2c_update, act, act_greedy, observe, PolicyConfig, PolicyParams};
use crate::seg::{affinity_from_labels, AffinityMap};
use crate::volume::{gen_phantom, patchify_with, unpatchify, LabelVolume, PatchGrid, PhantomConfig, Shape3, Volume3D};
use crate::{Error, Result};

/// Synthetic data source: training and held-out phantoms from disjoint seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub shape: Shape3,
    pub num_objects: usize,
    pub noise_sigma: f64,
    pub train_volumes: usize,
    pub heldout_volumes: usize,
    pub seed: u64,
    pub phantom: PhantomConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            shape: [16, 32, 32],
            num_objects: 6,
            noise_sigma: 0.05,
            train_volumes: 8,
            heldout_volumes: 4,
            seed: 0,
            phantom: PhantomConfig::default(),
        }
    }
}

/// A phantom and its instance labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Specimen {
    pub volume: Volume3D,
    pub labels: LabelVolume,
}

impl DataConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.num_objects == 0 {
            v.push("data.num_objects must be at least 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            v.push(format!(
                "data.noise_sigma = {} must be finite and >= 0",
                self.noise_sigma
            ));
        }
        if self.train_volumes == 0 {
            v.push("data.train_volumes must be at least 1".into());
        }
        if self.shape.contains(&0) {
            v.push(format!("data.shape {:?} has a zero extent", self.shape));
        }
        v
    }

    fn volume_seed(&self, split: u64, k: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(split * 100_000 + k as u64)
    }

    pub fn specimen(&self, seed: u64) -> Result<Specimen> {
        let (volume, labels) = gen_phantom(seed, self.shape, self.num_objects, self.noise_sigma, &self.phantom)?;
        Ok(Specimen { volume, labels })
    }

    pub fn train_set(&self) -> Result<Vec<Specimen>> {
        (0..self.train_volumes)
            .map(|k| self.specimen(self.volume_seed(0, k)))
            .collect()
    }

    pub fn heldout_set(&self) -> Result<Vec<Specimen>> {
        (0..self.heldout_volumes)
            .map(|k| self.specimen(self.volume_seed(1, k)))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Schedule {
    /// Joint MIM and policy iterations.
    pub phase1_iters: usize,
    /// MIM-only iterations with the policy frozen.
    pub phase2_iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub mim_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            phase1_iters: 2000,
            phase2_iters: 2000,
            batch: 2,
            seed: 0,
            mim_lr: 1e-3,
        }
    }
}

impl Schedule {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch == 0 {
            v.push("schedule.batch must be at least 1".into());
        }
        if !(self.mim_lr >= 0.0 && self.mim_lr.is_finite()) {
            v.push("schedule.mim_lr must be finite and >= 0".into());
        }
        v
    }

    pub fn total_iters(&self) -> usize {
        self.phase1_iters + self.phase2_iters
    }
}

/// Everything pretraining needs besides the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub policy: PolicyConfig,
    pub schedule: Schedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MimRecord {
    pub iter: usize,
    #[serde(rename = "L_MSE")]
    pub l_mse: f64,
    #[serde(rename = "L_HOG")]
    pub l_hog: f64,
    #[serde(rename = "L_pretrain")]
    pub l_pretrain: f64,
    pub masking_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub iter: usize,
    pub r_mean: f64,
    #[serde(rename = "R_mean")]
    pub big_r_mean: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub masking_ratio: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub iter: usize,
    pub masking_ratio: f64,
}

/// Masking ratio logged once per MIM iteration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioTrajectory {
    pub points: Vec<RatioPoint>,
}

impl RatioTrajectory {
    pub fn push(&mut self, iter: usize, masking_ratio: f64) {
        self.points.push(RatioPoint { iter, masking_ratio });
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean and population std of the ratios in `range`.
    pub fn stats(&self, range: std::ops::Range<usize>) -> (f64, f64) {
        let r: Vec<f64> = self.points[range].iter().map(|p| p.masking_ratio).collect();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Stats of the last `window` points before index `end`.
    pub fn window_before(&self, end: usize, window: usize) -> (f64, f64) {
        self.stats(end.saturating_sub(window)..end)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,masking_ratio\n");
        for p in &self.points {
            s.push_str(&format!("{},{}\n", p.iter, p.masking_ratio));
        }
        s
    }
}

pub struct PretrainOutcome {
    pub model: TargetModel,
    pub policy: PolicyParams,
    pub trajectory: RatioTrajectory,
    pub mim_log: Vec<MimRecord>,
    pub policy_log: Vec<PolicyRecord>,
}

fn batch_indices(iter: usize, batch: usize, len: usize) -> Vec<usize> {
    (0..batch).map(|b| (iter * batch + b) % len).collect()
}

fn check_samples(samples: &[Sample]) -> Result<&PatchGrid> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training volumes".into()))?;
    if let Some(s) = samples.iter().find(|s| s.grid != first.grid) {
        return Err(Error::Shape(format!(
            "training volumes disagree in shape: {:?} vs {:?}",
            first.grid.volume_shape, s.grid.volume_shape
        )));
    }
    Ok(&first.grid)
}

pub fn prepare(specimens: &[Specimen], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    specimens.iter().map(|s| Sample::from_volume(&s.volume, cfg)).collect()
}

/// Decision-based pretraining. Every iteration draws one mask per batch
/// volume from the current policy and takes one MIM step; during phase 1 a
/// policy episode against a snapshot of the target network follows every
/// `policy.update_period` iterations.
pub fn pretrain(samples: &[Sample], cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let grid = check_samples(samples)?;
    cfg.loss.validate()?;
    let mut model = TargetModel::new(grid, &cfg.model, cfg.schedule.seed)?;
    let mut pol = PolicyParams::new(
        cfg.model.embed_dim,
        cfg.policy.hidden,
        cfg.schedule.seed.wrapping_add(1),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed.wrapping_add(2));
    let mim_adam = AdamConfig::with_lr(cfg.schedule.mim_lr);
    let pol_adam = AdamConfig::with_lr(cfg.policy.lr);
    let mut out = PretrainOutcome {
        model: model.clone(),
        policy: pol.clone(),
        trajectory: RatioTrajectory::default(),
        mim_log: Vec::new(),
        policy_log: Vec::new(),
    };
    for iter in 0..cfg.schedule.total_iters() {
        let idx = batch_indices(iter, cfg.schedule.batch, samples.len());
        let mut decisions = Vec::with_capacity(idx.len());
        for &i in &idx {
            let state = observe(&model, &samples[i])?;
            let a = if cfg.policy.greedy {
                act_greedy(&pol, &state)
            } else {
                act(&pol, &state, &mut rng)
            };
            decisions.push(a.decision);
        }
        let ratio = decisions.iter().map(MaskDecision::masking_ratio).sum::<f64>() / decisions.len() as f64;
        let batch: Vec<(&Sample, &MaskDecision)> = idx.iter().map(|&i| &samples[i]).zip(&decisions).collect();
        let rep = model.train_step(&batch, &cfg.loss, &mim_adam)?;
        out.mim_log.push(MimRecord {
            iter,
            l_mse: rep.mse,
            l_hog: rep.hog,
            l_pretrain: rep.total,
            masking_ratio: ratio,
        });
        out.trajectory.push(iter, ratio);

        if iter < cfg.schedule.phase1_iters && (iter + 1) % cfg.policy.update_period == 0 {
            let vols: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let ep = policy::run_episode(&pol, &model, &vols, &cfg.policy, &cfg.loss, &mut rng)?;
            let rep = a2c_update(&mut pol, &ep.transitions, cfg.policy.entropy_coef, &pol_adam)?;
            out.policy_log.push(PolicyRecord {
                iter,
                r_mean: ep.mean_reward,
                big_r_mean: ep.mean_return,
                critic_loss: rep.critic_loss,
                actor_loss: rep.actor_loss,
                masking_ratio: ep.masking_ratio,
            });
        }
    }
    out.model = model;
    out.policy = pol;
    Ok(out)
}

/// Masked patch count for a fixed ratio: `round(ratio·n)` clamped to `[1, n−1]`.
pub fn fixed_masked_count(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "masking ratio {ratio} must lie in (0, 1)"
        )));
    }
    if n < 2 {
        return Err(Error::DegenerateMask { masked: 0, total: n });
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n - 1))
}

/// MAE baseline with uniformly random masks at a fixed ratio.
pub fn fixed_ratio_pretrain(
    samples: &[Sample],
    ratio: f64,
    iters: usize,
    cfg: &TrainConfig,
) -> Result<(TargetModel, Vec<MimRecord>)> {
    let grid = check_samples(samples)?;
    cfg.loss.validate()?;
    let n = grid.num_patches();
    let k = fixed_masked_count(ratio, n)?;
    let mut model = TargetModel::new(grid, &cfg.model, cfg.schedule.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed.wrapping_add(2));
    let adam = AdamConfig::with_lr(cfg.schedule.mim_lr);
    let mut log = Vec::with_capacity(iters);
    for iter in 0..iters {
        let idx = batch_indices(iter, cfg.schedule.batch, samples.len());
        let decisions: Vec<MaskDecision> = idx.iter().map(|_| random_decision(n, k, &mut rng)).collect();
        let batch: Vec<(&Sample, &MaskDecision)> = idx.iter().map(|&i| &samples[i]).zip(&decisions).collect();
        let rep = model.train_step(&batch, &cfg.loss, &adam)?;
        log.push(MimRecord {
            iter,
            l_mse: rep.mse,
            l_hog: rep.hog,
            l_pretrain: rep.total,
            masking_ratio: k as f64 / n as f64,
        });
    }
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Final encoder activations with every patch visible.
    Encoder,
    /// Final decoder activations with every patch visible.
    Decoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub iters: usize,
    pub lr: f64,
    pub features: FeatureSource,
    /// Standardize each feature with training-set statistics before the dense map.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            lr: 1e-2,
            features: FeatureSource::Encoder,
            standardize: true,
            seed: 0,
        }
    }
}

/// Linear map from one patch feature to the patch's affinities, squashed by
/// a logistic.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeHead {
    pub dense: Dense,
    pub features: FeatureSource,
    /// Per-feature shift and scale (1×E each), fixed before training; their
    /// gradients stay zero so Adam never moves them.
    pub shift: nn::Param,
    pub scale: nn::Param,
}

impl Parameterized for ProbeHead {
    fn params(&self) -> Vec<&nn::Param> {
        let mut v = self.dense.params();
        v.push(&self.shift);
        v.push(&self.scale);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut nn::Param> {
        let mut v = self.dense.params_mut();
        v.push(&mut self.shift);
        v.push(&mut self.scale);
        v
    }
}

/// Per-patch features of a frozen target network (N×E).
pub fn probe_features(model: &TargetModel, sample: &Sample, source: FeatureSource) -> Result<Array2<f64>> {
    let n = sample.grid.num_patches();
    match source {
        FeatureSource::Encoder => model.encode(&sample.patches, &(0..n).collect::<Vec<_>>()),
        FeatureSource::Decoder => Ok(model
            .forward(&sample.patches, &MaskDecision::none(n))?
            .1
            .decoded()
            .clone()),
    }
}

fn affinity_grid(grid: &PatchGrid) -> Result<PatchGrid> {
    PatchGrid::new(grid.volume_shape, 3, grid.patch_shape[1])
}

/// Ground-truth affinities arranged per patch (N × 3·patch voxels).
pub fn probe_targets(labels: &LabelVolume, grid: &PatchGrid) -> Result<Array2<f64>> {
    if labels.shape() != grid.volume_shape {
        return Err(Error::Shape(format!(
            "labels {:?} do not match volume {:?}",
            labels.shape(),
            grid.volume_shape
        )));
    }
    patchify_with(&affinity_from_labels(labels).to_volume(), &affinity_grid(grid)?)
}

impl ProbeHead {
    /// Zero-weight head with identity normalization, to load a checkpoint into.
    pub fn empty(inputs: usize, outputs: usize, features: FeatureSource) -> Self {
        Self {
            dense: Dense::zeros("probe", inputs, outputs),
            features,
            shift: nn::Param::zeros("probe.shift", 1, inputs),
            scale: nn::Param::new("probe.scale", Array2::ones((1, inputs))),
        }
    }

    fn normalize(&self, features: &Array2<f64>) -> Array2<f64> {
        (features - &self.shift.value) * &self.scale.value
    }

    pub fn forward(&self, features: &Array2<f64>) -> Array2<f64> {
        self.dense.forward(&self.normalize(features)).mapv(nn::sigmoid)
    }

    /// Mean squared error of the logistic outputs against `targets`.
    pub fn mse(&self, features: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let y = self.forward(features);
        (&y - targets).iter().map(|d| d * d).sum::<f64>() / y.len() as f64
    }

    /// [`ProbeHead::mse`], accumulating gradients of the dense map.
    pub fn accumulate_mse_grad(&mut self, features: &Array2<f64>, targets: &Array2<f64>) -> f64 {
        let x = self.normalize(features);
        self.accumulate_normalized(&x, targets)
    }

    fn accumulate_normalized(&mut self, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let y = self.dense.forward(x).mapv(nn::sigmoid);
        let diff = &y - target;
        let count = diff.len() as f64;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let dz = ndarray::Zip::from(&diff)
            .and(&y)
            .map_collect(|&d, &s| 2.0 * d * s * (1.0 - s) / count);
        self.dense.accumulate(x, &dz);
        mse
    }
}

fn stack(parts: Vec<Array2<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

pub fn fit_probe(features: &Array2<f64>, targets: &Array2<f64>, cfg: &ProbeConfig) -> Result<ProbeHead> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let e = features.ncols();
    let (mut shift, mut scale) = (Array2::zeros((1, e)), Array2::ones((1, e)));
    if cfg.standardize {
        for j in 0..e {
            let col = features.column(j);
            let mean = col.mean().unwrap_or(0.0);
            let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
            shift[[0, j]] = mean;
            // constant features are centered and left unscaled
            scale[[0, j]] = if std > 1e-12 { 1.0 / std } else { 1.0 };
        }
    }
    let mut head = ProbeHead {
        dense: Dense::new("probe", e, targets.ncols(), &mut rng),
        features: cfg.features,
        shift: nn::Param::new("probe.shift", shift),
        scale: nn::Param::new("probe.scale", scale),
    };
    let x = head.normalize(features);
    let adam = AdamConfig::with_lr(cfg.lr);
    for _ in 0..cfg.iters {
        head.zero_grad();
        head.accumulate_normalized(&x, targets);
        adam_step(&mut head, &adam)?;
    }
    Ok(head)
}

/// Full-batch Adam on the squared affinity error over all training patches.
pub fn probe_train(model: &TargetModel, data: &[(&Sample, &LabelVolume)], cfg: &ProbeConfig) -> Result<ProbeHead> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("probe needs at least one labeled volume".into()));
    }
    let mut xs = Vec::with_capacity(data.len());
    let mut ys = Vec::with_capacity(data.len());
    for (s, l) in data {
        xs.push(probe_features(model, s, cfg.features)?);
        ys.push(probe_targets(l, &s.grid)?);
    }
    fit_probe(&stack(xs)?, &stack(ys)?, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeEval {
    pub mse: f64,
    pub affinities: AffinityMap,
}

pub fn probe_eval(model: &TargetModel, head: &ProbeHead, sample: &Sample, labels: &LabelVolume) -> Result<ProbeEval> {
    let x = probe_features(model, sample, head.features)?;
    if x.ncols() != head.dense.inputs() {
        return Err(Error::Shape(format!(
            "probe expects {} features, model gives {}",
            head.dense.inputs(),
            x.ncols()
        )));
    }
    let target = probe_targets(labels, &sample.grid)?;
    let y = head.forward(&x);
    let mse = head.mse(&x, &target);
    let affinities = AffinityMap::from_volume(&unpatchify(&y, &affinity_grid(&sample.grid)?)?)?;
    Ok(ProbeEval { mse, affinities })
}

/// Mean held-out probe MSE.
pub fn probe_score(model: &TargetModel, head: &ProbeHead, data: &[(&Sample, &LabelVolume)]) -> Result<f64> {
    let mut total = 0.0;
    for (s, l) in data {
        total += probe_eval(model, head, s, l)?.mse;
    }
    Ok(total / data.len() as f64)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
