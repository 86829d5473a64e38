//! Masked autoencoder target network.
//!
//! The encoder embeds only visible patches (plus their positional
//! embeddings) and runs a stack of permutation-equivariant mixing layers.
//! The decoder receives all `N` slots in patch order: encoder outputs at
//! visible slots, the learned mask token at masked slots, each plus its
//! positional embedding. Two linear heads predict voxels and HOG descriptors
//! for every patch; the loss is taken over masked patches only.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::hog::{self, HogConfig};
use crate::nn::{self, adam_step, AdamConfig, Dense, Param, Parameterized};
use crate::volume::{patchify, PatchGrid, Volume3D};
use crate::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub hog: HogConfig,
    /// Std of the positional embedding and mask token initialization.
    pub embed_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            enc_depth: 2,
            dec_depth: 2,
            hog: HogConfig::default(),
            embed_init_std: 0.02,
        }
    }
}

/// Which patches are masked (`true`) for one volume.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskDecision(pub Vec<bool>);

impl MaskDecision {
    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn from_masked(n: usize, masked: &[usize]) -> Self {
        let mut d = vec![false; n];
        for &i in masked {
            d[i] = true;
        }
        Self(d)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_masked(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }

    pub fn masking_ratio(&self) -> f64 {
        self.num_masked() as f64 / self.len() as f64
    }

    pub fn visible(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.0[i]).collect()
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.0[i]).collect()
    }

    /// Training needs at least one masked and one visible patch.
    pub fn is_trainable(&self) -> bool {
        let m = self.num_masked();
        m >= 1 && m < self.len()
    }

    pub fn check_trainable(&self) -> Result<()> {
        if self.is_trainable() {
            Ok(())
        } else {
            Err(Error::DegenerateMask {
                masked: self.num_masked(),
                total: self.len(),
            })
        }
    }
}

/// `h'_i = tanh(h_i·W_own + mean(h)·W_pool + b)`
#[derive(Clone, Debug, PartialEq)]
pub struct MixingLayer {
    pub own: Param,
    pub pooled: Param,
    pub bias: Param,
}

/// Activations recorded by [`MixingLayer::forward`].
#[derive(Clone, Debug)]
pub struct MixingCache {
    input: Array2<f64>,
    mean: Array2<f64>,
    output: Array2<f64>,
}

impl MixingCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl MixingLayer {
    pub fn new(name: &str, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            own: Param::glorot(format!("{name}.own"), dim, dim, rng),
            pooled: Param::glorot(format!("{name}.pooled"), dim, dim, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn zeros(name: &str, dim: usize) -> Self {
        Self {
            own: Param::zeros(format!("{name}.own"), dim, dim),
            pooled: Param::zeros(format!("{name}.pooled"), dim, dim),
            bias: Param::zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, h: &Array2<f64>) -> MixingCache {
        let mean = nn::meanpool_forward(h);
        let shared = mean.dot(&self.pooled.value) + &self.bias.value;
        let output = nn::tanh_forward(&(h.dot(&self.own.value) + &shared));
        MixingCache {
            input: h.clone(),
            mean,
            output,
        }
    }

    pub fn backward(&mut self, cache: &MixingCache, dy: &Array2<f64>) -> Array2<f64> {
        let du = nn::tanh_backward(&cache.output, dy);
        let du_sum = du.sum_axis(Axis(0)).insert_axis(Axis(0));
        ndarray::linalg::general_mat_mul(1.0, &cache.input.t(), &du, 1.0, &mut self.own.grad);
        ndarray::linalg::general_mat_mul(1.0, &cache.mean.t(), &du_sum, 1.0, &mut self.pooled.grad);
        self.bias.grad += &du_sum;
        let via_pool = du_sum.dot(&self.pooled.value.t());
        du.dot(&self.own.value.t()) + &nn::meanpool_backward(&via_pool, cache.input.nrows())
    }
}

impl Parameterized for MixingLayer {
    fn params(&self) -> Vec<&Param> {
        vec![&self.own, &self.pooled, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.own, &mut self.pooled, &mut self.bias]
    }
}

/// A volume prepared for MIM: patches, grid and HOG regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub patches: Array2<f64>,
    pub hog_targets: Array2<f64>,
    pub grid: PatchGrid,
}

impl Sample {
    pub fn from_volume(vol: &Volume3D, cfg: &ModelConfig) -> Result<Self> {
        let (patches, grid) = patchify(vol, cfg.patch_size)?;
        let hog_targets = hog::hog_target(&patches, &grid, &cfg.hog)?;
        Ok(Self {
            patches,
            hog_targets,
            grid,
        })
    }
}

/// Per-patch outputs of the two heads, rows in patch order.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub voxels: Array2<f64>,
    pub hog: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache {
    visible: Vec<usize>,
    masked: Vec<usize>,
    visible_patches: Array2<f64>,
    encoder: Vec<MixingCache>,
    decoder: Vec<MixingCache>,
    decoded: Array2<f64>,
}

impl ForwardCache {
    /// Final encoder activations, one row per visible patch.
    pub fn encoded(&self) -> &Array2<f64> {
        self.encoder
            .last()
            .map(|c| c.output())
            .expect("encoder has at least one layer")
    }

    /// Final decoder activations for all `N` slots.
    pub fn decoded(&self) -> &Array2<f64> {
        &self.decoded
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_mse: f64,
    pub lambda_hog: f64,
    pub enable_mse: bool,
    pub enable_hog: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_mse: 0.1,
            lambda_hog: 1.0,
            enable_mse: true,
            enable_hog: true,
        }
    }
}

impl LossConfig {
    pub fn mse_weight(&self) -> f64 {
        if self.enable_mse {
            self.lambda_mse
        } else {
            0.0
        }
    }

    pub fn hog_weight(&self) -> f64 {
        if self.enable_hog {
            self.lambda_hog
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_mse >= 0.0 && self.lambda_hog >= 0.0) {
            return Err(Error::InvalidArgument("loss weights must be >= 0".into()));
        }
        if !self.enable_mse && !self.enable_hog {
            return Err(Error::InvalidArgument(
                "at least one of MSE and HOG losses must be enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub mse: f64,
    pub hog: f64,
    pub total: f64,
}

impl LossReport {
    pub fn scaled(self, s: f64) -> Self {
        Self {
            mse: self.mse * s,
            hog: self.hog * s,
            total: self.total * s,
        }
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            mse: self.mse + o.mse,
            hog: self.hog + o.hog,
            total: self.total + o.total,
        }
    }

    pub fn zero() -> Self {
        Self {
            mse: 0.0,
            hog: 0.0,
            total: 0.0,
        }
    }
}

/// Output gradients of the loss with respect to both heads.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub voxels: Array2<f64>,
    pub hog: Array2<f64>,
}

/// Masked-patch MSE on voxels and HOG descriptors combined as
/// `λ₁·L_MSE + λ₂·L_HOG`.
pub fn mim_loss(
    pred: &Prediction,
    patches: &Array2<f64>,
    hog_targets: &Array2<f64>,
    decision: &MaskDecision,
    cfg: &LossConfig,
) -> Result<LossReport> {
    mim_loss_with_grad(pred, patches, hog_targets, decision, cfg).map(|(r, _)| r)
}

pub fn mim_loss_with_grad(
    pred: &Prediction,
    patches: &Array2<f64>,
    hog_targets: &Array2<f64>,
    decision: &MaskDecision,
    cfg: &LossConfig,
) -> Result<(LossReport, LossGrad)> {
    if pred.voxels.dim() != patches.dim() || pred.hog.dim() != hog_targets.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?}/{:?} vs targets {:?}/{:?}",
            pred.voxels.dim(),
            pred.hog.dim(),
            patches.dim(),
            hog_targets.dim()
        )));
    }
    if decision.len() != patches.nrows() {
        return Err(Error::Length {
            what: "mask decision".into(),
            expected: patches.nrows(),
            actual: decision.len(),
        });
    }
    let masked = decision.masked();
    if masked.is_empty() {
        return Err(Error::DegenerateMask {
            masked: 0,
            total: decision.len(),
        });
    }
    let (wm, wh) = (cfg.mse_weight(), cfg.hog_weight());
    let vox_norm = (masked.len() * patches.ncols()) as f64;
    let hog_norm = (masked.len() * hog_targets.ncols().max(1)) as f64;
    let mut gv = Array2::zeros(patches.dim());
    let mut gh = Array2::zeros(hog_targets.dim());
    let (mut mse, mut hog) = (0.0, 0.0);
    for &i in &masked {
        for ((g, &p), &t) in gv.row_mut(i).iter_mut().zip(pred.voxels.row(i)).zip(patches.row(i)) {
            let e = p - t;
            mse += e * e;
            *g = wm * 2.0 * e / vox_norm;
        }
        for ((g, &p), &t) in gh.row_mut(i).iter_mut().zip(pred.hog.row(i)).zip(hog_targets.row(i)) {
            let e = p - t;
            hog += e * e;
            *g = wh * 2.0 * e / hog_norm;
        }
    }
    mse /= vox_norm;
    hog /= hog_norm;
    let report = LossReport {
        mse,
        hog,
        total: wm * mse + wh * hog,
    };
    Ok((report, LossGrad { voxels: gv, hog: gh }))
}

/// The target network.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetModel {
    pub config: ModelConfig,
    num_patches: usize,
    pub embed: Dense,
    pub pos: Param,
    pub encoder: Vec<MixingLayer>,
    pub mask_token: Param,
    pub decoder: Vec<MixingLayer>,
    pub voxel_head: Dense,
    pub hog_head: Dense,
}

impl TargetModel {
    /// Randomly initialized model for volumes partitioned by `grid`.
    pub fn new(grid: &PatchGrid, config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.embed_dim == 0 || config.enc_depth == 0 {
            return Err(Error::InvalidArgument(
                "embed_dim and enc_depth must be at least 1".into(),
            ));
        }
        config.hog.validate()?;
        let patch_len = grid.patch_len();
        let hog_len = hog::target_len(grid, &config.hog);
        let n = grid.num_patches();
        let e = config.embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal =
            Normal::new(0.0, config.embed_init_std.max(0.0)).map_err(|err| Error::InvalidArgument(err.to_string()))?;
        let embed = Dense::new("embed", patch_len, e, &mut rng);
        let pos = Param::new("pos", Array2::from_shape_fn((n, e), |_| normal.sample(&mut rng)));
        let encoder = (0..config.enc_depth)
            .map(|l| MixingLayer::new(&format!("enc{l}"), e, &mut rng))
            .collect();
        let mask_token = Param::new("mask_token", Array2::from_shape_fn((1, e), |_| normal.sample(&mut rng)));
        let decoder = (0..config.dec_depth)
            .map(|l| MixingLayer::new(&format!("dec{l}"), e, &mut rng))
            .collect();
        let voxel_head = Dense::new("voxel_head", e, patch_len, &mut rng);
        let hog_head = Dense::new("hog_head", e, hog_len, &mut rng);
        Ok(Self {
            config: config.clone(),
            num_patches: n,
            embed,
            pos,
            encoder,
            mask_token,
            decoder,
            voxel_head,
            hog_head,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn check_patches(&self, patches: &Array2<f64>) -> Result<()> {
        if patches.nrows() != self.num_patches || patches.ncols() != self.embed.inputs() {
            return Err(Error::Shape(format!(
                "patches {:?} do not match model ({}, {})",
                patches.dim(),
                self.num_patches,
                self.embed.inputs()
            )));
        }
        Ok(())
    }

    fn encode_cached(&self, patches: &Array2<f64>, visible: &[usize]) -> (Array2<f64>, Vec<MixingCache>) {
        let xv = patches.select(Axis(0), visible);
        let mut h = self.embed.forward(&xv) + &self.pos.value.select(Axis(0), visible);
        let mut caches = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let c = layer.forward(&h);
            h = c.output.clone();
            caches.push(c);
        }
        (xv, caches)
    }

    /// Encoder features for the listed visible patches, in the listed order.
    pub fn encode(&self, patches: &Array2<f64>, visible: &[usize]) -> Result<Array2<f64>> {
        self.check_patches(patches)?;
        if visible.is_empty() {
            return Err(Error::DegenerateMask {
                masked: self.num_patches,
                total: self.num_patches,
            });
        }
        let (_, caches) = self.encode_cached(patches, visible);
        Ok(caches.last().expect("enc_depth >= 1").output.clone())
    }

    /// Forward pass recording activations. Any decision with at least one
    /// visible patch is accepted; use [`MaskDecision::check_trainable`]
    /// before training.
    pub fn forward(&self, patches: &Array2<f64>, decision: &MaskDecision) -> Result<(Prediction, ForwardCache)> {
        self.check_patches(patches)?;
        if decision.len() != self.num_patches {
            return Err(Error::Length {
                what: "mask decision".into(),
                expected: self.num_patches,
                actual: decision.len(),
            });
        }
        let visible = decision.visible();
        let masked = decision.masked();
        if visible.is_empty() {
            return Err(Error::DegenerateMask {
                masked: masked.len(),
                total: self.num_patches,
            });
        }
        let (visible_patches, encoder) = self.encode_cached(patches, &visible);
        let encoded = &encoder.last().expect("enc_depth >= 1").output;

        let mut h = self.pos.value.clone();
        for (j, &i) in visible.iter().enumerate() {
            let mut row = h.row_mut(i);
            row += &encoded.row(j);
        }
        for &i in &masked {
            let mut row = h.row_mut(i);
            row += &self.mask_token.value.row(0);
        }
        let mut decoder = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let c = layer.forward(&h);
            h = c.output.clone();
            decoder.push(c);
        }
        let pred = Prediction {
            voxels: self.voxel_head.forward(&h),
            hog: self.hog_head.forward(&h),
        };
        let cache = ForwardCache {
            visible,
            masked,
            visible_patches,
            encoder,
            decoder,
            decoded: h,
        };
        Ok((pred, cache))
    }

    pub fn predict(&self, patches: &Array2<f64>, decision: &MaskDecision) -> Result<Prediction> {
        self.forward(patches, decision).map(|(p, _)| p)
    }

    /// Accumulates parameter gradients for output gradients `grad`.
    pub fn backward(&mut self, cache: &ForwardCache, grad: &LossGrad) {
        let mut dh = self.voxel_head.backward(&cache.decoded, &grad.voxels);
        dh += &self.hog_head.backward(&cache.decoded, &grad.hog);
        for (layer, c) in self.decoder.iter_mut().zip(&cache.decoder).rev() {
            dh = layer.backward(c, &dh);
        }
        // decoder input = pos + (encoder output | mask token)
        self.pos.grad += &dh;
        let mut denc = Array2::zeros((cache.visible.len(), self.config.embed_dim));
        for (j, &i) in cache.visible.iter().enumerate() {
            denc.row_mut(j).assign(&dh.row(i));
        }
        for &i in &cache.masked {
            let mut row = self.mask_token.grad.row_mut(0);
            row += &dh.row(i);
        }
        for (layer, c) in self.encoder.iter_mut().zip(&cache.encoder).rev() {
            denc = layer.backward(c, &denc);
        }
        for (j, &i) in cache.visible.iter().enumerate() {
            let mut row = self.pos.grad.row_mut(i);
            row += &denc.row(j);
        }
        self.embed.accumulate(&cache.visible_patches, &denc);
    }

    /// Loss on one sample, without touching gradients.
    pub fn loss(&self, sample: &Sample, decision: &MaskDecision, cfg: &LossConfig) -> Result<LossReport> {
        decision.check_trainable()?;
        let pred = self.predict(&sample.patches, decision)?;
        mim_loss(&pred, &sample.patches, &sample.hog_targets, decision, cfg)
    }

    /// Forward + backward on one sample with gradients scaled by `scale`.
    pub fn accumulate_grad(
        &mut self,
        sample: &Sample,
        decision: &MaskDecision,
        cfg: &LossConfig,
        scale: f64,
    ) -> Result<LossReport> {
        decision.check_trainable()?;
        let (pred, cache) = self.forward(&sample.patches, decision)?;
        let (report, mut grad) = mim_loss_with_grad(&pred, &sample.patches, &sample.hog_targets, decision, cfg)?;
        if scale != 1.0 {
            grad.voxels *= scale;
            grad.hog *= scale;
        }
        self.backward(&cache, &grad);
        Ok(report)
    }

    /// One Adam step on the batch-mean loss; returns the mean report.
    pub fn train_step(
        &mut self,
        batch: &[(&Sample, &MaskDecision)],
        cfg: &LossConfig,
        adam: &AdamConfig,
    ) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        cfg.validate()?;
        self.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let mut total = LossReport::zero();
        for (sample, decision) in batch {
            total = total.add(self.accumulate_grad(sample, decision, cfg, scale)?.scaled(scale));
        }
        adam_step(self, adam)?;
        Ok(total)
    }
}

impl Parameterized for TargetModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.embed.params();
        v.push(&self.pos);
        for l in &self.encoder {
            v.extend(l.params());
        }
        v.push(&self.mask_token);
        for l in &self.decoder {
            v.extend(l.params());
        }
        v.extend(self.voxel_head.params());
        v.extend(self.hog_head.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.embed.params_mut();
        v.push(&mut self.pos);
        for l in &mut self.encoder {
            v.extend(l.params_mut());
        }
        v.push(&mut self.mask_token);
        for l in &mut self.decoder {
            v.extend(l.params_mut());
        }
        v.extend(self.voxel_head.params_mut());
        v.extend(self.hog_head.params_mut());
        v
    }
}

/// Uniformly random decision with exactly `masked` masked patches.
pub fn random_decision<R: rand::Rng>(n: usize, masked: usize, rng: &mut R) -> MaskDecision {
    let idx = rand::seq::index::sample(rng, n, masked.min(n));
    MaskDecision::from_masked(n, &idx.into_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradcheck, GradcheckConfig};
    use crate::volume::{gen_phantom, PhantomConfig};
    use rand::Rng;

    fn small_config() -> ModelConfig {
        ModelConfig {
            patch_size: 8,
            embed_dim: 6,
            enc_depth: 2,
            dec_depth: 2,
            hog: HogConfig::default(),
            embed_init_std: 0.3,
        }
    }

    fn small_sample(seed: u64) -> Sample {
        let (vol, _) = gen_phantom(seed, [2, 16, 16], 2, 0.05, &PhantomConfig::default()).unwrap();
        Sample::from_volume(&vol, &small_config()).unwrap()
    }

    #[test]
    fn single_token_mixing_reduces_to_summed_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = MixingLayer::new("m", 4, &mut rng);
        layer.bias.value = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0));
        let h = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0));
        let out = layer.forward(&h).output;
        let expected = nn::tanh_forward(&(h.dot(&(&layer.own.value + &layer.pooled.value)) + &layer.bias.value));
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn mixing_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = MixingLayer::new("m", 5, &mut rng);
        let h = Array2::from_shape_fn((7, 5), |_| rng.random_range(-1.0..1.0));
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let a = layer.forward(&h).output.select(Axis(0), &perm);
        let b = layer.forward(&h.select(Axis(0), &perm)).output;
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
        assert!(MixingLayer::zeros("z", 5).forward(&h).output.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mixing_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = MixingLayer::new("m", 3, &mut rng);
        let h = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let w = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let cache = layer.forward(&h);
        let dh = layer.backward(&cache, &w);
        let eps = 1e-6;
        for idx in ndarray::indices_of(&h) {
            let mut hp = h.clone();
            hp[idx] += eps;
            let mut hm = h.clone();
            hm[idx] -= eps;
            let n = ((layer.forward(&hp).output * &w).sum() - (layer.forward(&hm).output * &w).sum()) / (2.0 * eps);
            assert!((n - dh[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_ratio_uses_all_tokens_and_no_mask_token() {
        let s = small_sample(1);
        let m = TargetModel::new(&s.grid, &small_config(), 0).unwrap();
        let (pred, cache) = m
            .forward(&s.patches, &MaskDecision::none(s.grid.num_patches()))
            .unwrap();
        assert_eq!(cache.encoded().nrows(), s.grid.num_patches());
        assert!(cache.masked.is_empty());
        assert_eq!(pred.voxels.dim(), s.patches.dim());
        let all = MaskDecision(vec![true; s.grid.num_patches()]);
        assert!(m.forward(&s.patches, &all).is_err());
        assert!(m
            .loss(&s, &MaskDecision::none(s.grid.num_patches()), &LossConfig::default())
            .is_err());
    }

    #[test]
    fn head_shapes_do_not_depend_on_embed_dim() {
        let s = small_sample(1);
        let mut cfg = small_config();
        let d = MaskDecision::from_masked(s.grid.num_patches(), &[1]);
        let a = TargetModel::new(&s.grid, &cfg, 0)
            .unwrap()
            .predict(&s.patches, &d)
            .unwrap();
        cfg.embed_dim *= 2;
        let b = TargetModel::new(&s.grid, &cfg, 0)
            .unwrap()
            .predict(&s.patches, &d)
            .unwrap();
        assert_eq!(a.voxels.dim(), b.voxels.dim());
        assert_eq!(a.hog.dim(), b.hog.dim());
        assert_eq!(a.voxels.dim(), (s.grid.num_patches(), s.grid.patch_len()));
    }

    #[test]
    fn encoder_ignores_masked_voxels() {
        let s = small_sample(2);
        let m = TargetModel::new(&s.grid, &small_config(), 0).unwrap();
        let d = MaskDecision::from_masked(s.grid.num_patches(), &[0, 2]);
        let (p1, c1) = m.forward(&s.patches, &d).unwrap();
        let mut other = s.patches.clone();
        other.row_mut(0).fill(0.9);
        other.row_mut(2).mapv_inplace(|v| 1.0 - v);
        let (p2, c2) = m.forward(&other, &d).unwrap();
        assert_eq!(c1.encoded(), c2.encoded());
        assert_eq!(p1, p2);

        // with targets held fixed, every gradient is blind to masked input voxels
        let cfg = LossConfig::default();
        let grads = |input: &Array2<f64>| {
            let mut mm = m.clone();
            let (pred, cache) = mm.forward(input, &d).unwrap();
            let (_, g) = mim_loss_with_grad(&pred, &s.patches, &s.hog_targets, &d, &cfg).unwrap();
            mm.backward(&cache, &g);
            mm.params().iter().map(|p| p.grad.clone()).collect::<Vec<_>>()
        };
        assert_eq!(grads(&s.patches), grads(&other));
    }

    #[test]
    fn flipping_a_bit_never_reorders_outputs() {
        let s = small_sample(3);
        let m = TargetModel::new(&s.grid, &small_config(), 4).unwrap();
        let n = s.grid.num_patches();
        let a = MaskDecision::from_masked(n, &[1]);
        let b = MaskDecision::from_masked(n, &[1, 3]);
        let (_, ca) = m.forward(&s.patches, &a).unwrap();
        let (_, cb) = m.forward(&s.patches, &b).unwrap();
        assert_eq!(ca.decoded().nrows(), n);
        assert_eq!(cb.decoded().nrows(), n);
        assert_eq!(cb.masked, vec![1, 3]);
        assert_eq!(ca.visible, vec![0, 2, 3]);
    }

    #[test]
    fn loss_hand_computed_two_patches() {
        let patches = ndarray::array![[1.0, 0.0], [0.5, 0.5]];
        let hog = ndarray::array![[0.2, 0.8], [1.0, 0.0]];
        let pred = Prediction {
            voxels: ndarray::array![[0.0, 0.0], [0.5, 1.5]],
            hog: ndarray::array![[0.0, 0.0], [0.5, 0.5]],
        };
        let cfg = LossConfig::default();
        let only_second = MaskDecision(vec![false, true]);
        let r = mim_loss(&pred, &patches, &hog, &only_second, &cfg).unwrap();
        // voxel errors (0, 1) → MSE 0.5; HOG errors (−0.5, 0.5) → 0.25
        assert!((r.mse - 0.5).abs() < 1e-12);
        assert!((r.hog - 0.25).abs() < 1e-12);
        assert!((r.total - (0.1 * 0.5 + 0.25)).abs() < 1e-12);

        let both = MaskDecision(vec![true, true]);
        let r = mim_loss(&pred, &patches, &hog, &both, &cfg).unwrap();
        // voxel errors (−1, 0, 0, 1) → 0.5; HOG (−0.2, −0.8, −0.5, 0.5) → 1.18/4
        assert!((r.mse - 0.5).abs() < 1e-12);
        assert!((r.hog - 1.18 / 4.0).abs() < 1e-12);

        let mse_only = LossConfig { lambda_hog: 0.0, ..cfg };
        let r = mim_loss(&pred, &patches, &hog, &both, &mse_only).unwrap();
        assert!((r.total - 0.1 * r.mse).abs() < 1e-15);

        let perfect = Prediction {
            voxels: patches.clone(),
            hog: hog.clone(),
        };
        assert_eq!(mim_loss(&perfect, &patches, &hog, &both, &cfg).unwrap().total, 0.0);
        assert!(mim_loss(&pred, &patches, &hog, &MaskDecision(vec![false, false]), &cfg).is_err());
    }

    #[test]
    fn full_model_gradcheck() {
        let s = small_sample(5);
        let mut m = TargetModel::new(&s.grid, &small_config(), 11).unwrap();
        let d = MaskDecision::from_masked(s.grid.num_patches(), &[0, 3]);
        let cfg = LossConfig::default();
        let report = gradcheck(
            &mut m,
            |m| m.accumulate_grad(&s, &d, &cfg, 1.0).unwrap().total,
            |m| m.loss(&s, &d, &cfg).unwrap().total,
            GradcheckConfig::default(),
        );
        assert!(report.max_rel_err() < 1e-6, "{report:#?}");
    }

    #[test]
    fn training_is_deterministic_and_descends() {
        let s = small_sample(6);
        let cfg = LossConfig::default();
        let adam = AdamConfig::with_lr(3e-3);
        let run = || {
            let mut m = TargetModel::new(&s.grid, &small_config(), 9).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut losses = Vec::new();
            for _ in 0..60 {
                let d = random_decision(s.grid.num_patches(), 2, &mut rng);
                losses.push(m.train_step(&[(&s, &d)], &cfg, &adam).unwrap().total);
            }
            losses
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.last().unwrap() < &a[0]);
    }
}
