//! Slice-wise histogram of oriented gradients used as an auxiliary
//! reconstruction target.
//!
//! Each axial slice of a patch is one cell. In-plane gradients use central
//! differences with replicated borders; each voxel votes its weight into the
//! two orientation bins whose centers bracket its orientation, and the cell
//! histogram is divided by the total cell weight. A cell with zero total
//! weight yields the all-zero descriptor.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::volume::{PatchGrid, Shape3};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `w(x) = |∇I(x)|`
    Magnitude,
    /// Every voxel with a nonzero gradient votes with weight 1.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HogConfig {
    pub num_bins: usize,
    pub weighting: Weighting,
    /// Bins cover `[0, 2π)` when set, `[0, π)` otherwise.
    pub signed: bool,
}

impl Default for HogConfig {
    fn default() -> Self {
        Self {
            num_bins: 9,
            weighting: Weighting::Magnitude,
            signed: false,
        }
    }
}

impl HogConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            return Err(Error::InvalidArgument(format!(
                "HOG needs at least 2 bins, got {}",
                self.num_bins
            )));
        }
        Ok(())
    }

    fn range(&self) -> f64 {
        if self.signed {
            2.0 * std::f64::consts::PI
        } else {
            std::f64::consts::PI
        }
    }

    /// Folds `atan2` output into `[0, range)`.
    pub fn fold(&self, theta: f64) -> f64 {
        let r = self.range();
        let mut t = theta.rem_euclid(r);
        if t >= r {
            t = 0.0;
        }
        t
    }
}

/// Normalized histogram of one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HogDescriptor(pub Vec<f64>);

impl HogDescriptor {
    pub fn bins(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Mean over channels of one voxel in a flattened patch.
fn intensity(patch: &[f64], channels: usize, k: usize) -> f64 {
    let s = &patch[k * channels..(k + 1) * channels];
    s.iter().sum::<f64>() / channels as f64
}

/// Descriptors for each axial slice of a flattened `(dz, dy, dx, c)` patch.
pub fn hog_patch(patch: &[f64], patch_shape: Shape3, channels: usize, cfg: &HogConfig) -> Result<Vec<HogDescriptor>> {
    cfg.validate()?;
    let [pd, ph, pw] = patch_shape;
    let expected = pd * ph * pw * channels;
    if patch.len() != expected {
        return Err(Error::Length {
            what: "HOG patch".into(),
            expected,
            actual: patch.len(),
        });
    }
    let b = cfg.num_bins;
    let width = cfg.range() / b as f64;
    let mut out = Vec::with_capacity(pd);
    for z in 0..pd {
        let at = |y: usize, x: usize| intensity(patch, channels, (z * ph + y) * pw + x);
        let mut hist = vec![0.0; b];
        let mut total = 0.0;
        for y in 0..ph {
            for x in 0..pw {
                let gx = (at(y, (x + 1).min(pw - 1)) - at(y, x.saturating_sub(1))) / 2.0;
                let gy = (at((y + 1).min(ph - 1), x) - at(y.saturating_sub(1), x)) / 2.0;
                let mag = gx.hypot(gy);
                if mag == 0.0 {
                    continue;
                }
                let w = match cfg.weighting {
                    Weighting::Magnitude => mag,
                    Weighting::Uniform => 1.0,
                };
                let u = cfg.fold(gy.atan2(gx)) / width;
                let lo = u.floor();
                let frac = u - lo;
                let lo = (lo as usize) % b;
                hist[lo] += w * (1.0 - frac);
                hist[(lo + 1) % b] += w * frac;
                total += w;
            }
        }
        if total > 0.0 {
            for h in &mut hist {
                *h /= total;
            }
        }
        out.push(HogDescriptor(hist));
    }
    Ok(out)
}

/// Per-patch concatenated descriptors: an `(N, (P/4)·B)` regression target.
pub fn hog_target(patches: &Array2<f64>, grid: &PatchGrid, cfg: &HogConfig) -> Result<Array2<f64>> {
    cfg.validate()?;
    let width = grid.patch_shape[0] * cfg.num_bins;
    let mut out = Array2::zeros((patches.nrows(), width));
    for (i, row) in patches.rows().into_iter().enumerate() {
        let row = row.to_vec();
        let descs = hog_patch(&row, grid.patch_shape, grid.channels, cfg)?;
        for (j, v) in descs.iter().flat_map(|d| d.0.iter()).enumerate() {
            out[[i, j]] = *v;
        }
    }
    Ok(out)
}

/// Length of one patch's HOG target.
pub fn target_len(grid: &PatchGrid, cfg: &HogConfig) -> usize {
    grid.patch_shape[0] * cfg.num_bins
}
