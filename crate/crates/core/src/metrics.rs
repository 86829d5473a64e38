//! Split/merge variation of information and adapted Rand error.
//!
//! Both metrics are computed from the contingency table of ground-truth and
//! predicted labels. Sums run over entries sorted by their counts rather than
//! by label values, so any bijective renaming of ids leaves every result
//! bit-identical.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::volume::LabelVolume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Nats,
    Bits,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    /// Drop voxels whose ground-truth label is 0.
    Exclude,
    Include,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub log_base: LogBase,
    pub background: Background,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            log_base: LogBase::Nats,
            background: Background::Exclude,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Voi {
    /// `H(pred | gt)`, over-segmentation.
    pub split: f64,
    /// `H(gt | pred)`, under-segmentation.
    pub merge: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub voi_split: f64,
    pub voi_merge: f64,
    pub voi: f64,
    pub arand: f64,
    pub voxels: usize,
}

struct Contingency {
    n: u64,
    /// `(n_ij, t_i, s_j)` per nonzero cell: joint, gt-marginal and pred-marginal counts.
    cells: Vec<(u64, u64, u64)>,
    gt_sizes: Vec<u64>,
    pred_sizes: Vec<u64>,
}

fn contingency(pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricsConfig) -> Result<Contingency> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ in shape",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut joint: HashMap<(u32, u32), u64> = HashMap::new();
    let mut gt_count: HashMap<u32, u64> = HashMap::new();
    let mut pred_count: HashMap<u32, u64> = HashMap::new();
    let mut n = 0;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g == 0 && cfg.background == Background::Exclude {
            continue;
        }
        n += 1;
        *joint.entry((g, p)).or_default() += 1;
        *gt_count.entry(g).or_default() += 1;
        *pred_count.entry(p).or_default() += 1;
    }
    if n == 0 {
        return Err(Error::EmptyForeground);
    }
    let mut cells: Vec<(u64, u64, u64)> = joint
        .iter()
        .map(|(&(g, p), &c)| (c, gt_count[&g], pred_count[&p]))
        .collect();
    cells.sort_unstable();
    let mut gt_sizes: Vec<u64> = gt_count.into_values().collect();
    gt_sizes.sort_unstable();
    let mut pred_sizes: Vec<u64> = pred_count.into_values().collect();
    pred_sizes.sort_unstable();
    Ok(Contingency {
        n,
        cells,
        gt_sizes,
        pred_sizes,
    })
}

/// `−Σ (n_ij / n) ln(n_ij / m)` where `m` picks the conditioning marginal.
fn conditional_entropy(c: &Contingency, marginal: impl Fn(&(u64, u64, u64)) -> u64, base: LogBase) -> f64 {
    let mut terms: Vec<(u64, u64)> = c.cells.iter().map(|cell| (cell.0, marginal(cell))).collect();
    terms.sort_unstable();
    let s: f64 = terms
        .iter()
        .map(|&(nij, m)| nij as f64 * (nij as f64 / m as f64).ln())
        .sum();
    let h = -s / c.n as f64 + 0.0;
    match base {
        LogBase::Nats => h,
        LogBase::Bits => h / std::f64::consts::LN_2,
    }
}

pub fn voi(pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricsConfig) -> Result<Voi> {
    let c = contingency(pred, gt, cfg)?;
    let split = conditional_entropy(&c, |cell| cell.1, cfg.log_base);
    let merge = conditional_entropy(&c, |cell| cell.2, cfg.log_base);
    Ok(Voi {
        split,
        merge,
        total: split + merge,
    })
}

fn sum_sq(v: impl Iterator<Item = u64>) -> u128 {
    v.map(|x| x as u128 * x as u128).sum()
}

/// `1 − F`, with Rand precision `Σp²/Σs²` and recall `Σp²/Σt²`.
pub fn arand(pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricsConfig) -> Result<f64> {
    let c = contingency(pred, gt, cfg)?;
    Ok(arand_from(&c))
}

fn arand_from(c: &Contingency) -> f64 {
    let pij = sum_sq(c.cells.iter().map(|cell| cell.0)) as f64;
    let s = sum_sq(c.pred_sizes.iter().copied()) as f64;
    let t = sum_sq(c.gt_sizes.iter().copied()) as f64;
    let (precision, recall) = (pij / s, pij / t);
    1.0 - 2.0 * precision * recall / (precision + recall)
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let c = contingency(pred, gt, cfg)?;
    let split = conditional_entropy(&c, |cell| cell.1, cfg.log_base);
    let merge = conditional_entropy(&c, |cell| cell.2, cfg.log_base);
    Ok(MetricsReport {
        voi_split: split,
        voi_merge: merge,
        voi: split + merge,
        arand: arand_from(&c),
        voxels: c.n as usize,
    })
}
