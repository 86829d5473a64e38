//! Affinity-graph instance segmentation: seeded watershed fragments followed
//! by score-ordered hierarchical merging of fragments.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use crate::volume::{voxel_count, LabelVolume, Shape3, Volume3D};
use crate::{Error, Result};

/// Affinities to the negative-direction neighbor along z, y and x, stored
/// voxel-major with the channel fastest. Entries facing outside the volume are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMap {
    shape: Shape3,
    data: Vec<f64>,
}

impl AffinityMap {
    pub fn new(shape: Shape3, data: Vec<f64>) -> Result<Self> {
        let expected = 3 * voxel_count(shape);
        if data.len() != expected {
            return Err(Error::Length {
                what: "affinity map".into(),
                expected,
                actual: data.len(),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("affinity {v} outside [0, 1]")));
        }
        let mut aff = Self { shape, data };
        aff.clear_boundary();
        Ok(aff)
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; 3 * voxel_count(shape)],
        }
    }

    /// Reads a 3-channel volume; boundary-facing entries are forced to 0.
    pub fn from_volume(vol: &Volume3D) -> Result<Self> {
        if vol.channels() != 3 {
            return Err(Error::Shape(format!(
                "affinity volume needs 3 channels, got {}",
                vol.channels()
            )));
        }
        Self::new(vol.shape(), vol.data().to_vec())
    }

    pub fn to_volume(&self) -> Volume3D {
        Volume3D::new(self.shape, 3, self.data.clone()).expect("valid affinity map")
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, c: usize, z: usize, y: usize, x: usize) -> f64 {
        let [_, h, w] = self.shape;
        self.data[((z * h + y) * w + x) * 3 + c]
    }

    fn clear_boundary(&mut self) {
        let [d, h, w] = self.shape;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let v = (z * h + y) * w + x;
                    for (c, at_edge) in [z == 0, y == 0, x == 0].into_iter().enumerate() {
                        if at_edge {
                            self.data[v * 3 + c] = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Every interior edge as `(voxel, negative neighbor, affinity)`.
    fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let [d, h, w] = self.shape;
        let strides = [h * w, w, 1];
        (0..d * h * w).flat_map(move |v| {
            let coords = [v / (h * w), (v / w) % h, v % w];
            (0..3)
                .filter(move |&c| coords[c] > 0)
                .map(move |c| (v, v - strides[c], self.data[v * 3 + c]))
        })
    }

    /// Neighbors of `v` along all six directions with the connecting affinity.
    fn neighbors(&self, v: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let [d, h, w] = self.shape;
        let coords = [v / (h * w), (v / w) % h, v % w];
        let dims = [d, h, w];
        let strides = [h * w, w, 1];
        (0..3).flat_map(move |c| {
            let back = (coords[c] > 0).then(|| (v - strides[c], self.data[v * 3 + c]));
            let fwd = (coords[c] + 1 < dims[c]).then(|| {
                let u = v + strides[c];
                (u, self.data[u * 3 + c])
            });
            back.into_iter().chain(fwd)
        })
    }
}

/// `1` where both voxels carry the same nonzero label, `0` elsewhere.
pub fn affinity_from_labels(labels: &LabelVolume) -> AffinityMap {
    let mut aff = AffinityMap::zeros(labels.shape());
    let l = labels.data();
    let pairs: Vec<(usize, usize)> = aff.edges().map(|(v, u, _)| (v, u)).collect();
    let [_, h, w] = labels.shape();
    for (v, u) in pairs {
        if l[v] != 0 && l[v] == l[u] {
            let c = match v - u {
                s if s == h * w => 0,
                s if s == w => 1,
                _ => 2,
            };
            aff.data[v * 3 + c] = 1.0;
        }
    }
    aff
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum MergeScore {
    Mean,
    /// Lower empirical quantile `q ∈ [0, 1]` of the contact affinities.
    Quantile(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    pub seed_threshold: f64,
    pub bias: f64,
    pub merge_threshold: f64,
    pub score: MergeScore,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            seed_threshold: 0.9,
            bias: 0.3,
            merge_threshold: 0.5,
            score: MergeScore::Mean,
        }
    }
}

impl SegConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (key, t) in [("seg.seed_threshold", self.seed_threshold), ("seg.bias", self.bias)] {
            if !(0.0..=1.0).contains(&t) {
                v.push(format!("{key} = {t} must lie in [0, 1]"));
            }
        }
        if !self.merge_threshold.is_finite() {
            v.push("seg.merge_threshold must be finite".into());
        }
        if let MergeScore::Quantile(q) = self.score {
            if !(0.0..=1.0).contains(&q) {
                v.push(format!("seg.score quantile {q} must lie in [0, 1]"));
            }
        }
        v
    }
}

/// Flood entry ordered by affinity (high first), then target voxel, then source voxel (low first).
#[derive(PartialEq)]
struct Flood {
    aff: f64,
    target: usize,
    source: usize,
}

impl Eq for Flood {}

impl Ord for Flood {
    fn cmp(&self, o: &Self) -> Ordering {
        self.aff
            .total_cmp(&o.aff)
            .then_with(|| o.target.cmp(&self.target))
            .then_with(|| o.source.cmp(&self.source))
    }
}

impl PartialOrd for Flood {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Seeds are connected components of edges with affinity ≥ `seed_threshold`,
/// numbered from 1 in order of their lowest voxel index. Remaining voxels are
/// flooded from labeled neighbors in order of decreasing affinity, stopping
/// below `bias`.
pub fn watershed_fragments(aff: &AffinityMap, seed_threshold: f64, bias: f64) -> Result<LabelVolume> {
    for (name, t) in [("seed_threshold", seed_threshold), ("bias", bias)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("{name} = {t} must lie in [0, 1]")));
        }
    }
    let n = voxel_count(aff.shape);
    let mut parent: Vec<usize> = (0..n).collect();
    let mut seeded = vec![false; n];
    for (v, u, a) in aff.edges() {
        if a >= seed_threshold && a > 0.0 {
            seeded[v] = true;
            seeded[u] = true;
            let (rv, ru) = (find(&mut parent, v), find(&mut parent, u));
            if rv != ru {
                parent[rv.max(ru)] = rv.min(ru);
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut ids: HashMap<usize, u32> = HashMap::new();
    for v in 0..n {
        if seeded[v] {
            let root = find(&mut parent, v);
            let next = ids.len() as u32 + 1;
            labels[v] = *ids.entry(root).or_insert(next);
        }
    }
    let mut heap = BinaryHeap::new();
    let push_from = |heap: &mut BinaryHeap<Flood>, labels: &[u32], v: usize| {
        for (u, a) in aff.neighbors(v) {
            if labels[u] == 0 && a >= bias && a > 0.0 {
                heap.push(Flood {
                    aff: a,
                    target: u,
                    source: v,
                });
            }
        }
    };
    for v in 0..n {
        if labels[v] != 0 {
            push_from(&mut heap, &labels, v);
        }
    }
    while let Some(Flood { target, source, .. }) = heap.pop() {
        if labels[target] != 0 {
            continue;
        }
        labels[target] = labels[source];
        push_from(&mut heap, &labels, target);
    }
    LabelVolume::new(aff.shape, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: u32,
    pub b: u32,
    pub score: f64,
}

/// Final labels plus the ordered merges that produced them from the fragments.
#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub labels: LabelVolume,
    pub history: Vec<Merge>,
}

impl Segmentation {
    pub fn num_segments(&self) -> usize {
        self.labels.distinct_ids().len()
    }
}

/// Applies a merge history to fragments: every merge relabels `b` as `a`.
pub fn replay(fragments: &LabelVolume, history: &[Merge]) -> LabelVolume {
    let mut map: BTreeMap<u32, u32> = BTreeMap::new();
    for m in history {
        map.insert(m.b, m.a);
    }
    let resolve = |mut id: u32| {
        while let Some(&next) = map.get(&id) {
            id = next;
        }
        id
    };
    let mut out = fragments.clone();
    for l in out.data_mut() {
        *l = resolve(*l);
    }
    out
}

fn score_of(values: &[f64], score: MergeScore) -> f64 {
    match score {
        MergeScore::Mean => values.iter().sum::<f64>() / values.len() as f64,
        MergeScore::Quantile(q) => {
            let mut s = values.to_vec();
            s.sort_by(f64::total_cmp);
            // smallest value whose empirical CDF reaches q
            let k = ((s.len() as f64 * q).ceil() as usize).clamp(1, s.len());
            s[k - 1]
        }
    }
}

/// Heap entry ordered by score (high first), then by the smaller `(a, b)`.
#[derive(PartialEq)]
struct Candidate {
    score: f64,
    a: u32,
    b: u32,
    version: u64,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, o: &Self) -> Ordering {
        self.score
            .total_cmp(&o.score)
            .then_with(|| (o.a, o.b).cmp(&(self.a, self.b)))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Greedily merges the best-scoring adjacent pair of regions while its score
/// is at least `threshold`. The merged region keeps the smaller id and its
/// contacts are rescored from the union of the contact affinities.
pub fn agglomerate(
    fragments: &LabelVolume,
    aff: &AffinityMap,
    threshold: f64,
    score: MergeScore,
) -> Result<Segmentation> {
    if fragments.shape() != aff.shape {
        return Err(Error::Shape(format!(
            "fragments {:?} and affinities {:?} differ in shape",
            fragments.shape(),
            aff.shape
        )));
    }
    let l = fragments.data();
    // contact affinities per region pair (a < b)
    let mut contacts: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    for (v, u, a) in aff.edges() {
        let (p, q) = (l[v], l[u]);
        if p != 0 && q != 0 && p != q {
            contacts.entry((p.min(q), p.max(q))).or_default().push(a);
        }
    }
    let mut adjacency: BTreeMap<u32, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for ((a, b), vals) in contacts {
        adjacency.entry(a).or_default().insert(b, vals.clone());
        adjacency.entry(b).or_default().insert(a, vals);
    }
    let mut versions: HashMap<(u32, u32), u64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    for (&a, nbrs) in &adjacency {
        for (&b, vals) in nbrs {
            if a < b {
                versions.insert((a, b), 0);
                heap.push(Candidate {
                    score: score_of(vals, score),
                    a,
                    b,
                    version: 0,
                });
            }
        }
    }
    let mut history = Vec::new();
    while let Some(c) = heap.pop() {
        if versions.get(&(c.a, c.b)) != Some(&c.version) {
            continue;
        }
        if c.score < threshold {
            break;
        }
        let (a, b) = (c.a, c.b);
        history.push(Merge { a, b, score: c.score });
        versions.remove(&(a, b));
        let b_nbrs = adjacency.remove(&b).unwrap_or_default();
        for (k, vals) in b_nbrs {
            if k == a {
                continue;
            }
            let kn = adjacency.get_mut(&k).expect("symmetric adjacency");
            kn.remove(&b);
            kn.entry(a).or_default().extend(vals.iter().copied());
            let merged = kn[&a].clone();
            adjacency.get_mut(&a).expect("a present").insert(k, merged);
            versions.remove(&(b.min(k), b.max(k)));
        }
        adjacency.get_mut(&a).expect("a present").remove(&b);
        for (&k, vals) in &adjacency[&a] {
            let key = (a.min(k), a.max(k));
            let ver = versions.entry(key).and_modify(|v| *v += 1).or_insert(0);
            heap.push(Candidate {
                score: score_of(vals, score),
                a: key.0,
                b: key.1,
                version: *ver,
            });
        }
    }
    Ok(Segmentation {
        labels: replay(fragments, &history),
        history,
    })
}

/// Watershed followed by agglomeration with one configuration.
pub fn segment(aff: &AffinityMap, cfg: &SegConfig) -> Result<Segmentation> {
    let frags = watershed_fragments(aff, cfg.seed_threshold, cfg.bias)?;
    agglomerate(&frags, aff, cfg.merge_threshold, cfg.score)
}
