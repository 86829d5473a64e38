//! Dense 3D volumes, anisotropic patch grids, synthetic phantoms and the
//! on-disk `.vol` format.
//!
//! Axis order is always `(z, y, x)` with `z` the slow, anisotropic axis.
//! Multi-channel data is stored voxel-major with the channel index fastest.

mod io;
mod phantom;

pub use io::{read_sidecar, read_volume, write_volume, Sidecar, StoredVolume, VolumeKind};
pub use phantom::{gen_phantom, PhantomConfig};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// `(depth, height, width)` in voxels.
pub type Shape3 = [usize; 3];

pub(crate) fn voxel_count(shape: Shape3) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// Intensity volume with `channels` values per voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    shape: Shape3,
    channels: usize,
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(shape: Shape3, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Shape("channel count must be at least 1".into()));
        }
        let expected = voxel_count(shape) * channels;
        if data.len() != expected {
            return Err(Error::Length {
                what: "volume data".into(),
                expected,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("volume data".into()));
        }
        Ok(Self { shape, channels, data })
    }

    pub fn zeros(shape: Shape3, channels: usize) -> Self {
        Self {
            shape,
            channels,
            data: vec![0.0; voxel_count(shape) * channels],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize, c: usize) -> usize {
        ((z * self.shape[1] + y) * self.shape[2] + x) * self.channels + c
    }

    pub fn get(&self, z: usize, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(z, y, x, c)]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Instance labels, 0 = background. IDs need not be contiguous.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVolume {
    shape: Shape3,
    data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(shape: Shape3, data: Vec<u32>) -> Result<Self> {
        let expected = voxel_count(shape);
        if data.len() != expected {
            return Err(Error::Length {
                what: "label data".into(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0; voxel_count(shape)],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u32 {
        self.data[self.index(z, y, x)]
    }

    /// Sorted distinct nonzero IDs.
    pub fn distinct_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Partition of a volume into `(P/4, P, P)` patches.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub volume_shape: Shape3,
    pub channels: usize,
    pub patch_shape: Shape3,
    /// Voxel origin `(z, y, x)` of each patch, indexed by patch number.
    pub origins: Vec<Shape3>,
}

impl PatchGrid {
    /// Builds the grid for patch size `p`, reporting every violated constraint.
    pub fn new(volume_shape: Shape3, channels: usize, p: usize) -> Result<Self> {
        let patch_shape = patch_shape(p)?;
        let [d, h, w] = volume_shape;
        let mut violations = Vec::new();
        if d % patch_shape[0] != 0 {
            violations.push(format!("depth {d} not divisible by P/4 = {}", patch_shape[0]));
        }
        if h % p != 0 {
            violations.push(format!("height {h} not divisible by P = {p}"));
        }
        if w % p != 0 {
            violations.push(format!("width {w} not divisible by P = {p}"));
        }
        if !violations.is_empty() {
            return Err(Error::Shape(violations.join("; ")));
        }
        let (nz, ny, nx) = (d / patch_shape[0], h / p, w / p);
        let mut origins = Vec::with_capacity(nz * ny * nx);
        for iz in 0..nz {
            for iy in 0..ny {
                for ix in 0..nx {
                    origins.push([iz * patch_shape[0], iy * p, ix * p]);
                }
            }
        }
        Ok(Self {
            volume_shape,
            channels,
            patch_shape,
            origins,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.origins.len()
    }

    /// Values per flattened patch: `(P³/4)·C`.
    pub fn patch_len(&self) -> usize {
        voxel_count(self.patch_shape) * self.channels
    }

    /// Volume linear voxel index of local offset `(dz, dy, dx)` inside patch `i`.
    pub fn voxel_of(&self, i: usize, dz: usize, dy: usize, dx: usize) -> usize {
        let [oz, oy, ox] = self.origins[i];
        let [_, h, w] = self.volume_shape;
        ((oz + dz) * h + (oy + dy)) * w + (ox + dx)
    }
}

/// `(P/4, P, P)`; `P` must be a positive multiple of 4.
pub fn patch_shape(p: usize) -> Result<Shape3> {
    if p == 0 || !p.is_multiple_of(4) {
        return Err(Error::Shape(format!(
            "patch size P = {p} must be a positive multiple of 4"
        )));
    }
    Ok([p / 4, p, p])
}

/// Number of patches `N = 4·H·W·D / P³`.
pub fn num_patches(shape: Shape3, p: usize) -> usize {
    4 * shape[0] * shape[1] * shape[2] / (p * p * p)
}

/// Splits `vol` into an `(N, (P³/4)·C)` matrix, rows in row-major `(z, y, x)` patch order.
pub fn patchify(vol: &Volume3D, p: usize) -> Result<(Array2<f64>, PatchGrid)> {
    let grid = PatchGrid::new(vol.shape, vol.channels, p)?;
    let patches = patchify_with(vol, &grid)?;
    Ok((patches, grid))
}

/// Extracts patches following an existing grid's origin map.
pub fn patchify_with(vol: &Volume3D, grid: &PatchGrid) -> Result<Array2<f64>> {
    if vol.shape != grid.volume_shape || vol.channels != grid.channels {
        return Err(Error::Shape(format!(
            "volume {:?}x{} does not match grid {:?}x{}",
            vol.shape, vol.channels, grid.volume_shape, grid.channels
        )));
    }
    let [pd, ph, pw] = grid.patch_shape;
    let c = vol.channels;
    let mut out = Array2::zeros((grid.num_patches(), grid.patch_len()));
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let mut k = 0;
        for dz in 0..pd {
            for dy in 0..ph {
                let base = grid.voxel_of(i, dz, dy, 0) * c;
                let run = &vol.data[base..base + pw * c];
                for &v in run {
                    row[k] = v;
                    k += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`patchify`]; row `i` is written at `grid.origins[i]`.
pub fn unpatchify(patches: &Array2<f64>, grid: &PatchGrid) -> Result<Volume3D> {
    if patches.nrows() != grid.num_patches() {
        return Err(Error::Length {
            what: "patch count".into(),
            expected: grid.num_patches(),
            actual: patches.nrows(),
        });
    }
    if patches.ncols() != grid.patch_len() {
        return Err(Error::Length {
            what: "patch length".into(),
            expected: grid.patch_len(),
            actual: patches.ncols(),
        });
    }
    let [pd, ph, pw] = grid.patch_shape;
    let c = grid.channels;
    let mut vol = Volume3D::zeros(grid.volume_shape, c);
    for (i, row) in patches.rows().into_iter().enumerate() {
        let mut k = 0;
        for dz in 0..pd {
            for dy in 0..ph {
                let base = grid.voxel_of(i, dz, dy, 0) * c;
                for j in 0..pw * c {
                    vol.data[base + j] = row[k];
                    k += 1;
                }
            }
        }
    }
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("unpatchified volume".into()));
    }
    Ok(vol)
}
