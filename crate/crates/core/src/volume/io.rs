//! `<name>.vol` raw little-endian payload plus a `<name>.json` sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{voxel_count, LabelVolume, Shape3, Volume3D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Intensity,
    Labels,
    Affinity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dtype: Dtype,
    pub shape: Shape3,
    pub channels: usize,
    pub kind: VolumeKind,
}

/// Anything that can live in a `.vol` file.
#[derive(Clone, Debug, PartialEq)]
pub enum StoredVolume {
    Intensity(Volume3D),
    /// Three channels ordered `(z, y, x)` per voxel.
    Affinity(Volume3D),
    Labels(LabelVolume),
}

impl StoredVolume {
    pub fn into_intensity(self) -> Result<Volume3D> {
        match self {
            StoredVolume::Intensity(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected intensity volume, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_affinity(self) -> Result<Volume3D> {
        match self {
            StoredVolume::Affinity(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected affinity volume, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            StoredVolume::Labels(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected label volume, found {:?}",
                other.kind()
            ))),
        }
    }

    pub fn kind(&self) -> VolumeKind {
        match self {
            StoredVolume::Intensity(_) => VolumeKind::Intensity,
            StoredVolume::Affinity(_) => VolumeKind::Affinity,
            StoredVolume::Labels(_) => VolumeKind::Labels,
        }
    }
}

/// Resolves `a/b`, `a/b.vol` or `a/b.json` to the `(payload, sidecar)` pair.
fn paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("vol") | Some("json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let name = base
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    (
        base.with_file_name(format!("{name}.vol")),
        base.with_file_name(format!("{name}.json")),
    )
}

pub fn write_volume(vol: &StoredVolume, path: &Path) -> Result<()> {
    let (payload_path, sidecar_path) = paths(path);
    let (sidecar, bytes) = match vol {
        StoredVolume::Intensity(v) | StoredVolume::Affinity(v) => {
            let kind = vol.kind();
            if kind == VolumeKind::Affinity && v.channels() != 3 {
                return Err(Error::Shape(format!(
                    "affinity volume needs 3 channels, has {}",
                    v.channels()
                )));
            }
            let mut bytes = Vec::with_capacity(v.data().len() * 4);
            for &x in v.data() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
            let sc = Sidecar {
                dtype: Dtype::F32,
                shape: v.shape(),
                channels: v.channels(),
                kind,
            };
            (sc, bytes)
        }
        StoredVolume::Labels(l) => {
            let mut bytes = Vec::with_capacity(l.data().len() * 4);
            for &x in l.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            let sc = Sidecar {
                dtype: Dtype::U32,
                shape: l.shape(),
                channels: 1,
                kind: VolumeKind::Labels,
            };
            (sc, bytes)
        }
    };
    if let Some(dir) = payload_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&payload_path, bytes)?;
    fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar)? + "\n")?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let (_, sidecar_path) = paths(path);
    if !sidecar_path.exists() {
        return Err(Error::MissingSidecar(sidecar_path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(&sidecar_path)?)?)
}

pub fn read_volume(path: &Path) -> Result<StoredVolume> {
    let sidecar = read_sidecar(path)?;
    let (payload_path, _) = paths(path);
    let bytes = fs::read(&payload_path)?;
    decode(&sidecar, &bytes)
}

fn decode(sc: &Sidecar, bytes: &[u8]) -> Result<StoredVolume> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Format(format!(
            "payload of {} bytes is not a whole number of 4-byte values",
            bytes.len()
        )));
    }
    let expected = voxel_count(sc.shape) * sc.channels;
    let actual = bytes.len() / 4;
    if expected != actual {
        return Err(Error::Length {
            what: "volume payload".into(),
            expected,
            actual,
        });
    }
    let words = bytes.chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
    match (sc.dtype, sc.kind) {
        (Dtype::U32, VolumeKind::Labels) => {
            if sc.channels != 1 {
                return Err(Error::Format("label volumes have exactly one channel".into()));
            }
            let data = words.map(u32::from_le_bytes).collect();
            Ok(StoredVolume::Labels(LabelVolume::new(sc.shape, data)?))
        }
        (Dtype::F32, VolumeKind::Intensity) | (Dtype::F32, VolumeKind::Affinity) => {
            let data: Vec<f64> = words.map(|w| f32::from_le_bytes(w) as f64).collect();
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("volume payload".into()));
            }
            let v = Volume3D::new(sc.shape, sc.channels, data)?;
            Ok(if sc.kind == VolumeKind::Affinity {
                StoredVolume::Affinity(v)
            } else {
                StoredVolume::Intensity(v)
            })
        }
        (dtype, kind) => Err(Error::Format(format!("dtype {dtype:?} is not valid for kind {kind:?}"))),
    }
}
