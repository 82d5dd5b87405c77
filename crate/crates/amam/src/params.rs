//! Parameter directories: one AMTN file per named tensor plus
//! `manifest.json` describing the module structure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use amam_core::layers::ConvBnAct;
use amam_core::{Amam, AmamConfig, ParamKind, ParamStore, Shape};
use serde::{Deserialize, Serialize};

use crate::amtn::{self, AmtnError};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT: &str = "amtn-v1";

#[derive(Debug, thiserror::Error)]
pub enum ParamsError {
    #[error(transparent)]
    Amtn(#[from] AmtnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Manifest {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: unsupported format {found:?}")]
    Format { path: PathBuf, found: String },
    #[error("{path}: tensor {name} missing from the manifest")]
    Missing { path: PathBuf, name: String },
    #[error("{path}: tensor {name} is not part of this model")]
    Unknown { path: PathBuf, name: String },
    #[error("{path}: tensor {name} has shape {found}, model expects {expected}")]
    Shape {
        path: PathBuf,
        name: String,
        expected: Shape,
        found: Shape,
    },
    #[error("{path}: file name {file:?} escapes the parameter directory")]
    FileName { path: PathBuf, file: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Learnable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub file: String,
    pub kind: TensorKind,
    pub shape: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvEntry {
    pub name: String,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub activation: amam_core::Activation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AaEntry {
    pub heads: usize,
    pub head_dim: usize,
    pub qk_dim: usize,
    pub fusion_mode: amam_core::FusionMode,
    /// Cascade fusion logits as decimal strings.
    pub alpha_logits: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelEntry {
    pub channels: usize,
    pub me: Option<Vec<ConvEntry>>,
    pub aa: Option<AaEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: AmamConfig,
    pub levels: Vec<LevelEntry>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn conv_entry(store: &ParamStore, unit: &ConvBnAct) -> ConvEntry {
    let prefix = store.name(unit.kernel);
    ConvEntry {
        name: prefix.strip_suffix(".kernel").unwrap_or(prefix).to_string(),
        kernel: unit.spec.kernel,
        stride: unit.spec.stride,
        padding: unit.spec.padding,
        c_in: unit.spec.c_in,
        c_out: unit.spec.c_out,
        activation: unit.spec.activation,
    }
}

/// Describes `amam` and every tensor in `store`.
pub fn manifest(store: &ParamStore, amam: &Amam) -> Manifest {
    let levels = amam
        .levels
        .iter()
        .zip(&amam.config.levels)
        .map(|(level, &channels)| LevelEntry {
            channels,
            me: level.me.as_ref().map(|me| {
                [
                    Some(&me.cbr_cur),
                    me.cbr_shallow.as_ref(),
                    me.cbr_deep.as_ref(),
                    Some(&me.cbr_fuse),
                ]
                .into_iter()
                .flatten()
                .map(|u| conv_entry(store, u))
                .collect()
            }),
            aa: level.aa.as_ref().map(|aa| AaEntry {
                heads: aa.config.heads,
                head_dim: aa.config.head_dim(),
                qk_dim: aa.config.qk_dim(),
                fusion_mode: aa.config.fusion,
                alpha_logits: aa
                    .alpha_logits
                    .iter()
                    .map(|&id| store.get(id).item().to_string())
                    .collect(),
            }),
        })
        .collect();
    let tensors = store
        .iter()
        .map(|(_, name, kind, t)| {
            let entry = TensorEntry {
                file: format!("{name}.amtn"),
                kind: match kind {
                    ParamKind::Learnable => TensorKind::Learnable,
                    ParamKind::Buffer => TensorKind::Buffer,
                },
                shape: t.shape().dims(),
            };
            (name.to_string(), entry)
        })
        .collect();
    Manifest {
        format: FORMAT.to_string(),
        config: amam.config.clone(),
        levels,
        tensors,
    }
}

/// Rounds every tensor of `store` to the nearest `f32`, the precision of
/// parameter files, so saved and in-memory parameters agree exactly.
pub fn round_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Writes every tensor of `store` and the manifest into `dir`.
pub fn save_params(dir: &Path, store: &ParamStore, amam: &Amam) -> Result<(), ParamsError> {
    fs::create_dir_all(dir).map_err(|source| ParamsError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let m = manifest(store, amam);
    for (name, entry) in &m.tensors {
        let id = store.find(name).expect("manifest built from this store");
        amtn::write(store.get(id), &dir.join(&entry.file))?;
    }
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|source| ParamsError::Io { path, source })
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, ParamsError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|source| ParamsError::Io {
        path: path.clone(),
        source,
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| ParamsError::Manifest {
        path: path.clone(),
        source,
    })?;
    if m.format != FORMAT {
        return Err(ParamsError::Format {
            path,
            found: m.format,
        });
    }
    Ok(m)
}

/// Overwrites every tensor of `store` with the file of the same name in
/// `dir`. The directory must cover exactly the tensors of `store`.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<Manifest, ParamsError> {
    let m = read_manifest(dir)?;
    let mpath = dir.join(MANIFEST);
    for name in m.tensors.keys() {
        if store.find(name).is_none() {
            return Err(ParamsError::Unknown {
                path: mpath,
                name: name.clone(),
            });
        }
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let entry = m.tensors.get(&name).ok_or_else(|| ParamsError::Missing {
            path: mpath.clone(),
            name: name.clone(),
        })?;
        let file = Path::new(&entry.file);
        if file.components().count() != 1 || file.is_absolute() || entry.file.contains("..") {
            return Err(ParamsError::FileName {
                path: mpath.clone(),
                file: entry.file.clone(),
            });
        }
        let fpath = dir.join(file);
        let t = amtn::read(&fpath)?;
        let expected = store.get(id).shape();
        if t.shape() != expected {
            return Err(ParamsError::Shape {
                path: fpath,
                name,
                expected,
                found: t.shape(),
            });
        }
        store.set(id, t);
    }
    Ok(m)
}
