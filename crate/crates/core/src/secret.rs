//! The local-only secret bundle.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PositionSecret;
use crate::error::{Error, Result};
use crate::ir::archive::Archive;
use crate::tensor::Tensor;

pub const BUNDLE_VERSION: &str = "amalgam-secret/1";

/// Keep sets of one decoy's skip-input layer, keyed by its augmented id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoyKeep {
    pub layer: String,
    pub keep_rows: Vec<usize>,
    pub keep_cols: Vec<usize>,
    pub skip_positions: Vec<usize>,
}

/// Everything needed to undo the obfuscation. Never written next to
/// cloud-bound files.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SecretBundle {
    pub positions: Option<PositionSecret>,
    /// Original layer id -> id inside the augmented model.
    pub layer_map: BTreeMap<String, String>,
    pub original_head_index: Option<usize>,
    pub decoy_keep_sets: Vec<DecoyKeep>,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the original graph's canonical JSON.
    pub original_arch_sha256: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PositionHeader {
    modality: crate::data::Modality,
    alpha: f64,
    original: Vec<usize>,
    augmented: Vec<usize>,
}

fn ids(v: &[usize]) -> Result<Tensor> {
    Tensor::from_i64(vec![v.len()], v.iter().map(|&x| x as i64).collect())
}

fn usizes(t: &Tensor, name: &str, location: &str) -> Result<Vec<usize>> {
    t.as_i64()?
        .iter()
        .map(|&x| usize::try_from(x).map_err(|_| Error::load(location, format!("negative index in `{name}`"))))
        .collect()
}

impl SecretBundle {
    pub fn from_positions(positions: PositionSecret) -> Self {
        SecretBundle {
            positions: Some(positions),
            ..Default::default()
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::local_only();
        a.push_text("version", BUNDLE_VERSION)?;
        if let Some(p) = &self.positions {
            let header = match p {
                PositionSecret::Image {
                    alpha,
                    original,
                    augmented,
                    kept_rows,
                    kept_cols,
                } => {
                    a.push("kept_rows", ids(kept_rows)?)?;
                    a.push("kept_cols", ids(kept_cols)?)?;
                    PositionHeader {
                        modality: p.modality(),
                        alpha: *alpha,
                        original: original.to_vec(),
                        augmented: augmented.to_vec(),
                    }
                }
                PositionSecret::Text {
                    alpha,
                    original_len,
                    augmented_len,
                    kept_positions,
                } => {
                    a.push("kept_positions", ids(kept_positions)?)?;
                    PositionHeader {
                        modality: p.modality(),
                        alpha: *alpha,
                        original: vec![*original_len],
                        augmented: vec![*augmented_len],
                    }
                }
            };
            a.push_text("positions", &serde_json::to_string(&header)?)?;
        }
        if !self.layer_map.is_empty() {
            let pairs: Vec<(&String, &String)> = self.layer_map.iter().collect();
            a.push_text("layer_map", &serde_json::to_string(&pairs)?)?;
        }
        if let Some(h) = self.original_head_index {
            a.push("original_head_index", Tensor::from_i64(vec![1], vec![h as i64])?)?;
        }
        if !self.decoy_keep_sets.is_empty() {
            a.push_text("decoy_keep_sets", &serde_json::to_string(&self.decoy_keep_sets)?)?;
        }
        a.push_text("seeds", &serde_json::to_string(&self.seeds)?)?;
        if let Some(h) = &self.original_arch_sha256 {
            a.push_text("original_arch_sha256", h)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive, location: &str) -> Result<Self> {
        if !a.local_only {
            return Err(Error::load(location, "not a secret bundle (LOCAL-ONLY flag missing)"));
        }
        let text = |name: &str| a.text(name).transpose();
        match text("version")? {
            Some(v) if v == BUNDLE_VERSION => {}
            other => {
                return Err(Error::load(
                    location,
                    format!("unsupported bundle version {other:?} (expected {BUNDLE_VERSION})"),
                ))
            }
        }
        let json_err = |e: serde_json::Error| Error::load(location, e.to_string());
        let positions = match text("positions")? {
            None => None,
            Some(h) => {
                let h: PositionHeader = serde_json::from_str(&h).map_err(json_err)?;
                let rec = |name: &str| {
                    a.get(name)
                        .ok_or_else(|| Error::load(location, format!("missing `{name}` record")))
                        .and_then(|t| usizes(t, name, location))
                };
                let bad = || Error::load(location, "malformed position dims");
                Some(match h.modality {
                    crate::data::Modality::Image => PositionSecret::Image {
                        alpha: h.alpha,
                        original: h.original.try_into().map_err(|_| bad())?,
                        augmented: h.augmented.try_into().map_err(|_| bad())?,
                        kept_rows: rec("kept_rows")?,
                        kept_cols: rec("kept_cols")?,
                    },
                    crate::data::Modality::Text => PositionSecret::Text {
                        alpha: h.alpha,
                        original_len: *h.original.first().ok_or_else(bad)?,
                        augmented_len: *h.augmented.first().ok_or_else(bad)?,
                        kept_positions: rec("kept_positions")?,
                    },
                })
            }
        };
        let layer_map = match text("layer_map")? {
            None => BTreeMap::new(),
            Some(s) => serde_json::from_str::<Vec<(String, String)>>(&s)
                .map_err(json_err)?
                .into_iter()
                .collect(),
        };
        let original_head_index = match a.get("original_head_index") {
            None => None,
            Some(t) => Some(usizes(t, "original_head_index", location)?.first().copied().ok_or_else(|| {
                Error::load(location, "empty `original_head_index` record")
            })?),
        };
        let decoy_keep_sets = match text("decoy_keep_sets")? {
            None => Vec::new(),
            Some(s) => serde_json::from_str(&s).map_err(json_err)?,
        };
        let seeds = match text("seeds")? {
            None => BTreeMap::new(),
            Some(s) => serde_json::from_str(&s).map_err(json_err)?,
        };
        Ok(SecretBundle {
            positions,
            layer_map,
            original_head_index,
            decoy_keep_sets,
            seeds,
            original_arch_sha256: text("original_arch_sha256")?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        SecretBundle::from_archive(&Archive::read(path)?, &path.display().to_string())
    }
}
