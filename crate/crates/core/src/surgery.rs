//! Single-head ablation by zeroing the slice of the attention output
//! projection that consumes one head's output.
//!
//! Because the projection reads the concatenated head outputs, zeroing the
//! `head_dim` input-side entries that belong to a head removes that head's
//! additive contribution to the residual stream exactly, for every input.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dtype::DType;
use crate::error::{Error, Result};
use crate::tensor_store::{ArchiveWriter, TensorArchive, TensorSpec, WriteOptions};

/// Storage convention of the output-projection weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputLayout {
    /// `[hidden_out, n_heads * head_dim]`, heads occupy column blocks
    /// (linear-layer convention).
    #[default]
    OutIn,
    /// `[n_heads * head_dim, hidden_out]`, heads occupy row blocks
    /// (conv1d-style checkpoints).
    InOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Key/value heads for grouped-query attention; defaults to `n_heads`.
    #[serde(default)]
    pub n_kv_heads: Option<usize>,
    pub head_dim: usize,
    pub hidden_dim: usize,
    /// Name templates; `{layer}` is replaced by the layer index.
    pub query: String,
    pub key: String,
    pub value: String,
    pub output: String,
    #[serde(default)]
    pub layout: OutputLayout,
}

impl ArchitectureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.head_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::invalid("architecture dimensions must be positive"));
        }
        if self.n_heads * self.head_dim != self.hidden_dim {
            return Err(Error::invalid(format!(
                "n_heads ({}) x head_dim ({}) != hidden_dim ({})",
                self.n_heads, self.head_dim, self.hidden_dim
            )));
        }
        if let Some(kv) = self.n_kv_heads {
            if kv == 0 || self.n_heads % kv != 0 {
                return Err(Error::invalid(format!(
                    "n_kv_heads {kv} must divide n_heads {}",
                    self.n_heads
                )));
            }
        }
        for t in [&self.query, &self.key, &self.value, &self.output] {
            if !t.contains("{layer}") {
                return Err(Error::invalid(format!("name template {t:?} lacks {{layer}}")));
            }
        }
        Ok(())
    }

    fn resolve(template: &str, layer: usize) -> String {
        template.replace("{layer}", &layer.to_string())
    }

    pub fn output_name(&self, layer: usize) -> String {
        Self::resolve(&self.output, layer)
    }

    pub fn attention_names(&self, layer: usize) -> [String; 4] {
        [
            Self::resolve(&self.query, layer),
            Self::resolve(&self.key, layer),
            Self::resolve(&self.value, layer),
            self.output_name(layer),
        ]
    }

    /// Check that `archive` holds consistently shaped attention tensors for
    /// every layer.
    pub fn check_archive(&self, archive: &TensorArchive) -> Result<()> {
        self.validate()?;
        let kv_width = self.n_kv_heads.unwrap_or(self.n_heads) * self.head_dim;
        for layer in 0..self.n_layers {
            let [q, k, v, o] = self.attention_names(layer);
            let shape = |name: &str| {
                archive
                    .get(name)
                    .map(|m| m.shape.clone())
                    .ok_or_else(|| Error::invalid(format!("layer {layer}: tensor {name} not found")))
            };
            let expect = |name: &str, actual: Vec<usize>, want: Vec<usize>| {
                if actual == want {
                    Ok(())
                } else {
                    Err(Error::ShapeMismatch {
                        name: name.to_string(),
                        left: want,
                        right: actual,
                    })
                }
            };
            expect(&q, shape(&q)?, vec![self.hidden_dim, self.hidden_dim])?;
            expect(&k, shape(&k)?, vec![kv_width, self.hidden_dim])?;
            expect(&v, shape(&v)?, vec![kv_width, self.hidden_dim])?;
            let o_shape = shape(&o)?;
            if o_shape.len() != 2 {
                return Err(Error::invalid(format!("{o}: output projection must be 2-D")));
            }
            let heads_axis = match self.layout {
                OutputLayout::OutIn => o_shape[1],
                OutputLayout::InOut => o_shape[0],
            };
            if heads_axis != self.n_heads * self.head_dim {
                return Err(Error::invalid(format!(
                    "{o}: shape {o_shape:?} has no {}-wide head axis for layout {:?}",
                    self.n_heads * self.head_dim,
                    self.layout
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadMaskSpec {
    pub layer: usize,
    pub head: usize,
}

impl HeadMaskSpec {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadMaskSpec { layer, head }
    }

    /// `masked_L{layer}_H{head}`
    pub fn label(&self) -> String {
        format!("masked_L{}_H{}", self.layer, self.head)
    }
}

impl fmt::Display for HeadMaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.layer, self.head)
    }
}

/// Every (layer, head) pair, layer-major.
pub fn enumerate_masks(arch: &ArchitectureSpec) -> Vec<HeadMaskSpec> {
    (0..arch.n_layers)
        .flat_map(|layer| (0..arch.n_heads).map(move |head| HeadMaskSpec { layer, head }))
        .collect()
}

/// Zero one head's slice of a raw output-projection payload in place.
fn zero_head_slice(bytes: &mut [u8], dtype: DType, shape: &[usize], arch: &ArchitectureSpec, head: usize) {
    let w = dtype.byte_width();
    let (rows, cols) = (shape[0], shape[1]);
    let start = head * arch.head_dim;
    let end = start + arch.head_dim;
    match arch.layout {
        OutputLayout::OutIn => {
            for r in 0..rows {
                let row = r * cols;
                bytes[(row + start) * w..(row + end) * w].fill(0);
            }
        }
        OutputLayout::InOut => {
            bytes[start * cols * w..end * cols * w].fill(0);
        }
    }
}

/// Write a copy of `archive` to `out` with head `mask` ablated. Every other
/// tensor is copied byte for byte.
pub fn mask_head(
    archive: &TensorArchive,
    arch: &ArchitectureSpec,
    mask: HeadMaskSpec,
    out: impl AsRef<Path>,
) -> Result<TensorArchive> {
    if mask.layer >= arch.n_layers || mask.head >= arch.n_heads {
        return Err(Error::invalid(format!(
            "head {mask} out of range for {} layers x {} heads",
            arch.n_layers, arch.n_heads
        )));
    }
    arch.check_archive(archive)?;
    let target = arch.output_name(mask.layer);

    let metas = archive.entries_by_offset();
    let specs = metas
        .iter()
        .map(|m| TensorSpec {
            name: m.name.clone(),
            dtype: m.dtype,
            shape: m.shape.clone(),
        })
        .collect();
    let mut metadata = archive.metadata().cloned().unwrap_or_default();
    let label = mask.label();
    let previous = metadata.get("masked_heads").cloned();
    let heads = match previous {
        Some(p) if p.split(',').any(|l| l == label) => p,
        Some(p) if !p.is_empty() => format!("{p},{label}"),
        _ => label.clone(),
    };
    metadata.insert("masked_heads".into(), heads);
    metadata.insert("variant".into(), label);

    let mut writer = ArchiveWriter::create(out, specs, Some(&metadata), WriteOptions::default())?;
    for meta in metas {
        let mut bytes = archive.read_raw(&meta.name)?;
        if meta.name == target {
            zero_head_slice(&mut bytes, meta.dtype, &meta.shape, arch, mask.head);
        }
        writer.write_raw(&meta.name, &bytes)?;
    }
    writer.finish()
}

/// Write one masked variant per head into `dir`, named
/// `masked_L{layer}_H{head}.<ext>`.
pub fn mask_grid(
    archive: &TensorArchive,
    arch: &ArchitectureSpec,
    dir: impl AsRef<Path>,
    extension: &str,
) -> Result<BTreeMap<HeadMaskSpec, PathBuf>> {
    use rayon::prelude::*;

    arch.check_archive(archive)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    enumerate_masks(arch)
        .into_par_iter()
        .map(|mask| {
            let path = dir.join(format!("{}.{extension}", mask.label()));
            mask_head(archive, arch, mask, &path)?;
            Ok((mask, path))
        })
        .collect()
}
