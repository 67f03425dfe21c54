//! Parameter-shift statistics between a base model and a fine-tuned
//! descendant: the mean absolute element-wise difference, per tensor and
//! element-count weighted over the whole model.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{pairwise_sum, pairwise_sum_by};
use crate::tensor_store::{validate_alignment, Tensor, TensorArchive};

/// Mean of |original - finetuned| over all elements. An empty tensor has
/// shift 0.
pub fn tensor_delta_avg(original: &Tensor, finetuned: &Tensor) -> Result<f64> {
    if original.shape != finetuned.shape {
        return Err(Error::ShapeMismatch {
            name: String::new(),
            left: original.shape.clone(),
            right: finetuned.shape.clone(),
        });
    }
    Ok(mean_abs_diff(&original.values, &finetuned.values))
}

pub(crate) fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    pairwise_sum_by(a.len(), &|i| (a[i] - b[i]).abs()) / a.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaReport {
    pub model_id: String,
    pub global: f64,
    pub per_tensor: BTreeMap<String, f64>,
    pub element_counts: BTreeMap<String, usize>,
    /// Tensors present on only one side of the comparison.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl DeltaReport {
    /// Assemble a report from per-tensor shifts; `global` is derived.
    pub fn from_parts(
        model_id: impl Into<String>,
        per_tensor: BTreeMap<String, f64>,
        element_counts: BTreeMap<String, usize>,
        skipped: Vec<String>,
    ) -> Self {
        let global = weighted_global(&per_tensor, &element_counts);
        DeltaReport {
            model_id: model_id.into(),
            global,
            per_tensor,
            element_counts,
            skipped,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self).map_err(|e| Error::invalid(e.to_string()))
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::invalid(e.to_string());
        out.write_record(["name", "count", "delta_avg"]).map_err(to_err)?;
        for (name, delta) in &self.per_tensor {
            let count = self.element_counts.get(name).copied().unwrap_or(0);
            out.write_record([name.as_str(), &count.to_string(), &format!("{delta:e}")])
                .map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::invalid(e.to_string()))
    }
}

fn weighted_global(per_tensor: &BTreeMap<String, f64>, counts: &BTreeMap<String, usize>) -> f64 {
    let weighted: Vec<f64> = per_tensor
        .iter()
        .map(|(name, d)| d * counts.get(name).copied().unwrap_or(0) as f64)
        .collect();
    let total: usize = per_tensor.keys().map(|n| counts.get(n).copied().unwrap_or(0)).sum();
    if total == 0 {
        return 0.0;
    }
    pairwise_sum(&weighted) / total as f64
}

#[derive(Debug, Clone, Default)]
pub struct DeltaOptions {
    /// Only tensors whose names match are compared.
    pub name_filter: Option<Regex>,
}

/// Per-tensor and global parameter shift of `finetuned` relative to `base`,
/// over the tensors both archives share.
pub fn model_delta_report(
    base: &TensorArchive,
    finetuned: &TensorArchive,
    model_id: &str,
    options: &DeltaOptions,
) -> Result<DeltaReport> {
    let alignment = validate_alignment(&[base, finetuned])?;
    let keep = |name: &str| options.name_filter.as_ref().map_or(true, |re| re.is_match(name));
    if let Some(name) = alignment.shape_conflicts.iter().find(|n| keep(n)) {
        return Err(Error::ShapeMismatch {
            name: name.clone(),
            left: base.get(name).unwrap().shape.clone(),
            right: finetuned.get(name).unwrap().shape.clone(),
        });
    }
    let names: Vec<&String> = alignment.shared.iter().filter(|n| keep(n)).collect();
    if names.is_empty() {
        return Err(Error::invalid(format!(
            "{model_id}: no shared tensors to compare against the base"
        )));
    }
    let deltas = names
        .par_iter()
        .map(|name| {
            let a = base.read_tensor(name)?;
            let b = finetuned.read_tensor(name)?;
            Ok((mean_abs_diff(&a.values, &b.values), a.values.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut per_tensor = BTreeMap::new();
    let mut counts = BTreeMap::new();
    for (name, (delta, count)) in names.into_iter().zip(deltas) {
        per_tensor.insert(name.clone(), delta);
        counts.insert(name.clone(), count);
    }
    let skipped = alignment.partial.into_iter().filter(|n| keep(n)).collect();
    Ok(DeltaReport::from_parts(model_id, per_tensor, counts, skipped))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub model_id: String,
    pub global: f64,
    /// `global / min(global)`; infinite when the minimum is zero
    /// (serialized as null).
    pub ratio: f64,
    /// This row's global shift is zero, so it cannot anchor a ratio.
    pub zero_shift: bool,
}

/// Compare reports by global shift, largest first, each as a multiple of the
/// smallest.
pub fn delta_ratio(reports: &[DeltaReport]) -> Vec<RatioRow> {
    let min = reports.iter().map(|r| r.global).fold(f64::INFINITY, f64::min);
    let mut rows: Vec<RatioRow> = reports
        .iter()
        .map(|r| RatioRow {
            model_id: r.model_id.clone(),
            global: r.global,
            ratio: if min == 0.0 { f64::INFINITY } else { r.global / min },
            zero_shift: r.global == 0.0,
        })
        .collect();
    rows.sort_by(|a, b| b.global.total_cmp(&a.global).then_with(|| a.model_id.cmp(&b.model_id)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtype::DType;

    fn t(values: &[f64]) -> Tensor {
        Tensor::new(DType::F64, vec![values.len()], values.to_vec())
    }

    #[test]
    fn identical_tensors_have_zero_shift() {
        let a = t(&[1.0, -3.0, 7.5]);
        assert_eq!(tensor_delta_avg(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_shift() {
        let d = tensor_delta_avg(&t(&[1.0, 2.0, 3.0, 4.0]), &t(&[1.5, 1.0, 3.0, 6.0])).unwrap();
        assert_eq!(d, 0.875);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::new(DType::F64, vec![2, 2], vec![0.0; 4]);
        let b = Tensor::new(DType::F64, vec![4], vec![0.0; 4]);
        assert!(matches!(tensor_delta_avg(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn global_is_count_weighted() {
        let per = BTreeMap::from([("a".to_string(), 0.875), ("b".to_string(), 0.125)]);
        let counts = BTreeMap::from([("a".to_string(), 4), ("b".to_string(), 4)]);
        assert_eq!(DeltaReport::from_parts("m", per, counts, vec![]).global, 0.5);

        let per = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 0.0)]);
        let counts = BTreeMap::from([("a".to_string(), 1), ("b".to_string(), 3)]);
        assert_eq!(DeltaReport::from_parts("m", per, counts, vec![]).global, 0.25);
    }

    fn report(id: &str, global: f64) -> DeltaReport {
        DeltaReport {
            model_id: id.into(),
            global,
            per_tensor: BTreeMap::new(),
            element_counts: BTreeMap::new(),
            skipped: vec![],
        }
    }

    #[test]
    fn ratio_table() {
        let rows = delta_ratio(&[report("only", 0.5)]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].ratio, 1.0);

        let rows = delta_ratio(&[report("small", 0.001), report("big", 0.01)]);
        assert_eq!(rows[0].model_id, "big");
        assert!((rows[0].ratio - 10.0).abs() < 1e-12);
        assert_eq!(rows[1].ratio, 1.0);

        let rows = delta_ratio(&[report("zero", 0.0), report("some", 0.3)]);
        assert!(rows.iter().all(|r| r.ratio.is_infinite()));
        assert!(rows.iter().find(|r| r.model_id == "zero").unwrap().zero_shift);
        let json = serde_json::to_string(&rows[0]).unwrap();
        assert!(json.contains("\"ratio\":null"));
    }

    #[test]
    fn csv_columns() {
        let per = BTreeMap::from([("w".to_string(), 0.5)]);
        let counts = BTreeMap::from([("w".to_string(), 6)]);
        let r = DeltaReport::from_parts("m", per, counts, vec![]);
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "name,count,delta_avg\nw,6,5e-1\n");
    }
}
