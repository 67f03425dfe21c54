//! Multiple-choice scoring: exact accuracy of a generated answer,
//! probability accuracy from first-token option logits, and option-level KL
//! divergence between an original and an ablated model. A salience grid
//! collects all three for every masked head.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax, log_softmax};
use crate::surgery::HeadMaskSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRecord {
    pub question_id: String,
    pub option_labels: Vec<String>,
    /// First generated-token logits restricted to the option tokens.
    pub option_logits: Vec<f64>,
    /// Index of the correct option.
    pub gold: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated: Option<String>,
}

impl ChoiceRecord {
    pub fn validate(&self) -> Result<()> {
        let n = self.option_labels.len();
        if n < 2 {
            return Err(Error::invalid(format!("{}: fewer than two options", self.question_id)));
        }
        if self.option_logits.len() != n {
            return Err(Error::invalid(format!(
                "{}: {} logits for {n} options",
                self.question_id,
                self.option_logits.len()
            )));
        }
        if self.option_logits.iter().any(|x| x.is_nan()) {
            return Err(Error::invalid(format!("{}: NaN option logit", self.question_id)));
        }
        if self.gold >= n {
            return Err(Error::invalid(format!("{}: gold index {} out of range", self.question_id, self.gold)));
        }
        Ok(())
    }

    /// Option chosen by the logits; ties go to the lowest index.
    pub fn predicted(&self) -> usize {
        argmax(&self.option_logits)
    }
}

/// Read JSON Lines, one record per non-empty line.
pub fn read_records<R: BufRead>(reader: R) -> Result<Vec<ChoiceRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ChoiceRecord =
            serde_json::from_str(&line).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records<W: Write>(mut w: W, records: &[ChoiceRecord]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::invalid(e.to_string()))?;
    }
    Ok(())
}

fn check_records(records: &[ChoiceRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("no records to score"));
    }
    records.iter().try_for_each(ChoiceRecord::validate)
}

/// Fraction of records whose softmaxed option logits peak at the gold option.
pub fn probability_accuracy(records: &[ChoiceRecord]) -> Result<f64> {
    check_records(records)?;
    let correct = records.iter().filter(|r| r.predicted() == r.gold).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Map a free-form answer to an option index: trim, take the first
/// whitespace-separated token, strip surrounding punctuation, and match it
/// case-insensitively against the labels.
pub fn parse_choice(generated: &str, labels: &[String]) -> Option<usize> {
    let token = generated.split_whitespace().next()?;
    let token = token.trim_matches(|c: char| !c.is_alphanumeric());
    if token.is_empty() {
        return None;
    }
    let folded = token.to_lowercase();
    labels.iter().position(|l| l.to_lowercase() == folded)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactAccuracy {
    pub accuracy: f64,
    /// Records whose generation named no option; they count as wrong.
    pub unparseable: Vec<String>,
}

pub fn exact_accuracy(records: &[ChoiceRecord]) -> Result<ExactAccuracy> {
    check_records(records)?;
    let mut correct = 0usize;
    let mut unparseable = Vec::new();
    for r in records {
        let generated = r
            .generated
            .as_deref()
            .ok_or_else(|| Error::invalid(format!("{}: no generated answer", r.question_id)))?;
        match parse_choice(generated, &r.option_labels) {
            Some(i) if i == r.gold => correct += 1,
            Some(_) => {}
            None => unparseable.push(r.question_id.clone()),
        }
    }
    Ok(ExactAccuracy {
        accuracy: correct as f64 / records.len() as f64,
        unparseable,
    })
}

/// D(P || Q) in nats with P = softmax(p_logits), Q = softmax(q_logits).
pub fn option_kl(p_logits: &[f64], q_logits: &[f64]) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::invalid(format!(
            "option logits differ in length: {} vs {}",
            p_logits.len(),
            q_logits.len()
        )));
    }
    if p_logits.len() < 2 {
        return Err(Error::invalid("KL needs at least two options"));
    }
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp
        .iter()
        .zip(&lq)
        .map(|(a, b)| if *a == f64::NEG_INFINITY { 0.0 } else { a.exp() * (a - b) })
        .sum();
    // exact zero for identical distributions, never negative from rounding
    Ok(kl.max(0.0))
}

/// Which side of the KL is the reference distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// D(original || masked)
    #[default]
    OriginalToMasked,
    /// D(masked || original)
    MaskedToOriginal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellMetrics {
    /// `None` when the records carry no generated answers.
    pub accuracy: Option<f64>,
    pub prob_accuracy: f64,
    pub mean_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SalienceGrid {
    pub n_layers: usize,
    pub n_heads: usize,
    pub baseline: CellMetrics,
    pub cells: BTreeMap<HeadMaskSpec, CellMetrics>,
    pub kl_direction: KlDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DepthSummary {
    /// Layers `[0, shallow_end)`.
    pub shallow_end: usize,
    /// Layers `[deep_start, n_layers)`.
    pub deep_start: usize,
    pub shallow_mean_kl: f64,
    pub deep_mean_kl: f64,
    pub shallow_mean_prob_accuracy: f64,
    pub deep_mean_prob_accuracy: f64,
}

impl SalienceGrid {
    /// Mean KL and probability accuracy over the shallowest and deepest
    /// thirds of the layers (at least one layer each).
    pub fn depth_summary(&self) -> DepthSummary {
        let third = (self.n_layers / 3).max(1);
        let shallow_end = third;
        let deep_start = self.n_layers - third;
        let mean = |range: std::ops::Range<usize>, f: &dyn Fn(&CellMetrics) -> f64| {
            let vals: Vec<f64> = self
                .cells
                .iter()
                .filter(|(k, _)| range.contains(&k.layer))
                .map(|(_, c)| f(c))
                .collect();
            vals.iter().sum::<f64>() / vals.len().max(1) as f64
        };
        DepthSummary {
            shallow_end,
            deep_start,
            shallow_mean_kl: mean(0..shallow_end, &|c| c.mean_kl),
            deep_mean_kl: mean(deep_start..self.n_layers, &|c| c.mean_kl),
            shallow_mean_prob_accuracy: mean(0..shallow_end, &|c| c.prob_accuracy),
            deep_mean_prob_accuracy: mean(deep_start..self.n_layers, &|c| c.prob_accuracy),
        }
    }

    /// CSV with columns layer,head,accuracy,prob_accuracy,mean_kl.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::invalid(e.to_string());
        out.write_record(["layer", "head", "accuracy", "prob_accuracy", "mean_kl"])
            .map_err(to_err)?;
        for (mask, c) in &self.cells {
            out.write_record([
                mask.layer.to_string(),
                mask.head.to_string(),
                c.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                c.prob_accuracy.to_string(),
                c.mean_kl.to_string(),
            ])
            .map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::invalid(e.to_string()))
    }
}

fn cell_metrics(baseline: &BTreeMap<&str, &ChoiceRecord>, records: &[ChoiceRecord], direction: KlDirection) -> Result<CellMetrics> {
    let ids: BTreeSet<&str> = records.iter().map(|r| r.question_id.as_str()).collect();
    if ids.len() != records.len() || ids.len() != baseline.len() || ids.iter().any(|id| !baseline.contains_key(id)) {
        return Err(Error::invalid("question ids differ from the baseline set"));
    }
    let accuracy = if records.iter().all(|r| r.generated.is_some()) {
        Some(exact_accuracy(records)?.accuracy)
    } else {
        None
    };
    let prob_accuracy = probability_accuracy(records)?;
    let mut kl_sum = 0.0;
    for r in records {
        let base = baseline[r.question_id.as_str()];
        kl_sum += match direction {
            KlDirection::OriginalToMasked => option_kl(&base.option_logits, &r.option_logits)?,
            KlDirection::MaskedToOriginal => option_kl(&r.option_logits, &base.option_logits)?,
        };
    }
    Ok(CellMetrics {
        accuracy,
        prob_accuracy,
        mean_kl: kl_sum / records.len() as f64,
    })
}

/// Score every masked variant against the unmasked baseline.
pub fn build_salience_grid(
    baseline: &[ChoiceRecord],
    per_head: &BTreeMap<HeadMaskSpec, Vec<ChoiceRecord>>,
    n_layers: usize,
    n_heads: usize,
    direction: KlDirection,
) -> Result<SalienceGrid> {
    use rayon::prelude::*;

    check_records(baseline)?;
    let base_index: BTreeMap<&str, &ChoiceRecord> =
        baseline.iter().map(|r| (r.question_id.as_str(), r)).collect();
    if base_index.len() != baseline.len() {
        return Err(Error::invalid("duplicate question ids in baseline"));
    }
    for (mask, _) in per_head.iter() {
        if mask.layer >= n_layers || mask.head >= n_heads {
            return Err(Error::invalid(format!("head {mask} outside the {n_layers}x{n_heads} grid")));
        }
    }
    for layer in 0..n_layers {
        for head in 0..n_heads {
            if !per_head.contains_key(&HeadMaskSpec { layer, head }) {
                return Err(Error::invalid(format!("no records for head ({layer}, {head})")));
            }
        }
    }
    let baseline_cell = cell_metrics(&base_index, baseline, direction)?;
    let cells = per_head
        .par_iter()
        .map(|(mask, records)| {
            cell_metrics(&base_index, records, direction)
                .map(|c| (*mask, c))
                .map_err(|e| Error::invalid(format!("head {mask}: {e}")))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(SalienceGrid {
        n_layers,
        n_heads,
        baseline: baseline_cell,
        cells,
        kl_direction: direction,
    })
}
