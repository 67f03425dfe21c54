//! Checkpoint merging.
//!
//! Two modes are supported:
//!
//! * `average`: every merged tensor is the element-wise arithmetic mean of
//!   the candidates.
//! * `weighted`: a base model is kept with weight `alpha0` and the
//!   candidates share the remaining `1 - alpha0` according to a softmax over
//!   their parameter shifts from that base, so the most-shifted candidate
//!   receives the largest share. Shifts are taken per tensor or per model.
//!
//! Merging is split into a plan (validation, weight resolution and a
//! disposition for every tensor of every input) and its execution, so a dry
//! run reports exactly what a real run will do.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::delta::DeltaReport;
use crate::dtype::{self, DType};
use crate::error::{Error, Result};
use crate::tensor_store::{
    validate_alignment, ArchiveWriter, Metadata, TensorArchive, TensorSpec, WriteOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMode {
    Average,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerTensor,
    PerModel,
}

/// What happens to tensors that are not present in every input.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum NonsharedPolicy {
    /// Drop them from the output.
    Exclude,
    /// Copy from the first candidate holding the tensor, then the base.
    #[default]
    CopyFirst,
    /// Copy from the named input, which must hold every such tensor.
    CopyFrom(String),
}

impl FromStr for NonsharedPolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "exclude" => Ok(NonsharedPolicy::Exclude),
            "copy_first" => Ok(NonsharedPolicy::CopyFirst),
            _ => match s.strip_prefix("copy_from:") {
                Some(id) if !id.is_empty() => Ok(NonsharedPolicy::CopyFrom(id.to_string())),
                _ => Err(format!(
                    "unknown non-shared policy {s:?} (exclude | copy_first | copy_from:<id>)"
                )),
            },
        }
    }
}

impl TryFrom<String> for NonsharedPolicy {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl fmt::Display for NonsharedPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NonsharedPolicy::Exclude => f.write_str("exclude"),
            NonsharedPolicy::CopyFirst => f.write_str("copy_first"),
            NonsharedPolicy::CopyFrom(id) => write!(f, "copy_from:{id}"),
        }
    }
}

impl From<NonsharedPolicy> for String {
    fn from(p: NonsharedPolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OutputDType {
    /// Merged tensors take the dtype of the reference input (the base in
    /// weighted mode, the first candidate in average mode); copies keep
    /// their source dtype.
    #[default]
    Preserve,
    Fixed(DType),
}

impl FromStr for OutputDType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "preserve" {
            return Ok(OutputDType::Preserve);
        }
        s.parse::<DType>()
            .map(OutputDType::Fixed)
            .map_err(|s| format!("unknown output dtype {s:?} (preserve | F64 | F32 | F16 | BF16)"))
    }
}

impl TryFrom<String> for OutputDType {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<OutputDType> for String {
    fn from(d: OutputDType) -> String {
        match d {
            OutputDType::Preserve => "preserve".into(),
            OutputDType::Fixed(d) => d.as_str().into(),
        }
    }
}

fn default_alpha0() -> f64 {
    0.5
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecipe {
    pub mode: MergeMode,
    /// Weight kept by the base model (weighted mode).
    #[serde(default = "default_alpha0")]
    pub alpha0: f64,
    /// Softmax temperature applied to the parameter shifts.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub nonshared_policy: NonsharedPolicy,
    #[serde(default)]
    pub output_dtype: OutputDType,
    /// Regex; shared tensors whose names do not match are copied from the
    /// reference input instead of merged.
    #[serde(default)]
    pub name_filter: Option<String>,
    /// Clamp values that overflow the output dtype instead of failing.
    #[serde(default)]
    pub saturate: bool,
}

impl MergeRecipe {
    pub fn average() -> Self {
        MergeRecipe {
            mode: MergeMode::Average,
            alpha0: default_alpha0(),
            temperature: default_temperature(),
            granularity: Granularity::default(),
            nonshared_policy: NonsharedPolicy::default(),
            output_dtype: OutputDType::default(),
            name_filter: None,
            saturate: false,
        }
    }

    pub fn weighted(alpha0: f64, temperature: f64, granularity: Granularity) -> Self {
        MergeRecipe {
            mode: MergeMode::Weighted,
            alpha0,
            temperature,
            granularity,
            ..MergeRecipe::average()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::invalid(format!("alpha0 {} outside [0, 1]", self.alpha0)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature {} must be positive and finite",
                self.temperature
            )));
        }
        self.compiled_filter()?;
        Ok(())
    }

    fn compiled_filter(&self) -> Result<Option<Regex>> {
        self.name_filter
            .as_deref()
            .map(|p| Regex::new(p).map_err(|e| Error::invalid(format!("name_filter: {e}"))))
            .transpose()
    }
}

/// Softmax of `deltas / temperature`, shifted by the maximum for stability.
pub fn softmax_weights(deltas: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if deltas.is_empty() {
        return Err(Error::invalid("softmax over an empty set"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!("temperature {temperature} must be positive")));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("non-finite parameter shift"));
    }
    let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let exps: Vec<f64> = deltas.iter().map(|d| (d / temperature - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Resolved candidate weights (alpha_1..alpha_n, before base rescaling).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeWeights {
    /// One vector shared by every merged tensor.
    Global(Vec<f64>),
    PerTensor(BTreeMap<String, Vec<f64>>),
}

impl MergeWeights {
    pub fn for_tensor(&self, name: &str) -> Option<&[f64]> {
        match self {
            MergeWeights::Global(w) => Some(w),
            MergeWeights::PerTensor(map) => map.get(name).map(Vec::as_slice),
        }
    }

    /// `{tensor: [alpha_i]}` over the given tensors.
    pub fn expanded<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> BTreeMap<String, Vec<f64>> {
        names
            .into_iter()
            .filter_map(|n| self.for_tensor(n).map(|w| (n.to_string(), w.to_vec())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum Disposition {
    Merge,
    Copy { from: String },
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceRole {
    Base,
    Candidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceRef {
    pub id: String,
    pub path: PathBuf,
    pub role: SourceRole,
}

/// A checkpoint taking part in a merge, under a caller-chosen id.
#[derive(Debug, Clone)]
pub struct MergeInput {
    pub id: String,
    pub archive: TensorArchive,
}

impl MergeInput {
    pub fn new(id: impl Into<String>, archive: TensorArchive) -> Self {
        MergeInput {
            id: id.into(),
            archive,
        }
    }

    /// Open `path`, using the file stem as the id.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Ok(MergeInput::new(id, TensorArchive::open(path)?))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OutputTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

/// Fully resolved merge: weights, one disposition per input tensor, and the
/// output layout. Executing it writes no more and no less than it lists.
#[derive(Debug, Clone, Serialize)]
pub struct MergePlan {
    pub recipe: MergeRecipe,
    pub sources: Vec<SourceRef>,
    pub weights: MergeWeights,
    pub dispositions: BTreeMap<String, Disposition>,
    pub outputs: Vec<OutputTensor>,
}

impl MergePlan {
    pub fn merged_names(&self) -> impl Iterator<Item = &str> {
        self.dispositions
            .iter()
            .filter(|(_, d)| matches!(d, Disposition::Merge))
            .map(|(n, _)| n.as_str())
    }

    /// The `{tensor: [alpha_i]}` sidecar for every merged tensor.
    pub fn weight_sidecar(&self) -> BTreeMap<String, Vec<f64>> {
        self.weights.expanded(self.merged_names())
    }
}

/// Validate inputs and resolve everything a merge needs, without touching
/// tensor data beyond what weight resolution requires.
pub fn plan_merge(
    recipe: &MergeRecipe,
    base: Option<&MergeInput>,
    models: &[MergeInput],
    delta_reports: &[DeltaReport],
) -> Result<MergePlan> {
    recipe.validate()?;
    let filter = recipe.compiled_filter()?;
    match recipe.mode {
        MergeMode::Average => {
            if base.is_some() {
                return Err(Error::invalid("average merging takes no base model"));
            }
            if models.len() < 2 {
                return Err(Error::invalid("average merging needs at least two models"));
            }
        }
        MergeMode::Weighted => {
            if base.is_none() {
                return Err(Error::invalid("weighted merging needs a base model"));
            }
            if models.is_empty() {
                return Err(Error::invalid("weighted merging needs at least one candidate"));
            }
            if delta_reports.len() != models.len() {
                return Err(Error::invalid(format!(
                    "{} delta reports for {} candidate models",
                    delta_reports.len(),
                    models.len()
                )));
            }
            for (model, report) in models.iter().zip(delta_reports) {
                if model.id != report.model_id {
                    return Err(Error::invalid(format!(
                        "delta report {:?} does not match candidate {:?}",
                        report.model_id, model.id
                    )));
                }
            }
        }
    }

    let mut sources: Vec<(&MergeInput, SourceRole)> = Vec::new();
    if let Some(b) = base {
        sources.push((b, SourceRole::Base));
    }
    sources.extend(models.iter().map(|m| (m, SourceRole::Candidate)));
    let mut ids = BTreeSet::new();
    for (input, _) in &sources {
        if !ids.insert(input.id.as_str()) {
            return Err(Error::invalid(format!("duplicate input id {:?}", input.id)));
        }
    }
    if let NonsharedPolicy::CopyFrom(id) = &recipe.nonshared_policy {
        if !ids.contains(id.as_str()) {
            return Err(Error::invalid(format!("copy_from names unknown input {id:?}")));
        }
    }
    let reference = sources[0].0;

    let archives: Vec<&TensorArchive> = sources.iter().map(|(s, _)| &s.archive).collect();
    let alignment = validate_alignment(&archives)?;
    let keep = |name: &str| filter.as_ref().map_or(true, |re| re.is_match(name));

    let mut dispositions = BTreeMap::new();
    for name in &alignment.shape_conflicts {
        if keep(name) {
            let shapes: Vec<&Vec<usize>> =
                archives.iter().map(|a| &a.get(name).unwrap().shape).collect();
            let other = shapes.iter().find(|s| **s != shapes[0]).unwrap();
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                left: shapes[0].clone(),
                right: (*other).clone(),
            });
        }
        dispositions.insert(name.clone(), Disposition::Copy { from: reference.id.clone() });
    }
    for name in &alignment.shared {
        let d = if keep(name) {
            Disposition::Merge
        } else {
            Disposition::Copy { from: reference.id.clone() }
        };
        dispositions.insert(name.clone(), d);
    }
    if !dispositions.values().any(|d| matches!(d, Disposition::Merge)) {
        return Err(Error::invalid("no shared tensors to merge"));
    }
    for name in &alignment.partial {
        let d = match &recipe.nonshared_policy {
            NonsharedPolicy::Exclude => Disposition::Exclude,
            NonsharedPolicy::CopyFrom(id) => {
                let holder = sources.iter().find(|(s, _)| &s.id == id).unwrap().0;
                if !holder.archive.contains(name) {
                    return Err(Error::invalid(format!(
                        "copy_from {id:?} lacks non-shared tensor {name}"
                    )));
                }
                Disposition::Copy { from: id.clone() }
            }
            NonsharedPolicy::CopyFirst => {
                let holder = models
                    .iter()
                    .chain(base)
                    .find(|s| s.archive.contains(name))
                    .expect("partial tensors exist in some input");
                Disposition::Copy { from: holder.id.clone() }
            }
        };
        dispositions.insert(name.clone(), d);
    }

    let weights = resolve_weights(recipe, models.len(), &dispositions, delta_reports)?;

    let outputs = dispositions
        .iter()
        .filter_map(|(name, d)| {
            let source = match d {
                Disposition::Merge => reference,
                Disposition::Copy { from } => sources.iter().find(|(s, _)| &s.id == from)?.0,
                Disposition::Exclude => return None,
            };
            let meta = source.archive.get(name)?;
            let dtype = match recipe.output_dtype {
                OutputDType::Preserve => meta.dtype,
                OutputDType::Fixed(d) => d,
            };
            Some(OutputTensor {
                name: name.clone(),
                dtype,
                shape: meta.shape.clone(),
            })
        })
        .collect();

    Ok(MergePlan {
        recipe: recipe.clone(),
        sources: sources
            .iter()
            .map(|(s, role)| SourceRef {
                id: s.id.clone(),
                path: s.archive.path().to_path_buf(),
                role: *role,
            })
            .collect(),
        weights,
        dispositions,
        outputs,
    })
}

fn resolve_weights(
    recipe: &MergeRecipe,
    n_models: usize,
    dispositions: &BTreeMap<String, Disposition>,
    reports: &[DeltaReport],
) -> Result<MergeWeights> {
    if recipe.mode == MergeMode::Average {
        return Ok(MergeWeights::Global(vec![1.0 / n_models as f64; n_models]));
    }
    match recipe.granularity {
        Granularity::PerModel => {
            let globals: Vec<f64> = reports.iter().map(|r| r.global).collect();
            Ok(MergeWeights::Global(softmax_weights(&globals, recipe.temperature)?))
        }
        Granularity::PerTensor => {
            let mut map = BTreeMap::new();
            for (name, d) in dispositions {
                if *d != Disposition::Merge {
                    continue;
                }
                let deltas = reports
                    .iter()
                    .map(|r| {
                        r.per_tensor.get(name).copied().ok_or_else(|| {
                            Error::invalid(format!(
                                "delta report {:?} has no entry for shared tensor {name}",
                                r.model_id
                            ))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                map.insert(name.clone(), softmax_weights(&deltas, recipe.temperature)?);
            }
            Ok(MergeWeights::PerTensor(map))
        }
    }
}

/// Result of an executed merge.
#[derive(Debug, Clone)]
pub struct MergeOutcome {
    pub archive: TensorArchive,
    pub plan: MergePlan,
}

/// Carry out a plan, writing the merged archive to `out`.
pub fn execute_plan(
    plan: &MergePlan,
    base: Option<&MergeInput>,
    models: &[MergeInput],
    out: impl AsRef<Path>,
) -> Result<TensorArchive> {
    let inputs: Vec<&MergeInput> = base.into_iter().chain(models).collect();
    if inputs.len() != plan.sources.len()
        || inputs.iter().zip(&plan.sources).any(|(i, s)| i.id != s.id)
    {
        return Err(Error::invalid("inputs do not match the merge plan"));
    }
    let by_id: BTreeMap<&str, &MergeInput> = inputs.iter().map(|i| (i.id.as_str(), *i)).collect();

    let specs: Vec<TensorSpec> = plan
        .outputs
        .iter()
        .map(|o| TensorSpec {
            name: o.name.clone(),
            dtype: o.dtype,
            shape: o.shape.clone(),
        })
        .collect();
    let options = WriteOptions {
        saturate: plan.recipe.saturate,
    };
    // the reference input's metadata (e.g. a model config) carries over
    let mut metadata = inputs[0].archive.metadata().cloned().unwrap_or_default();
    metadata.extend(merge_metadata(plan));
    let mut writer = ArchiveWriter::create(out, specs, Some(&metadata), options)?;

    // Bounded fan-out: a window of tensors is computed in parallel, then
    // written in plan order.
    let window = rayon::current_num_threads().max(1) * 2;
    for chunk in plan.outputs.chunks(window) {
        let payloads = chunk
            .par_iter()
            .map(|o| produce_tensor(plan, o, base, models, &by_id))
            .collect::<Result<Vec<Vec<u8>>>>()?;
        for (o, bytes) in chunk.iter().zip(payloads) {
            writer.write_raw(&o.name, &bytes)?;
        }
    }
    writer.finish()
}

fn merge_metadata(plan: &MergePlan) -> Metadata {
    let r = &plan.recipe;
    let mut meta = Metadata::new();
    meta.insert(
        "merge_mode".into(),
        match r.mode {
            MergeMode::Average => "average".into(),
            MergeMode::Weighted => "weighted".into(),
        },
    );
    if r.mode == MergeMode::Weighted {
        meta.insert("merge_alpha0".into(), r.alpha0.to_string());
        meta.insert("merge_temperature".into(), r.temperature.to_string());
    }
    let ids: Vec<&str> = plan.sources.iter().map(|s| s.id.as_str()).collect();
    meta.insert("merge_sources".into(), ids.join(","));
    meta
}

fn produce_tensor(
    plan: &MergePlan,
    out: &OutputTensor,
    base: Option<&MergeInput>,
    models: &[MergeInput],
    by_id: &BTreeMap<&str, &MergeInput>,
) -> Result<Vec<u8>> {
    let saturate = plan.recipe.saturate;
    match &plan.dispositions[&out.name] {
        Disposition::Copy { from } => {
            let source = &by_id[from.as_str()].archive;
            let meta = source.get(&out.name).ok_or_else(|| Error::UnknownTensor(out.name.clone()))?;
            if meta.dtype == out.dtype {
                source.read_raw(&out.name)
            } else {
                let t = source.read_tensor(&out.name)?;
                dtype::encode(out.dtype, &t.values, saturate, &out.name)
            }
        }
        Disposition::Merge => {
            let candidates = models
                .iter()
                .map(|m| m.archive.read_tensor(&out.name).map(|t| t.values))
                .collect::<Result<Vec<_>>>()?;
            let values = match plan.recipe.mode {
                MergeMode::Average => average_values(&candidates),
                MergeMode::Weighted => {
                    let base = base.expect("weighted plan has a base");
                    let base_values = base.archive.read_tensor(&out.name)?.values;
                    let alphas = plan
                        .weights
                        .for_tensor(&out.name)
                        .ok_or_else(|| Error::invalid(format!("no weights for {}", out.name)))?;
                    weighted_values(&base_values, &candidates, alphas, plan.recipe.alpha0)
                }
            };
            dtype::encode(out.dtype, &values, saturate, &out.name)
        }
        Disposition::Exclude => unreachable!("excluded tensors are not planned outputs"),
    }
}

/// Keep `v` inside the hull of its inputs. Convex weights put it there up to
/// rounding; clamping removes that rounding.
fn clamp_to_inputs(v: f64, lo: f64, hi: f64) -> f64 {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

/// Element-wise arithmetic mean.
pub fn average_values(models: &[Vec<f64>]) -> Vec<f64> {
    let n = models.len() as f64;
    (0..models[0].len())
        .map(|i| {
            let mut sum = 0.0;
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for m in models {
                sum += m[i];
                lo = lo.min(m[i]);
                hi = hi.max(m[i]);
            }
            clamp_to_inputs(sum / n, lo, hi)
        })
        .collect()
}

/// `alpha0 * base + (1 - alpha0) * sum_i alpha_i * model_i`, element-wise.
pub fn weighted_values(base: &[f64], models: &[Vec<f64>], alphas: &[f64], alpha0: f64) -> Vec<f64> {
    if alpha0 == 1.0 {
        return base.to_vec();
    }
    (0..base.len())
        .map(|i| {
            let mut acc = 0.0;
            let mut lo = base[i];
            let mut hi = base[i];
            for (m, a) in models.iter().zip(alphas) {
                acc += a * m[i];
                lo = lo.min(m[i]);
                hi = hi.max(m[i]);
            }
            clamp_to_inputs(alpha0 * base[i] + (1.0 - alpha0) * acc, lo, hi)
        })
        .collect()
}

/// Average-merge `models` into `out`.
pub fn average_merge(models: &[MergeInput], recipe: &MergeRecipe, out: impl AsRef<Path>) -> Result<MergeOutcome> {
    if recipe.mode != MergeMode::Average {
        return Err(Error::invalid("recipe mode is not average"));
    }
    let plan = plan_merge(recipe, None, models, &[])?;
    let archive = execute_plan(&plan, None, models, out)?;
    Ok(MergeOutcome { archive, plan })
}

/// Shift-weighted merge of `models` with base retention.
pub fn weighted_merge(
    base: &MergeInput,
    models: &[MergeInput],
    delta_reports: &[DeltaReport],
    recipe: &MergeRecipe,
    out: impl AsRef<Path>,
) -> Result<MergeOutcome> {
    if recipe.mode != MergeMode::Weighted {
        return Err(Error::invalid("recipe mode is not weighted"));
    }
    let plan = plan_merge(recipe, Some(base), models, delta_reports)?;
    let archive = execute_plan(&plan, Some(base), models, out)?;
    Ok(MergeOutcome { archive, plan })
}
