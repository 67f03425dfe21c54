use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::Args;
use omniweights_core::merge::{MergeInput, MergeMode, MergePlan, MergeRecipe};
use omniweights_core::metrics::{exact_accuracy, option_kl, probability_accuracy, read_records, write_records};
use omniweights_core::surgery::{mask_grid, mask_head, ArchitectureSpec, HeadMaskSpec};
use omniweights_core::{
    build_salience_grid, delta_ratio, execute_plan, model_delta_report, plan_merge, ChoiceRecord, DeltaOptions,
    DeltaReport, KlDirection, TensorArchive,
};
use omniweights_toylab::analysis::delta_direction_analysis;
use omniweights_toylab::eval::{accuracy_on, choice_records, eval_samples, masked_records};
use omniweights_toylab::train::{finetune_sweep, train, TrajectoryLog};
use omniweights_toylab::{architecture_spec, TaskId, ToyConfig, ToyModel, TrainConfig};
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::{from_value, layered_config, read_text, stem, Outputs};
use crate::{CliError, CliResult, Command, GlobalOptions};

pub fn run(global: &GlobalOptions, command: Command) -> CliResult {
    let out = Outputs::new(&global.output_dir);
    match command {
        Command::Inspect(a) => inspect(a),
        Command::Delta(a) => delta(a, out),
        Command::Ratio(a) => ratio(a, out),
        Command::Merge(a) => merge(a, out, true),
        Command::Plan(a) => merge(a, out, false),
        Command::MaskHead(a) => mask_head_cmd(a, out),
        Command::MaskGrid(a) => mask_grid_cmd(a, out),
        Command::Score(a) => score(a, out),
        Command::Grid(a) => grid(a, out),
        Command::LabInit(a) => lab_init(a, global, out),
        Command::LabTrain(a) => lab_train(a, global, out),
        Command::LabEval(a) => lab_eval(a, global, out),
        Command::LabSweep(a) => lab_sweep(a, global, out),
        Command::LabDirections(a) => lab_directions(a, out),
    }
}

fn open(path: &Path, out: &mut Outputs) -> CliResult<TensorArchive> {
    out.input(path);
    Ok(TensorArchive::open(path)?)
}

fn print_json<T: Serialize>(value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::invalid(e.to_string()))?;
    println!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// archives and deltas

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub archive: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

fn inspect(a: InspectArgs) -> CliResult {
    let archive = TensorArchive::open(&a.archive)?;
    let entries = archive.entries_by_offset();
    let elements: usize = entries.iter().map(|m| m.element_count()).sum();
    let bytes: u64 = entries.iter().map(|m| m.byte_len()).sum();
    if a.json {
        let rows: Vec<Value> = entries
            .iter()
            .map(|m| json!({"name": m.name, "dtype": m.dtype.as_str(), "shape": m.shape, "bytes": m.byte_len()}))
            .collect();
        return print_json(&json!({
            "tensors": rows,
            "metadata": archive.metadata(),
            "total_tensors": entries.len(),
            "total_elements": elements,
            "total_bytes": bytes,
        }));
    }
    let width = entries.iter().map(|m| m.name.len()).max().unwrap_or(4).max(4);
    println!("{:<width$}  {:<5}  {:<16}  {:>12}", "name", "dtype", "shape", "bytes");
    for m in &entries {
        let shape = format!("{:?}", m.shape);
        println!("{:<width$}  {:<5}  {:<16}  {:>12}", m.name, m.dtype.as_str(), shape, m.byte_len());
    }
    println!("total: {} tensors, {elements} elements, {bytes} bytes", entries.len());
    Ok(())
}

#[derive(Debug, Args)]
pub struct DeltaArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// Fine-tuned model; repeat for several. The file stem is the model id.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Only compare tensors whose names match this regex.
    #[arg(long)]
    pub name_filter: Option<String>,
}

fn delta(a: DeltaArgs, mut out: Outputs) -> CliResult {
    let name_filter = a
        .name_filter
        .as_deref()
        .map(regex::Regex::new)
        .transpose()
        .map_err(|e| CliError::invalid(format!("name_filter: {e}")))?;
    let options = DeltaOptions { name_filter };
    let base = open(&a.base, &mut out)?;
    let mut reports = Vec::new();
    for path in &a.models {
        let model = open(path, &mut out)?;
        reports.push(model_delta_report(&base, &model, &stem(path), &options)?);
    }
    for r in &reports {
        out.write_with(format!("{}.delta.json", r.model_id), |w| r.write_json(w))?;
        out.write_with(format!("{}.delta.csv", r.model_id), |w| r.write_csv(w))?;
        println!("{}\tglobal_delta_avg={:e}", r.model_id, r.global);
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RatioArgs {
    /// Delta reports written by `delta`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
}

fn read_report(path: &Path) -> CliResult<DeltaReport> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

fn ratio(a: RatioArgs, out: Outputs) -> CliResult {
    let reports = a.reports.iter().map(|p| read_report(p)).collect::<CliResult<Vec<_>>>()?;
    let rows = delta_ratio(&reports);
    out.write_json("ratio.json", &rows)?;
    for r in &rows {
        println!("{}\t{:e}\t{}", r.model_id, r.global, r.ratio);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// merging

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Recipe JSON: the merge recipe fields plus `base`, `models`,
    /// `delta_reports` and `output`. Flags override the file.
    #[arg(long)]
    pub recipe: Option<PathBuf>,
    #[arg(long, value_parser = ["average", "weighted"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha0: Option<f64>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long, value_parser = ["per_tensor", "per_model"])]
    pub granularity: Option<String>,
    /// exclude | copy_first | copy_from:<model id>
    #[arg(long)]
    pub nonshared_policy: Option<String>,
    /// preserve | F64 | F32 | F16 | BF16
    #[arg(long)]
    pub output_dtype: Option<String>,
    #[arg(long)]
    pub name_filter: Option<String>,
    #[arg(long)]
    pub saturate: bool,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long = "models", num_args = 1..)]
    pub models: Vec<PathBuf>,
    /// Precomputed delta reports for weighted merging; computed from the
    /// inputs when absent.
    #[arg(long = "delta-reports", num_args = 1..)]
    pub delta_reports: Vec<PathBuf>,
    /// Output archive name inside the output directory.
    #[arg(long)]
    pub output: Option<String>,
}

#[derive(Debug, serde::Deserialize)]
struct MergeJob {
    #[serde(flatten)]
    recipe: MergeRecipe,
    #[serde(default)]
    base: Option<PathBuf>,
    #[serde(default)]
    models: Vec<PathBuf>,
    #[serde(default)]
    delta_reports: Vec<PathBuf>,
    #[serde(default)]
    output: Option<String>,
}

fn paths_value(paths: &[PathBuf]) -> Option<Value> {
    (!paths.is_empty()).then(|| json!(paths))
}

fn merge(a: MergeArgs, mut out: Outputs, write_tensors: bool) -> CliResult {
    let flags = vec![
        ("mode", a.mode.map(Value::from)),
        ("alpha0", a.alpha0.map(Value::from)),
        ("temperature", a.temperature.map(Value::from)),
        ("granularity", a.granularity.map(Value::from)),
        ("nonshared_policy", a.nonshared_policy.map(Value::from)),
        ("output_dtype", a.output_dtype.map(Value::from)),
        ("name_filter", a.name_filter.map(Value::from)),
        ("saturate", a.saturate.then_some(Value::Bool(true))),
        ("base", a.base.map(|p| json!(p))),
        ("models", paths_value(&a.models)),
        ("delta_reports", paths_value(&a.delta_reports)),
        ("output", a.output.map(Value::from)),
    ];
    let job: MergeJob = from_value(layered_config(json!({}), a.recipe.as_deref(), flags)?, "recipe")?;
    job.recipe.validate()?;
    if job.models.is_empty() {
        return Err(CliError::invalid("recipe lists no models"));
    }

    let base = match (&job.base, job.recipe.mode) {
        (Some(p), MergeMode::Weighted) => Some(MergeInput::new(stem(p), open(p, &mut out)?)),
        (None, MergeMode::Weighted) => return Err(CliError::invalid("weighted merging needs a base model")),
        (Some(_), MergeMode::Average) => return Err(CliError::invalid("average merging takes no base model")),
        (None, MergeMode::Average) => None,
    };
    let models = job
        .models
        .iter()
        .map(|p| Ok(MergeInput::new(stem(p), open(p, &mut out)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let reports = match &base {
        Some(b) if job.delta_reports.is_empty() => models
            .iter()
            .map(|m| Ok(model_delta_report(&b.archive, &m.archive, &m.id, &DeltaOptions::default())?))
            .collect::<CliResult<Vec<_>>>()?,
        _ => job.delta_reports.iter().map(|p| read_report(p)).collect::<CliResult<Vec<_>>>()?,
    };
    let plan = plan_merge(&job.recipe, base.as_ref(), &models, &reports)?;

    let name = job.output.unwrap_or_else(|| "merged.safetensors".into());
    let out_stem = stem(Path::new(&name));
    let archive_path = out.path(&name)?;
    // check every output name before anything is written
    out.path(format!("{out_stem}.plan.json"))?;
    out.path(format!("{out_stem}.weights.json"))?;
    out.write_json(format!("{out_stem}.plan.json"), &plan)?;
    print_plan_summary(&plan);
    if !write_tensors {
        return Ok(());
    }
    out.prepare()?;
    execute_plan(&plan, base.as_ref(), &models, &archive_path)?;
    out.write_json(format!("{out_stem}.weights.json"), &plan.weight_sidecar())?;
    println!("wrote {}", archive_path.display());
    Ok(())
}

fn print_plan_summary(plan: &MergePlan) {
    use omniweights_core::Disposition;
    let mut counts = [0usize; 3];
    for d in plan.dispositions.values() {
        counts[match d {
            Disposition::Merge => 0,
            Disposition::Copy { .. } => 1,
            Disposition::Exclude => 2,
        }] += 1;
    }
    println!("merge={} copy={} exclude={}", counts[0], counts[1], counts[2]);
}

// ---------------------------------------------------------------------------
// head surgery and scoring

/// Architecture from a JSON file, or from the toy config stored in the
/// archive metadata when no file is given.
fn resolve_arch(arch: Option<&Path>, archive: &TensorArchive) -> CliResult<ArchitectureSpec> {
    match arch {
        Some(p) => serde_json::from_str(&read_text(p)?).map_err(|e| CliError::invalid(format!("{}: {e}", p.display()))),
        None => {
            let model = ToyModel::load(archive, None).map_err(|_| {
                CliError::invalid("no --arch given and the archive carries no toy model config")
            })?;
            Ok(architecture_spec(&model.cfg))
        }
    }
}

fn parse_mask(s: &str) -> Result<HeadMaskSpec, String> {
    let (l, h) = s.split_once(':').ok_or_else(|| format!("expected LAYER:HEAD, got {s:?}"))?;
    let layer = l.trim().parse().map_err(|_| format!("bad layer in {s:?}"))?;
    let head = h.trim().parse().map_err(|_| format!("bad head in {s:?}"))?;
    Ok(HeadMaskSpec::new(layer, head))
}

#[derive(Debug, Args)]
pub struct MaskHeadArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Architecture JSON; defaults to the toy config in the archive metadata.
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long)]
    pub layer: usize,
    #[arg(long)]
    pub head: usize,
    /// Output archive name; defaults to `masked_L{layer}_H{head}.safetensors`.
    #[arg(long)]
    pub output: Option<String>,
}

fn mask_head_cmd(a: MaskHeadArgs, mut out: Outputs) -> CliResult {
    let archive = open(&a.model, &mut out)?;
    let arch = resolve_arch(a.arch.as_deref(), &archive)?;
    let mask = HeadMaskSpec::new(a.layer, a.head);
    arch.check_archive(&archive)?;
    if mask.layer >= arch.n_layers || mask.head >= arch.n_heads {
        return Err(CliError::invalid(format!(
            "head {mask} out of range for {} layers x {} heads",
            arch.n_layers, arch.n_heads
        )));
    }
    let path = out.path(a.output.unwrap_or_else(|| format!("{}.safetensors", mask.label())))?;
    out.prepare()?;
    mask_head(&archive, &arch, mask, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct MaskGridArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub arch: Option<PathBuf>,
    #[arg(long, default_value = "safetensors")]
    pub extension: String,
}

fn mask_grid_cmd(a: MaskGridArgs, mut out: Outputs) -> CliResult {
    let archive = open(&a.model, &mut out)?;
    let arch = resolve_arch(a.arch.as_deref(), &archive)?;
    arch.check_archive(&archive)?;
    let dir = out.path("")?;
    let written = mask_grid(&archive, &arch, &dir, &a.extension)?;
    println!("wrote {} masked archives to {}", written.len(), dir.display());
    Ok(())
}

fn load_records(path: &Path) -> CliResult<Vec<ChoiceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read_records(BufReader::new(file)).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Choice records (JSON Lines).
    #[arg(long)]
    pub records: PathBuf,
    /// Reference records of the unmodified model, for option-level KL.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    #[arg(long, value_parser = ["original_to_masked", "masked_to_original"], default_value = "original_to_masked")]
    pub kl_direction: String,
    #[arg(long, default_value = "score.json")]
    pub output: String,
}

#[derive(Serialize)]
struct ScoreReport {
    records: usize,
    prob_accuracy: f64,
    /// Present when the records carry generated answers.
    exact_accuracy: Option<f64>,
    unparseable: Vec<String>,
    mean_kl: Option<f64>,
}

fn score(a: ScoreArgs, out: Outputs) -> CliResult {
    let records = load_records(&a.records)?;
    let prob_accuracy = probability_accuracy(&records)?;
    let (exact, unparseable) = if records.iter().all(|r| r.generated.is_some()) {
        let e = exact_accuracy(&records)?;
        (Some(e.accuracy), e.unparseable)
    } else {
        (None, Vec::new())
    };
    let mean_kl = match &a.baseline {
        None => None,
        Some(path) => {
            let baseline = load_records(path)?;
            let by_id: BTreeMap<&str, &ChoiceRecord> = baseline.iter().map(|r| (r.question_id.as_str(), r)).collect();
            let mut total = 0.0;
            for r in &records {
                let b = by_id
                    .get(r.question_id.as_str())
                    .ok_or_else(|| CliError::invalid(format!("{} missing from the baseline", r.question_id)))?;
                total += match a.kl_direction.as_str() {
                    "masked_to_original" => option_kl(&r.option_logits, &b.option_logits)?,
                    _ => option_kl(&b.option_logits, &r.option_logits)?,
                };
            }
            Some(total / records.len() as f64)
        }
    };
    let report = ScoreReport {
        records: records.len(),
        prob_accuracy,
        exact_accuracy: exact,
        unparseable,
        mean_kl,
    };
    out.write_json(&a.output, &report)?;
    print_json(&report)
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub baseline: PathBuf,
    /// Directory holding `masked_L{layer}_H{head}.jsonl` for every head.
    #[arg(long)]
    pub records_dir: PathBuf,
    #[arg(long)]
    pub layers: usize,
    #[arg(long)]
    pub heads: usize,
    #[arg(long, value_parser = ["original_to_masked", "masked_to_original"], default_value = "original_to_masked")]
    pub kl_direction: String,
}

fn grid(a: GridArgs, out: Outputs) -> CliResult {
    let baseline = load_records(&a.baseline)?;
    let mut per_head = BTreeMap::new();
    for layer in 0..a.layers {
        for head in 0..a.heads {
            let mask = HeadMaskSpec::new(layer, head);
            let path = a.records_dir.join(format!("{}.jsonl", mask.label()));
            per_head.insert(mask, load_records(&path)?);
        }
    }
    let direction: KlDirection = from_value(Value::from(a.kl_direction), "kl_direction")?;
    let grid = build_salience_grid(&baseline, &per_head, a.layers, a.heads, direction)?;
    let summary = json!({
        "n_layers": grid.n_layers,
        "n_heads": grid.n_heads,
        "kl_direction": grid.kl_direction,
        "baseline": grid.baseline,
        "depth_summary": grid.depth_summary(),
    });
    out.path("grid.json")?;
    out.write_with("grid.csv", |w| grid.write_csv(w))?;
    out.write_json("grid.json", &summary)?;
    print_json(&summary)
}

// ---------------------------------------------------------------------------
// toy lab

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

#[derive(Debug, Args)]
pub struct LabInitArgs {
    /// Model config JSON (fields of the toy config); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub mlp_dim: Option<usize>,
    #[arg(long, default_value = "base.safetensors")]
    pub output: String,
}

fn lab_init(a: LabInitArgs, global: &GlobalOptions, out: Outputs) -> CliResult {
    let flags = vec![
        ("vocab", a.vocab.map(Value::from)),
        ("context", a.context.map(Value::from)),
        ("n_layers", a.n_layers.map(Value::from)),
        ("n_heads", a.n_heads.map(Value::from)),
        ("head_dim", a.head_dim.map(Value::from)),
        ("hidden_dim", a.hidden_dim.map(Value::from)),
        ("mlp_dim", a.mlp_dim.map(Value::from)),
    ];
    let cfg: ToyConfig = from_value(
        layered_config(to_value(&ToyConfig::default()), a.config.as_deref(), flags)?,
        "model config",
    )?;
    cfg.validate()?;
    let seed = global.seed.unwrap_or(0);
    let path = out.path(&a.output)?;
    out.prepare()?;
    let model = ToyModel::init(&cfg, seed)?;
    model.save(&path, None)?;
    println!("wrote {} ({} parameters, seed {seed})", path.display(), cfg.parameter_count());
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Mixture(Vec<(TaskId, usize)>);

fn parse_mixture(s: &str) -> Result<Mixture, String> {
    s.split(',')
        .map(|part| {
            let (task, weight) = part.split_once(':').unwrap_or((part, "1"));
            let task: TaskId = task.trim().parse()?;
            let weight = weight.trim().parse().map_err(|_| format!("bad proportion in {part:?}"))?;
            Ok((task, weight))
        })
        .collect::<Result<_, String>>()
        .map(Mixture)
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training config JSON (fields of the train config); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Data-order seed.
    #[arg(long = "train-seed")]
    pub train_seed: Option<u64>,
    /// Single task; shorthand for a one-task mixture.
    #[arg(long, conflicts_with = "mixture", value_parser = |s: &str| s.parse::<TaskId>())]
    pub task: Option<TaskId>,
    /// Proportions, e.g. `TEXT:3,IMG:2,VID:1`.
    #[arg(long, value_parser = parse_mixture)]
    pub mixture: Option<Mixture>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub eval_seed: Option<u64>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Tasks evaluated at each log point.
    #[arg(long, value_delimiter = ',', value_parser = |s: &str| s.trim().parse::<TaskId>(), default_value = "TEXT,IMG,VID")]
    pub eval_tasks: Vec<TaskId>,
}

impl TrainArgs {
    fn resolve(self, global: &GlobalOptions) -> CliResult<(TrainConfig, Vec<TaskId>)> {
        let mixture = match (self.task, self.mixture) {
            (Some(t), _) => Some(vec![(t, 1)]),
            (None, m) => m.map(|m| m.0),
        };
        let flags = vec![
            ("steps", self.steps.map(Value::from)),
            ("batch_size", self.batch_size.map(Value::from)),
            ("learning_rate", self.learning_rate.map(Value::from)),
            ("momentum", self.momentum.map(Value::from)),
            ("seed", self.train_seed.or(global.seed).map(Value::from)),
            ("mixture", mixture.map(|m| to_value(&m))),
            ("eval_every", self.eval_every.map(Value::from)),
            ("eval_samples", self.eval_samples.map(Value::from)),
            ("eval_seed", self.eval_seed.map(Value::from)),
            ("clip_norm", self.clip_norm.map(Value::from)),
        ];
        let defaults = to_value(&TrainConfig::single(TaskId::Text, 0, 0));
        let cfg: TrainConfig = from_value(layered_config(defaults, self.config.as_deref(), flags)?, "train config")?;
        cfg.validate()?;
        Ok((cfg, self.eval_tasks))
    }
}

fn load_toy(path: &Path, out: &mut Outputs) -> CliResult<ToyModel> {
    let archive = open(path, out)?;
    Ok(ToyModel::load(&archive, None)?)
}

fn write_log(out: &Outputs, name: &str, log: &TrajectoryLog) -> CliResult {
    out.write_with(format!("{name}.csv"), |w| log.write_csv(w))?;
    out.write_json(format!("{name}.json"), log)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct LabTrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value = "trained.safetensors")]
    pub output: String,
}

fn lab_train(a: LabTrainArgs, global: &GlobalOptions, mut out: Outputs) -> CliResult {
    let (cfg, tasks) = a.train.resolve(global)?;
    let model = load_toy(&a.model, &mut out)?;
    let path = out.path(&a.output)?;
    let out_stem = stem(Path::new(&a.output));
    let (trained, log) = train(&model, &cfg, &tasks)?;
    for e in &log.entries {
        log::info!("step {} loss {:.6} accuracy {:?}", e.step, e.loss, e.accuracy);
    }
    out.prepare()?;
    trained.save(&path, None)?;
    write_log(&out, &format!("{out_stem}.trajectory"), &log)?;
    out.write_json(format!("{out_stem}.config.json"), &cfg)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct LabSweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Strictly increasing checkpoint steps, e.g. `0,50,100,200`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<usize>,
    #[arg(long, default_value = "sweep")]
    pub output: String,
}

fn lab_sweep(a: LabSweepArgs, global: &GlobalOptions, mut out: Outputs) -> CliResult {
    let (cfg, tasks) = a.train.resolve(global)?;
    if a.grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::invalid("grid must be strictly increasing"));
    }
    let model = load_toy(&a.model, &mut out)?;
    out.path(format!("{}.csv", a.output))?;
    let log = finetune_sweep(&model, &cfg, &a.grid, &tasks)?;
    write_log(&out, &a.output, &log)?;
    for e in &log.entries {
        let accs: Vec<String> = e.accuracy.iter().map(|(t, v)| format!("{t}={v}")).collect();
        println!("step {}\t{}", e.step, accs.join("\t"));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct LabEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_parser = |s: &str| s.parse::<TaskId>())]
    pub task: TaskId,
    #[arg(long, default_value_t = 500)]
    pub samples: usize,
    /// Held-out sample seed (falls back to --seed, then to 0).
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Zero one head's output at run time, as `LAYER:HEAD`.
    #[arg(long, value_parser = parse_mask, conflicts_with = "grid")]
    pub mask: Option<HeadMaskSpec>,
    /// Write choice records for the evaluated samples (JSON Lines).
    #[arg(long)]
    pub records: Option<String>,
    /// Also write `masked_L{l}_H{h}.jsonl` for every single-head ablation.
    #[arg(long)]
    pub grid: bool,
}

fn lab_eval(a: LabEvalArgs, global: &GlobalOptions, mut out: Outputs) -> CliResult {
    let model = load_toy(&a.model, &mut out)?;
    let seed = a.eval_seed.or(global.seed).unwrap_or(0);
    let samples = eval_samples(a.task, a.samples, seed);
    let accuracy = accuracy_on(&model, &samples, a.mask)?;
    let records = choice_records(&model, &samples, a.mask)?;
    let prob_accuracy = if records.is_empty() { 0.0 } else { probability_accuracy(&records)? };
    let report = json!({
        "task": a.task,
        "samples": a.samples,
        "eval_seed": seed,
        "mask": a.mask.map(|m| m.label()),
        "accuracy": accuracy,
        "prob_accuracy": prob_accuracy,
    });
    if let Some(name) = &a.records {
        out.path(name)?;
    }
    let masked = if a.grid { Some(masked_records(&model, &samples)?) } else { None };
    out.write_json("eval.json", &report)?;
    if let Some(name) = &a.records {
        out.write_with(name, |w| write_records(w, &records))?;
    }
    if let Some(masked) = masked {
        for (mask, recs) in &masked {
            out.write_with(format!("{}.jsonl", mask.label()), |w| write_records(w, recs))?;
        }
    }
    print_json(&report)
}

#[derive(Debug, Args)]
pub struct LabDirectionsArgs {
    #[arg(long)]
    pub base: PathBuf,
    /// `LABEL=PATH` or `PATH` (label = file stem); repeat per variant.
    #[arg(long = "variant", required = true)]
    pub variants: Vec<String>,
    #[arg(long, default_value = "directions")]
    pub output: String,
}

fn lab_directions(a: LabDirectionsArgs, mut out: Outputs) -> CliResult {
    let base = open(&a.base, &mut out)?;
    let mut variants = Vec::new();
    for v in &a.variants {
        let (label, path) = match v.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => (stem(Path::new(v)), PathBuf::from(v)),
        };
        variants.push((label, open(&path, &mut out)?));
    }
    let refs: Vec<(String, &TensorArchive)> = variants.iter().map(|(l, a)| (l.clone(), a)).collect();
    let report = delta_direction_analysis(&base, &refs)?;
    out.write_json(format!("{}.json", a.output), &report)?;
    out.write_with(format!("{}.cosine.csv", a.output), |w| report.write_cosine_csv(w))?;
    out.write_with(format!("{}.projection.csv", a.output), |w| report.write_projection_csv(w))?;
    for flagged in &report.zero_norm {
        log::warn!("{flagged}: zero delta, cosine undefined");
    }
    print_json(&json!({"labels": report.labels, "cosine": report.cosine, "zero_norm": report.zero_norm}))
}
