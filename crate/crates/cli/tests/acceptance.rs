//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria 6–9 share one seeded training protocol; its trajectories are
//! compared against the files in `tests/golden/` (set `OMNIWEIGHTS_BLESS=1`
//! to rewrite them).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use omniweights_core::dtype::decode;
use omniweights_core::{
    average_merge, build_salience_grid, enumerate_masks, mask_grid, option_kl, probability_accuracy,
    softmax_weights, tensor_delta_avg, weighted_merge, write_archive, ArchiveWriter, ChoiceRecord, DType,
    DeltaReport, Granularity, HeadMaskSpec, KlDirection, MergeInput, MergeRecipe, Tensor, TensorArchive,
    TensorEntry, TensorSpec, WriteOptions,
};
use omniweights_toylab::gradcheck::{gradient_check, ALL_CLASSES};
use omniweights_toylab::{
    choice_records, delta_direction_analysis, eval_samples, finetune_sweep, masked_records, train, TaskId,
    TaskSampler, ToyConfig, ToyModel, TrainConfig, TrajectoryLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

// --- golden protocol ------------------------------------------------------

const BASE_SEED: u64 = 1;
const TEXT_SEED: u64 = 7;
const TEXT_RERUN_SEED: u64 = 8;
const IMG_SEED: u64 = 7;
const TEXT_STEPS: usize = 300;
const IMG_STEPS: usize = 800;
const IMG_ON_TEXT_STEPS: usize = 100;
const SWEEP_SEED: u64 = 11;
const SWEEP_LR: f64 = 0.02;
const SWEEP_GRID: [usize; 5] = [0, 50, 100, 200, 400];
const HELD_OUT_SEED: u64 = 2_000_003;

const SPECIALIST_MIN: f64 = 0.90;
const CHANCE_SLACK: f64 = 0.10;
const DIRECTION_MARGIN: f64 = 0.05;
const TRADE_OFF_MARGIN: f64 = 0.05;

/// Models produced by the protocol, shared between criteria.
struct Lab {
    dir: tempfile::TempDir,
    base: ToyModel,
    text: Option<ToyModel>,
    img: Option<ToyModel>,
}

impl Lab {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn save(&self, model: &ToyModel, name: &str) -> Result<TensorArchive, String> {
        model.save(self.path(name), None).map_err(|e| e.to_string())
    }
}

fn specialist_cfg(task: TaskId, steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::single(task, steps, seed);
    cfg.eval_every = 100;
    cfg
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}

/// Compare (or with `OMNIWEIGHTS_BLESS=1`, rewrite) a golden trajectory.
fn golden(name: &str, log: &TrajectoryLog) {
    let mut csv = Vec::new();
    log.write_csv(&mut csv).expect("in-memory csv");
    let path = golden_dir().join(format!("{name}.trajectory.csv"));
    if std::env::var_os("OMNIWEIGHTS_BLESS").is_some() {
        std::fs::create_dir_all(golden_dir()).expect("golden dir");
        std::fs::write(&path, &csv).expect("write golden");
        println!("INFO golden {name}: written");
        return;
    }
    match std::fs::read(&path) {
        Ok(expected) if expected == csv => println!("INFO golden {name}: identical"),
        Ok(_) => println!("INFO golden {name}: DIFFERS from {}", path.display()),
        Err(_) => println!("INFO golden {name}: no golden file"),
    }
}

/// Train with TEXT/IMG evaluation; returns the model and its final accuracies.
fn train_logged(from: &ToyModel, cfg: &TrainConfig, name: &str) -> Result<(ToyModel, f64, f64), String> {
    let (model, log) = train(from, cfg, &[TaskId::Text, TaskId::Img]).map_err(|e| e.to_string())?;
    golden(name, &log);
    let last = log.last().ok_or("empty trajectory")?;
    Ok((model, last.accuracy[&TaskId::Text], last.accuracy[&TaskId::Img]))
}

// --- criterion 1 ------------------------------------------------------------

fn oracle_decode(dtype: DType, bytes: &[u8]) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
        DType::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_bits(u16::from_le_bytes([c[0], c[1]])).to_f64())
            .collect(),
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()))
}

fn criterion_round_trip() -> Check {
    const DTYPES: [DType; 4] = [DType::F64, DType::F32, DType::F16, DType::BF16];
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut seen = [0usize; 4];
    let mut tensors = 0;
    for i in 0..500 {
        let n = rng.gen_range(1..6);
        let mut raw = Vec::new();
        for t in 0..n {
            let k = rng.gen_range(0..4);
            seen[k] += 1;
            let dtype = DTYPES[k];
            let rank = rng.gen_range(0..4);
            let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(0..6)).collect();
            let len = shape.iter().product::<usize>() * dtype.byte_width();
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            raw.push((format!("layer.{t}.w{}", rng.gen_range(0..1000)), dtype, shape, bytes));
        }
        raw.sort_by(|a, b| a.0.cmp(&b.0));
        raw.dedup_by(|a, b| a.0 == b.0);
        let path = dir.path().join(format!("{i}.safetensors"));
        let specs = raw
            .iter()
            .map(|(name, dtype, shape, _)| TensorSpec {
                name: name.clone(),
                dtype: *dtype,
                shape: shape.clone(),
            })
            .collect();
        let meta: BTreeMap<String, String> = [("index".to_string(), i.to_string())].into();
        let mut w = ArchiveWriter::create(&path, specs, Some(&meta), WriteOptions::default()).map_err(|e| e.to_string())?;
        // alternate between the raw-byte and the value write paths
        for (name, dtype, _, bytes) in &raw {
            if i % 2 == 0 {
                w.write_raw(name, bytes)
            } else {
                w.write_values(name, &decode(*dtype, bytes))
            }
            .map_err(|e| e.to_string())?;
        }
        w.finish().map_err(|e| e.to_string())?;

        let archive = TensorArchive::open(&path).map_err(|e| e.to_string())?;
        if archive.len() != raw.len() || archive.metadata() != Some(&meta) {
            return Err(format!("archive {i}: header mismatch"));
        }
        for (name, dtype, shape, bytes) in &raw {
            let m = archive.get(name).ok_or(format!("archive {i}: {name} missing"))?;
            if m.dtype != *dtype || &m.shape != shape {
                return Err(format!("archive {i}: {name} dtype/shape mismatch"));
            }
            let values = archive.read_tensor(name).map_err(|e| e.to_string())?.values;
            if !same_bits(&values, &oracle_decode(*dtype, bytes)) {
                return Err(format!("archive {i}: {name} values differ"));
            }
            // byte-exact on both paths, NaN payloads included
            if &archive.read_raw(name).map_err(|e| e.to_string())? != bytes {
                return Err(format!("archive {i}: {name} bytes differ"));
            }
            tensors += 1;
        }
    }
    if seen.iter().any(|&s| s == 0) {
        return Err("not every dtype was exercised".into());
    }
    Ok(format!("500 archives, {tensors} tensors, dtype draws F64/F32/F16/BF16 = {seen:?}"))
}

// --- criteria 2 and 3 -------------------------------------------------------

fn random_archive(dir: &Path, name: &str, shapes: &[Vec<usize>], rng: &mut ChaCha8Rng, scale: f64) -> TensorArchive {
    let entries: Vec<TensorEntry> = shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let len = shape.iter().product();
            TensorEntry::new(
                format!("t{i}"),
                DType::F64,
                shape.clone(),
                (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect(),
            )
        })
        .collect();
    write_archive(&entries, dir.join(name), None, WriteOptions::default()).expect("write")
}

fn random_shapes(rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..rng.gen_range(1..4))
        .map(|_| (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..6)).collect())
        .collect()
}

fn values(a: &TensorArchive, name: &str) -> Vec<f64> {
    a.read_tensor(name).expect("read").values
}

fn input(id: &str, a: &TensorArchive) -> MergeInput {
    MergeInput::new(id, TensorArchive::open(a.path()).expect("reopen"))
}

fn delta_report(base: &TensorArchive, m: &TensorArchive, id: &str) -> DeltaReport {
    omniweights_core::model_delta_report(base, m, id, &Default::default()).expect("delta")
}

fn criterion_merge_identities() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst_equal_delta: f64 = 0.0;
    for i in 0..100 {
        let shapes = random_shapes(&mut rng);
        let base = random_archive(d, &format!("b{i}"), &shapes, &mut rng, 1.0);
        let m1 = random_archive(d, &format!("x{i}"), &shapes, &mut rng, 1.5);
        let m2 = random_archive(d, &format!("y{i}"), &shapes, &mut rng, 0.7);
        let names: Vec<String> = base.names().map(String::from).collect();

        // merge(M, M) = M
        let same = average_merge(&[input("a", &m1), input("b", &m1)], &MergeRecipe::average(), d.join(format!("mm{i}")))
            .map_err(|e| e.to_string())?;
        for n in &names {
            if same.archive.read_raw(n).unwrap() != m1.read_raw(n).unwrap() {
                return Err(format!("triple {i}: merge(M,M) != M on {n}"));
            }
        }

        let reports = [delta_report(&base, &m1, "x"), delta_report(&base, &m2, "y")];
        let models = [input("x", &m1), input("y", &m2)];

        // alpha0 = 1 returns the base
        let keep = weighted_merge(&input("base", &base), &models, &reports, &MergeRecipe::weighted(1.0, 0.01, Granularity::PerTensor), d.join(format!("k{i}")))
            .map_err(|e| e.to_string())?;
        for n in &names {
            if keep.archive.read_raw(n).unwrap() != base.read_raw(n).unwrap() {
                return Err(format!("triple {i}: alpha0=1 differs from base on {n}"));
            }
        }

        // equal deltas with alpha0 = 0 reduce to the average
        let flat: Vec<DeltaReport> = ["x", "y"]
            .iter()
            .map(|id| DeltaReport {
                model_id: id.to_string(),
                global: 0.02,
                per_tensor: names.iter().map(|n| (n.clone(), 0.02)).collect(),
                element_counts: Default::default(),
                skipped: vec![],
            })
            .collect();
        let eq = weighted_merge(&input("base", &base), &models, &flat, &MergeRecipe::weighted(0.0, 0.01, Granularity::PerTensor), d.join(format!("e{i}")))
            .map_err(|e| e.to_string())?;
        let avg = average_merge(&models, &MergeRecipe::average(), d.join(format!("a{i}"))).map_err(|e| e.to_string())?;
        for n in &names {
            for (a, b) in values(&eq.archive, n).iter().zip(values(&avg.archive, n)) {
                worst_equal_delta = worst_equal_delta.max((a - b).abs());
            }
        }

        // convexity on a random recipe
        let alpha0 = rng.gen_range(0.0..1.0);
        let tau = rng.gen_range(0.005..1.0);
        let granularity = if rng.gen() { Granularity::PerModel } else { Granularity::PerTensor };
        let w = weighted_merge(&input("base", &base), &models, &reports, &MergeRecipe::weighted(alpha0, tau, granularity), d.join(format!("w{i}")))
            .map_err(|e| e.to_string())?;
        for n in &names {
            let (b, x, y, o) = (values(&base, n), values(&m1, n), values(&m2, n), values(&w.archive, n));
            for j in 0..b.len() {
                let lo = b[j].min(x[j]).min(y[j]);
                let hi = b[j].max(x[j]).max(y[j]);
                if !(lo <= o[j] && o[j] <= hi) {
                    return Err(format!("triple {i}: {n}[{j}] = {} outside [{lo}, {hi}]", o[j]));
                }
            }
        }
    }
    if worst_equal_delta > 1e-12 {
        return Err(format!("equal-delta merge deviates from average by {worst_equal_delta:e}"));
    }
    Ok(format!("100 triples; equal-delta vs average max |diff| = {worst_equal_delta:e}"))
}

fn oracle_softmax(d: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = d.iter().map(|x| (x / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let soft = |x: &[f64]| {
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|v| v / z).collect::<Vec<f64>>()
    };
    let (p, q) = (soft(p), soft(q));
    p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum()
}

fn criterion_oracles() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = BTreeMap::<&str, f64>::new();
    let mut note = |k: &'static str, v: f64| {
        let e = worst.entry(k).or_insert(0.0);
        *e = e.max(v);
    };
    for i in 0..1000 {
        // tensor_delta_avg
        let n = rng.gen_range(1..200);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let got = tensor_delta_avg(&Tensor::new(DType::F64, vec![n], a.clone()), &Tensor::new(DType::F64, vec![n], b.clone()))
            .map_err(|e| e.to_string())?;
        let mut s = 0.0;
        for j in 0..n {
            s += (a[j] - b[j]).abs();
        }
        note("tensor_delta_avg", (got - s / n as f64).abs());

        // softmax_weights
        let k = rng.gen_range(1..6);
        let deltas: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..0.05)).collect();
        let tau = rng.gen_range(0.005..1.0);
        let w = softmax_weights(&deltas, tau).map_err(|e| e.to_string())?;
        for (x, y) in w.iter().zip(oracle_softmax(&deltas, tau)) {
            note("softmax_weights", (x - y).abs());
        }

        // option_kl
        let m = rng.gen_range(2..6);
        let p: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let q: Vec<f64> = (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect();
        note("option_kl", (option_kl(&p, &q).map_err(|e| e.to_string())? - oracle_kl(&p, &q)).abs());

        // average_merge and weighted_merge over archives
        let shapes = random_shapes(&mut rng);
        let count = rng.gen_range(2..4);
        let base = random_archive(d, &format!("b{i}"), &shapes, &mut rng, 1.0);
        let models: Vec<TensorArchive> =
            (0..count).map(|c| random_archive(d, &format!("m{i}_{c}"), &shapes, &mut rng, 1.0 + c as f64)).collect();
        let inputs: Vec<MergeInput> = models.iter().enumerate().map(|(c, m)| input(&format!("m{c}"), m)).collect();
        let avg = average_merge(&inputs, &MergeRecipe::average(), d.join(format!("avg{i}"))).map_err(|e| e.to_string())?;
        let reports: Vec<DeltaReport> =
            models.iter().enumerate().map(|(c, m)| delta_report(&base, m, &format!("m{c}"))).collect();
        let alpha0 = rng.gen_range(0.0..1.0);
        let tau = rng.gen_range(0.01..1.0);
        let wm = weighted_merge(&input("base", &base), &inputs, &reports, &MergeRecipe::weighted(alpha0, tau, Granularity::PerTensor), d.join(format!("w{i}")))
            .map_err(|e| e.to_string())?;
        for name in base.names() {
            let bv = values(&base, name);
            let mv: Vec<Vec<f64>> = models.iter().map(|m| values(m, name)).collect();
            let shifts: Vec<f64> = mv
                .iter()
                .map(|m| {
                    let mut s = 0.0;
                    for j in 0..bv.len() {
                        s += (bv[j] - m[j]).abs();
                    }
                    s / bv.len() as f64
                })
                .collect();
            let alphas = oracle_softmax(&shifts, tau);
            let (ga, gw) = (values(&avg.archive, name), values(&wm.archive, name));
            for j in 0..bv.len() {
                let mean = mv.iter().map(|m| m[j]).sum::<f64>() / count as f64;
                note("average_merge", (ga[j] - mean).abs());
                let mut acc = 0.0;
                for c in 0..count {
                    acc += alphas[c] * mv[c][j];
                }
                note("weighted_merge", (gw[j] - (alpha0 * bv[j] + (1.0 - alpha0) * acc)).abs());
            }
        }
        // keep the scratch directory small
        for entry in std::fs::read_dir(d).map_err(|e| e.to_string())? {
            let _ = std::fs::remove_file(entry.map_err(|e| e.to_string())?.path());
        }
    }
    let failed: Vec<String> = worst
        .iter()
        .filter(|(k, v)| **v > if **k == "option_kl" { 1e-10 } else { 1e-12 })
        .map(|(k, v)| format!("{k} {v:e}"))
        .collect();
    let summary = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    if failed.is_empty() {
        Ok(format!("1000 instances; max |err|: {summary}"))
    } else {
        Err(format!("over tolerance: {}", failed.join(", ")))
    }
}

// --- criteria 4 and 5 -------------------------------------------------------

fn criterion_ablation(lab: &Lab) -> Check {
    let model = &lab.base;
    let arch = model.architecture();
    let archive = lab.save(model, "ablation_base.safetensors")?;
    let variants = mask_grid(&archive, &arch, lab.path("ablation_grid"), "safetensors").map_err(|e| e.to_string())?;
    if variants.len() != 16 {
        return Err(format!("{} variants, expected 16", variants.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let inputs: Vec<Vec<u32>> = (0..32)
        .map(|_| {
            let len = rng.gen_range(1..=model.cfg.context);
            (0..len).map(|_| rng.gen_range(0..model.cfg.vocab as u32)).collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (mask, path) in &variants {
        let masked = ToyModel::open(path).map_err(|e| e.to_string())?;
        for tokens in &inputs {
            let a = masked.forward(tokens).map_err(|e| e.to_string())?;
            let b = model.forward_ablated(tokens, Some(*mask)).map_err(|e| e.to_string())?;
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    if worst <= 1e-10 {
        Ok(format!("16 archives x 32 inputs; max |logit diff| = {worst:e}"))
    } else {
        Err(format!("max |logit diff| = {worst:e} > 1e-10"))
    }
}

fn criterion_gradients(lab: &Lab) -> Check {
    let mut sampler = TaskSampler::new(505);
    let batch = vec![sampler.sample(TaskId::Text), sampler.sample(TaskId::Img), sampler.sample(TaskId::Vid)];
    let probes = gradient_check(&lab.base, &batch, 64, 1e-5, 505).map_err(|e| e.to_string())?;
    let mut lines = Vec::new();
    let mut ok = true;
    for class in ALL_CLASSES {
        let of_class: Vec<_> = probes.iter().filter(|p| p.class == class).collect();
        let worst = of_class.iter().map(|p| p.rel_error).fold(0.0, f64::max);
        ok &= of_class.len() == 64 && worst < 1e-6;
        lines.push(format!("{class:?} {worst:.1e}"));
    }
    let msg = format!("{} probes; worst rel err per class: {}", probes.len(), lines.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

// --- criteria 6 to 10 -------------------------------------------------------

fn criterion_specialists(lab: &mut Lab) -> Check {
    let (text, t_text, t_img) = train_logged(&lab.base, &specialist_cfg(TaskId::Text, TEXT_STEPS, TEXT_SEED), "text")?;
    let (img, i_text, i_img) = train_logged(&lab.base, &specialist_cfg(TaskId::Img, IMG_STEPS, IMG_SEED), "img")?;
    lab.text = Some(text);
    lab.img = Some(img);
    let text_ok = t_text >= SPECIALIST_MIN && t_img <= TaskId::Img.chance() + CHANCE_SLACK;
    let img_ok = i_img >= SPECIALIST_MIN && i_text <= TaskId::Text.chance() + CHANCE_SLACK;
    let msg = format!(
        "TEXT specialist: TEXT {t_text:.3}, IMG {t_img:.3}; IMG specialist: IMG {i_img:.3}, TEXT {i_text:.3}"
    );
    if text_ok && img_ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_directions(lab: &mut Lab) -> Check {
    let (text, img) = (lab.text.clone().ok_or("TEXT specialist missing")?, lab.img.clone().ok_or("IMG specialist missing")?);
    let (rerun, _, _) =
        train_logged(&lab.base, &specialist_cfg(TaskId::Text, TEXT_STEPS, TEXT_RERUN_SEED), "text_rerun")?;
    let base = lab.save(&lab.base, "base.safetensors")?;
    let a_text = lab.save(&text, "text.safetensors")?;
    let a_img = lab.save(&img, "img.safetensors")?;
    let a_rerun = lab.save(&rerun, "text_rerun.safetensors")?;
    let report = delta_direction_analysis(
        &base,
        &[("TEXT".into(), &a_text), ("TEXT'".into(), &a_rerun), ("IMG".into(), &a_img)],
    )
    .map_err(|e| e.to_string())?;
    let same = report.cosine_between("TEXT", "TEXT'").ok_or("undefined cosine")?;
    let cross = report.cosine_between("TEXT", "IMG").ok_or("undefined cosine")?;
    let msg = format!("cos(TEXT, TEXT') = {same:.4}, cos(TEXT, IMG) = {cross:.4}, margin {:.4}", same - cross);
    if same - cross >= DIRECTION_MARGIN {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_trade_off(lab: &Lab) -> Check {
    let text = lab.text.as_ref().ok_or("TEXT specialist missing")?;
    // the image model descends from the text backbone, then the two are averaged
    let (img_on_text, _, _) =
        train_logged(text, &specialist_cfg(TaskId::Img, IMG_ON_TEXT_STEPS, IMG_SEED), "img_on_text")?;
    let a_text = lab.save(text, "backbone_text.safetensors")?;
    let a_img = lab.save(&img_on_text, "img_on_text.safetensors")?;
    let merged = average_merge(
        &[MergeInput::new("TEXT", a_text), MergeInput::new("IMG", a_img)],
        &MergeRecipe::average(),
        lab.path("merged.safetensors"),
    )
    .map_err(|e| e.to_string())?;
    let merged = ToyModel::load(&merged.archive, None).map_err(|e| e.to_string())?;

    let mut cfg = TrainConfig::single(TaskId::Img, *SWEEP_GRID.last().unwrap(), SWEEP_SEED);
    cfg.learning_rate = SWEEP_LR;
    let log = finetune_sweep(&merged, &cfg, &SWEEP_GRID, &[TaskId::Text, TaskId::Img]).map_err(|e| e.to_string())?;
    golden("sweep", &log);
    let first = &log.entries[0].accuracy;
    let last = &log.last().ok_or("empty sweep")?.accuracy;
    let img_gain = last[&TaskId::Img] - first[&TaskId::Img];
    let text_drop = first[&TaskId::Text] - last[&TaskId::Text];
    let path: Vec<String> = log
        .entries
        .iter()
        .map(|e| format!("{}:{:.3}/{:.3}", e.step, e.accuracy[&TaskId::Text], e.accuracy[&TaskId::Img]))
        .collect();
    let msg = format!(
        "step:TEXT/IMG {}; IMG +{img_gain:.3}, TEXT -{text_drop:.3}",
        path.join(" ")
    );
    if img_gain >= TRADE_OFF_MARGIN && text_drop >= TRADE_OFF_MARGIN {
        Ok(msg)
    } else {
        Err(msg)
    }
}

/// Stores the unmasked records for the grid-integrity criterion.
fn criterion_heads(lab: &Lab, out: &mut Option<Vec<ChoiceRecord>>) -> Check {
    let img = lab.img.as_ref().ok_or("IMG specialist missing")?;
    let samples = eval_samples(TaskId::Img, 2000, HELD_OUT_SEED);
    let baseline = choice_records(img, &samples, None).map_err(|e| e.to_string())?;
    let masked = masked_records(img, &samples).map_err(|e| e.to_string())?;
    let base_acc = probability_accuracy(&baseline).map_err(|e| e.to_string())?;
    let mut violations = Vec::new();
    let mut worst = (HeadMaskSpec::new(0, 0), f64::INFINITY);
    let mut best = (HeadMaskSpec::new(0, 0), f64::NEG_INFINITY);
    for (mask, records) in &masked {
        let acc = probability_accuracy(records).map_err(|e| e.to_string())?;
        if acc > base_acc {
            violations.push(format!("{mask} {acc:.4}"));
        }
        if acc < worst.1 {
            worst = (*mask, acc);
        }
        if acc > best.1 {
            best = (*mask, acc);
        }
    }
    let grid = build_salience_grid(&baseline, &masked, img.cfg.n_layers, img.cfg.n_heads, KlDirection::OriginalToMasked)
        .map_err(|e| e.to_string())?;
    let s = grid.depth_summary();
    println!(
        "INFO head grid depth: shallow layers [0,{}) mean KL {:.4}, deep layers [{},{}) mean KL {:.4}",
        s.shallow_end, s.shallow_mean_kl, s.deep_start, img.cfg.n_layers, s.deep_mean_kl
    );
    *out = Some(baseline);
    let msg = format!(
        "baseline {base_acc:.4}; masked range {:.4} ({}) .. {:.4} ({})",
        worst.1, worst.0, best.1, best.0
    );
    if violations.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; above baseline: {}", violations.join(", ")))
    }
}

fn criterion_grid_integrity(records: Option<&Vec<ChoiceRecord>>, cfg: &ToyConfig) -> Check {
    // fall back to a fresh record set if the head criterion did not run
    let baseline = match records {
        Some(r) => r.clone(),
        None => {
            let model = ToyModel::init(cfg, BASE_SEED).map_err(|e| e.to_string())?;
            choice_records(&model, &eval_samples(TaskId::Img, 200, HELD_OUT_SEED), None).map_err(|e| e.to_string())?
        }
    };
    let per_head: BTreeMap<HeadMaskSpec, Vec<ChoiceRecord>> = enumerate_masks(&omniweights_toylab::architecture_spec(cfg))
        .into_iter()
        .map(|m| (m, baseline.clone()))
        .collect();
    let grid = build_salience_grid(&baseline, &per_head, cfg.n_layers, cfg.n_heads, KlDirection::OriginalToMasked)
        .map_err(|e| e.to_string())?;
    let bad: Vec<String> = grid
        .cells
        .iter()
        .filter(|(_, c)| c.mean_kl != 0.0 || **c != grid.baseline)
        .map(|(m, _)| m.to_string())
        .collect();
    if grid.cells.len() == cfg.n_layers * cfg.n_heads && bad.is_empty() && grid.baseline.mean_kl == 0.0 {
        Ok(format!("{} cells, {} records each, all mean_kl = 0 and equal to baseline", grid.cells.len(), baseline.len()))
    } else {
        Err(format!("cells differing from baseline: {}", bad.join(", ")))
    }
}

// --- driver -----------------------------------------------------------------

struct Outcome {
    id: usize,
    title: &'static str,
    budget: Duration,
    elapsed: Duration,
    result: Check,
}

/// Run one criterion; `prior` is time already spent on work it shares.
fn run(id: usize, title: &'static str, budget_secs: u64, prior: Duration, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let result = f();
    let elapsed = start.elapsed() + prior;
    let outcome = Outcome {
        id,
        title,
        budget: Duration::from_secs(budget_secs),
        elapsed,
        result,
    };
    report(&outcome);
    outcome
}

fn passed(o: &Outcome) -> bool {
    o.result.is_ok() && o.elapsed <= o.budget
}

fn report(o: &Outcome) {
    let verdict = if passed(o) { "PASS" } else { "FAIL" };
    let detail = match &o.result {
        Ok(msg) => msg.clone(),
        Err(msg) => msg.clone(),
    };
    let timing = if o.elapsed > o.budget {
        format!("{:.1}s OVER {}s budget", o.elapsed.as_secs_f64(), o.budget.as_secs())
    } else {
        format!("{:.1}s", o.elapsed.as_secs_f64())
    };
    println!("{verdict} criterion {:>2}: {} [{timing}] {detail}", o.id, o.title);
}

fn main() -> ExitCode {
    // `cargo test` passes harness flags such as `--list`; the suite has no
    // sub-tests to list or filter.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let cfg = ToyConfig::default();
    let mut lab = Lab {
        dir: tempfile::tempdir().expect("scratch dir"),
        base: ToyModel::init(&cfg, BASE_SEED).expect("default config is valid"),
        text: None,
        img: None,
    };

    let mut outcomes = vec![
        run(1, "format round-trip", 30, Duration::ZERO, criterion_round_trip),
        run(2, "merge identities", 30, Duration::ZERO, criterion_merge_identities),
        run(3, "oracle equivalence", 60, Duration::ZERO, criterion_oracles),
        run(4, "ablation exactness", 60, Duration::ZERO, || criterion_ablation(&lab)),
        run(5, "gradient check", 120, Duration::ZERO, || criterion_gradients(&lab)),
    ];
    let specialists = run(6, "seeded specialists", 600, Duration::ZERO, || criterion_specialists(&mut lab));
    // bundled with criterion 6: one budget covers both
    let shared = specialists.elapsed;
    outcomes.push(specialists);
    outcomes.push(run(7, "distinct directions", 600, shared, || criterion_directions(&mut lab)));
    outcomes.push(run(8, "modality trade-off", 600, Duration::ZERO, || criterion_trade_off(&lab)));
    let mut heads = None;
    outcomes.push(run(9, "head indispensability", 300, Duration::ZERO, || criterion_heads(&lab, &mut heads)));
    outcomes.push(run(10, "salience-grid integrity", 10, Duration::ZERO, || criterion_grid_integrity(heads.as_ref(), &cfg)));

    let failed: Vec<String> = outcomes.iter().filter(|o| !passed(o)).map(|o| o.id.to_string()).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: FAILED criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
