//! Parameter shifts and merging checked against plain scalar loops.

use std::path::Path;

use omniweights_core::{
    average_merge, delta_ratio, execute_plan, model_delta_report, plan_merge, softmax_weights, weighted_merge,
    write_archive, DType, DeltaOptions, DeltaReport, Disposition, Granularity, MergeInput, MergeRecipe,
    NonsharedPolicy, TensorArchive, TensorEntry, WriteOptions,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SHAPES: [(&str, &[usize]); 3] = [("a.weight", &[3, 4]), ("b.bias", &[7]), ("c.weight", &[2, 2, 3])];

fn random_model(dir: &Path, name: &str, seed: u64, scale: f64) -> TensorArchive {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<TensorEntry> = SHAPES
        .iter()
        .map(|(n, shape)| {
            let len = shape.iter().product();
            let values = (0..len).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            TensorEntry::new(*n, DType::F64, shape.to_vec(), values)
        })
        .collect();
    write_archive(&entries, dir.join(name), None, WriteOptions::default()).unwrap()
}

fn values(a: &TensorArchive, name: &str) -> Vec<f64> {
    a.read_tensor(name).unwrap().values
}

fn reopen(a: &TensorArchive) -> TensorArchive {
    TensorArchive::open(a.path()).unwrap()
}

fn input(id: &str, a: &TensorArchive) -> MergeInput {
    MergeInput::new(id, reopen(a))
}

// --- oracles -------------------------------------------------------------

fn oracle_delta(base: &TensorArchive, ft: &TensorArchive) -> (f64, Vec<(String, f64)>) {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut per = Vec::new();
    for (name, _) in SHAPES {
        let (x, y) = (values(base, name), values(ft, name));
        let mut s = 0.0;
        for i in 0..x.len() {
            s += (x[i] - y[i]).abs();
        }
        per.push((name.to_string(), s / x.len() as f64));
        total += s;
        count += x.len();
    }
    (total / count as f64, per)
}

fn oracle_softmax(d: &[f64], t: f64) -> Vec<f64> {
    let e: Vec<f64> = d.iter().map(|x| (x / t).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

// --- tests ---------------------------------------------------------------

#[test]
fn delta_report_matches_scalar_loop() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    for seed in 2..6 {
        let ft = random_model(dir.path(), &format!("ft{seed}.st"), seed, 0.5 * seed as f64);
        let report = model_delta_report(&base, &ft, "ft", &DeltaOptions::default()).unwrap();
        let (global, per) = oracle_delta(&base, &ft);
        assert!(close(report.global, global, 1e-12), "{} vs {global}", report.global);
        for (name, d) in per {
            assert!(close(report.per_tensor[&name], d, 1e-12));
        }
        assert_eq!(report.element_counts["a.weight"], 12);
    }
}

#[test]
fn delta_of_model_with_itself_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    let report = model_delta_report(&base, &reopen(&base), "same", &DeltaOptions::default()).unwrap();
    assert_eq!(report.global, 0.0);
    let rows = delta_ratio(&[report]);
    assert!(rows[0].zero_shift);
}

#[test]
fn delta_report_survives_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    let ft = random_model(dir.path(), "ft.st", 2, 1.0);
    let report = model_delta_report(&base, &ft, "ft", &DeltaOptions::default()).unwrap();
    let mut buf = Vec::new();
    report.write_json(&mut buf).unwrap();
    let back: DeltaReport = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back.global.to_bits(), report.global.to_bits());
    assert_eq!(back.per_tensor, report.per_tensor);
}

#[test]
fn ratio_divides_by_smallest_shift() {
    let reports: Vec<DeltaReport> = [("a", 0.002), ("b", 0.01), ("c", 0.004)]
        .iter()
        .map(|(id, g)| DeltaReport {
            model_id: id.to_string(),
            global: *g,
            per_tensor: Default::default(),
            element_counts: Default::default(),
            skipped: vec![],
        })
        .collect();
    let rows = delta_ratio(&reports);
    let get = |id: &str| rows.iter().find(|r| r.model_id == id).unwrap().ratio;
    assert!(close(get("a"), 1.0, 1e-15));
    assert!(close(get("b"), 5.0, 1e-12));
    assert!(close(get("c"), 2.0, 1e-12));
}

proptest! {
    #[test]
    fn softmax_matches_direct_formula(
        d in prop::collection::vec(0.0f64..0.05, 1..6),
        t in 0.005f64..1.0,
    ) {
        let got = softmax_weights(&d, t).unwrap();
        let want = oracle_softmax(&d, t);
        prop_assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!(close(*g, *w, 1e-12));
        }
    }

    #[test]
    fn softmax_ordering_follows_shift(d in prop::collection::vec(0.0f64..1.0, 2..6), t in 0.01f64..2.0) {
        let w = softmax_weights(&d, t).unwrap();
        for i in 0..d.len() {
            for j in 0..d.len() {
                if d[i] > d[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(d in prop::collection::vec(0.0f64..1.0, 1..6), c in -10.0f64..10.0) {
        let a = softmax_weights(&d, 0.1).unwrap();
        let shifted: Vec<f64> = d.iter().map(|x| x + c).collect();
        let b = softmax_weights(&shifted, 0.1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!(close(*x, *y, 1e-9));
        }
    }

    #[test]
    fn weighted_merge_matches_scalar_loop(
        seed in 0u64..1000,
        n in 1usize..4,
        alpha0 in 0.0f64..1.0,
        t in 0.01f64..1.0,
        per_model in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let base = random_model(dir.path(), "base.st", seed, 1.0);
        let models: Vec<TensorArchive> = (0..n)
            .map(|i| random_model(dir.path(), &format!("m{i}.st"), seed + 100 + i as u64, 1.0 + i as f64 * 0.3))
            .collect();
        let reports: Vec<DeltaReport> = models
            .iter()
            .enumerate()
            .map(|(i, m)| model_delta_report(&base, m, &format!("m{i}"), &DeltaOptions::default()).unwrap())
            .collect();
        let granularity = if per_model { Granularity::PerModel } else { Granularity::PerTensor };
        let recipe = MergeRecipe::weighted(alpha0, t, granularity);
        let inputs: Vec<MergeInput> = models.iter().enumerate().map(|(i, m)| input(&format!("m{i}"), m)).collect();
        let out = weighted_merge(&input("base", &base), &inputs, &reports, &recipe, dir.path().join("out.st")).unwrap();

        for (name, _) in SHAPES {
            let shifts: Vec<f64> = (0..n)
                .map(|i| {
                    let (g, per) = oracle_delta(&base, &models[i]);
                    if per_model { g } else { per.into_iter().find(|(k, _)| k == name).unwrap().1 }
                })
                .collect();
            let alphas = oracle_softmax(&shifts, t);
            let b = values(&base, name);
            let ms: Vec<Vec<f64>> = models.iter().map(|m| values(m, name)).collect();
            let got = values(&out.archive, name);
            for i in 0..b.len() {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += alphas[k] * ms[k][i];
                }
                let want = alpha0 * b[i] + (1.0 - alpha0) * acc;
                prop_assert!(close(got[i], want, 1e-9), "{name}[{i}]: {} vs {want}", got[i]);
                // convex combination stays inside the input range
                let lo = ms.iter().map(|m| m[i]).fold(b[i], f64::min);
                let hi = ms.iter().map(|m| m[i]).fold(b[i], f64::max);
                prop_assert!(lo <= got[i] && got[i] <= hi);
            }
        }
        let sidecar = out.plan.weight_sidecar();
        for w in sidecar.values() {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn average_merge_matches_scalar_loop(seed in 0u64..1000, n in 2usize..5) {
        let dir = tempfile::tempdir().unwrap();
        let models: Vec<TensorArchive> =
            (0..n).map(|i| random_model(dir.path(), &format!("m{i}.st"), seed * 10 + i as u64, 1.0)).collect();
        let inputs: Vec<MergeInput> = models.iter().enumerate().map(|(i, m)| input(&format!("m{i}"), m)).collect();
        let out = average_merge(&inputs, &MergeRecipe::average(), dir.path().join("avg.st")).unwrap();
        for (name, _) in SHAPES {
            let ms: Vec<Vec<f64>> = models.iter().map(|m| values(m, name)).collect();
            let got = values(&out.archive, name);
            for i in 0..got.len() {
                let want = ms.iter().map(|m| m[i]).sum::<f64>() / n as f64;
                prop_assert!(close(got[i], want, 1e-12));
            }
        }
    }
}

#[test]
fn averaging_a_model_with_itself_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_model(dir.path(), "m.st", 3, 1.0);
    let out = average_merge(
        &[input("a", &m), input("b", &m), input("c", &m)],
        &MergeRecipe::average(),
        dir.path().join("out.st"),
    )
    .unwrap();
    for (name, _) in SHAPES {
        assert_eq!(out.archive.read_raw(name).unwrap(), m.read_raw(name).unwrap());
    }
}

#[test]
fn full_base_retention_returns_the_base() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    let b = random_model(dir.path(), "b.st", 3, 2.0);
    let reports = vec![
        model_delta_report(&base, &a, "a", &DeltaOptions::default()).unwrap(),
        model_delta_report(&base, &b, "b", &DeltaOptions::default()).unwrap(),
    ];
    let recipe = MergeRecipe::weighted(1.0, 0.01, Granularity::PerTensor);
    let out = weighted_merge(&input("base", &base), &[input("a", &a), input("b", &b)], &reports, &recipe, dir.path().join("o.st"))
        .unwrap();
    for (name, _) in SHAPES {
        assert_eq!(out.archive.read_raw(name).unwrap(), base.read_raw(name).unwrap());
    }
    let d = model_delta_report(&base, &out.archive, "o", &DeltaOptions::default()).unwrap();
    assert_eq!(d.global, 0.0);
}

#[test]
fn equal_shifts_without_retention_reduce_to_average() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    let b = random_model(dir.path(), "b.st", 3, 1.0);
    // fabricated reports with identical shifts force uniform weights
    let flat = |id: &str| DeltaReport {
        model_id: id.into(),
        global: 0.01,
        per_tensor: SHAPES.iter().map(|(n, _)| (n.to_string(), 0.01)).collect(),
        element_counts: Default::default(),
        skipped: vec![],
    };
    let recipe = MergeRecipe::weighted(0.0, 0.05, Granularity::PerTensor);
    let w = weighted_merge(&input("base", &base), &[input("a", &a), input("b", &b)], &[flat("a"), flat("b")], &recipe, dir.path().join("w.st"))
        .unwrap();
    let avg = average_merge(&[input("a", &a), input("b", &b)], &MergeRecipe::average(), dir.path().join("avg.st")).unwrap();
    for (name, _) in SHAPES {
        for (x, y) in values(&w.archive, name).iter().zip(values(&avg.archive, name)) {
            assert!(close(*x, y, 1e-12));
        }
    }
}

#[test]
fn executing_a_plan_matches_the_direct_merge() {
    let dir = tempfile::tempdir().unwrap();
    let base = random_model(dir.path(), "base.st", 1, 1.0);
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    let b = random_model(dir.path(), "b.st", 3, 2.0);
    let reports = vec![
        model_delta_report(&base, &a, "a", &DeltaOptions::default()).unwrap(),
        model_delta_report(&base, &b, "b", &DeltaOptions::default()).unwrap(),
    ];
    let recipe = MergeRecipe::weighted(0.3, 0.02, Granularity::PerTensor);
    let models = [input("a", &a), input("b", &b)];
    let base_in = input("base", &base);
    let direct = weighted_merge(&base_in, &models, &reports, &recipe, dir.path().join("d.st")).unwrap();
    let plan = plan_merge(&recipe, Some(&base_in), &models, &reports).unwrap();
    let planned = execute_plan(&plan, Some(&base_in), &models, dir.path().join("p.st")).unwrap();
    assert_eq!(std::fs::read(direct.archive.path()).unwrap(), std::fs::read(planned.path()).unwrap());
}

#[test]
fn nonshared_tensors_follow_policy() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    let extra = write_archive(
        &[
            TensorEntry::new("a.weight", DType::F64, vec![3, 4], vec![0.5; 12]),
            TensorEntry::new("b.bias", DType::F64, vec![7], vec![0.5; 7]),
            TensorEntry::new("c.weight", DType::F64, vec![2, 2, 3], vec![0.5; 12]),
            TensorEntry::new("vision.proj", DType::F32, vec![2], vec![1.0, 2.0]),
        ],
        dir.path().join("b.st"),
        None,
        WriteOptions::default(),
    )
    .unwrap();
    let models = [input("a", &a), input("b", &extra)];

    let copied = average_merge(&models, &MergeRecipe::average(), dir.path().join("c.st")).unwrap();
    assert_eq!(copied.plan.dispositions["vision.proj"], Disposition::Copy { from: "b".into() });
    assert_eq!(copied.archive.read_tensor("vision.proj").unwrap().values, vec![1.0, 2.0]);
    assert_eq!(copied.archive.get("vision.proj").unwrap().dtype, DType::F32);

    let recipe = MergeRecipe {
        nonshared_policy: NonsharedPolicy::Exclude,
        ..MergeRecipe::average()
    };
    let excluded = average_merge(&models, &recipe, dir.path().join("e.st")).unwrap();
    assert!(!excluded.archive.contains("vision.proj"));

    let recipe = MergeRecipe {
        nonshared_policy: NonsharedPolicy::CopyFrom("a".into()),
        ..MergeRecipe::average()
    };
    assert!(average_merge(&models, &recipe, dir.path().join("x.st")).is_err());
    assert!(!dir.path().join("x.st").exists());
}

#[test]
fn name_filter_limits_merged_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    let b = random_model(dir.path(), "b.st", 3, 1.0);
    let recipe = MergeRecipe {
        name_filter: Some(r"\.weight$".into()),
        ..MergeRecipe::average()
    };
    let out = average_merge(&[input("a", &a), input("b", &b)], &recipe, dir.path().join("f.st")).unwrap();
    assert_eq!(out.plan.dispositions["a.weight"], Disposition::Merge);
    assert_eq!(out.archive.read_raw("b.bias").unwrap(), a.read_raw("b.bias").unwrap());
}

#[test]
fn invalid_recipes_are_rejected_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let a = random_model(dir.path(), "a.st", 2, 1.0);
    for recipe in [
        MergeRecipe::weighted(1.5, 0.01, Granularity::PerTensor),
        MergeRecipe::weighted(-0.1, 0.01, Granularity::PerTensor),
        MergeRecipe::weighted(0.5, 0.0, Granularity::PerTensor),
        MergeRecipe {
            name_filter: Some("(".into()),
            ..MergeRecipe::average()
        },
    ] {
        assert!(recipe.validate().is_err());
    }
    let bad = MergeRecipe::weighted(1.5, 0.01, Granularity::PerTensor);
    let out = dir.path().join("never.st");
    assert!(weighted_merge(&input("base", &a), &[input("a", &a)], &[], &bad, &out).is_err());
    assert!(!out.exists());
}
