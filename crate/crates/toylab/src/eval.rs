//! Held-out evaluation: greedy answer accuracy, option-logit records for the
//! choice metrics, and per-head runtime ablation.

use std::collections::BTreeMap;

use omniweights_core::numeric::argmax;
use omniweights_core::surgery::{enumerate_masks, HeadMaskSpec};
use omniweights_core::ChoiceRecord;
use rayon::prelude::*;

use crate::error::Result;
use crate::model::ToyModel;
use crate::tasks::{Sample, TaskId, TaskSampler};

/// Sequences per forward call during evaluation.
const EVAL_CHUNK: usize = 64;

/// `n` held-out samples of `task`. Each task draws from its own stream so
/// the samples of one task do not depend on which other tasks are evaluated.
pub fn eval_samples(task: TaskId, n: usize, seed: u64) -> Vec<Sample> {
    let stream = seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(task as u64 + 1));
    let mut sampler = TaskSampler::new(stream);
    (0..n).map(|_| sampler.sample(task)).collect()
}

/// Logits at each sample's scored position.
pub fn answer_logits(model: &ToyModel, samples: &[Sample], ablate: Option<HeadMaskSpec>) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = samples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let queries: Vec<(&[u32], usize)> = chunk.iter().map(|s| (s.tokens.as_slice(), s.eval_pos)).collect();
            model.logits_at(&queries, ablate)
        })
        .collect();
    let mut out = Vec::with_capacity(samples.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Fraction of samples whose greedy (full-vocabulary argmax) answer token is
/// the reference answer.
pub fn accuracy_on(model: &ToyModel, samples: &[Sample], ablate: Option<HeadMaskSpec>) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let logits = answer_logits(model, samples, ablate)?;
    let correct = samples
        .iter()
        .zip(&logits)
        .filter(|(s, l)| argmax(l) as u32 == s.answer)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

pub fn evaluate(model: &ToyModel, task: TaskId, n_samples: usize, seed: u64) -> Result<f64> {
    accuracy_on(model, &eval_samples(task, n_samples, seed), None)
}

/// One record per sample: the logits of the task's answer tokens at the
/// scored position, plus the greedy answer as generated text.
pub fn choice_records(model: &ToyModel, samples: &[Sample], ablate: Option<HeadMaskSpec>) -> Result<Vec<ChoiceRecord>> {
    let logits = answer_logits(model, samples, ablate)?;
    Ok(samples
        .iter()
        .zip(logits)
        .enumerate()
        .map(|(i, (s, l))| {
            let tokens = s.task.answer_tokens();
            let gold = tokens.iter().position(|t| *t == s.answer).expect("answer is an option");
            ChoiceRecord {
                question_id: format!("{}-{i}", s.task.as_str()),
                option_labels: tokens.iter().map(|t| s.task.answer_label(*t)).collect(),
                option_logits: tokens.iter().map(|t| l[*t as usize]).collect(),
                gold,
                generated: Some(s.task.answer_label(argmax(&l) as u32)),
            }
        })
        .collect())
}

/// Records for every single-head runtime ablation of `model`.
pub fn masked_records(model: &ToyModel, samples: &[Sample]) -> Result<BTreeMap<HeadMaskSpec, Vec<ChoiceRecord>>> {
    enumerate_masks(&model.architecture())
        .into_iter()
        .map(|m| Ok((m, choice_records(model, samples, Some(m))?)))
        .collect()
}
