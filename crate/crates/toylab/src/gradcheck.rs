//! Central finite-difference check of the analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{tensor_layout, TensorClass, ToyModel};
use crate::tasks::Sample;

/// Denominator floor of the relative error. A central difference of a loss
/// near `L` carries roundoff of about `eps * L / h` (≈ 5e-11 for `L ≈ 5`,
/// `h = 1e-5`), so components smaller than this cannot be resolved to a
/// relative 1e-6 and are compared absolutely against `tol * floor` instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

pub const ALL_CLASSES: [TensorClass; 10] = [
    TensorClass::Embedding,
    TensorClass::Position,
    TensorClass::NormWeight,
    TensorClass::NormBias,
    TensorClass::AttnWeight,
    TensorClass::AttnBias,
    TensorClass::AttnOutWeight,
    TensorClass::MlpWeight,
    TensorClass::MlpBias,
    TensorClass::Head,
];

#[derive(Debug, Clone, Serialize)]
pub struct GradProbe {
    pub class: TensorClass,
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Probe `per_class` random components of every tensor class.
pub fn gradient_check(model: &ToyModel, batch: &[Sample], per_class: usize, step: f64, seed: u64) -> Result<Vec<GradProbe>> {
    let (_, grads) = model.loss_and_grads(batch, None)?;
    let grads = grads.tensors();
    let layout = tensor_layout(&model.cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::new();
    for class in ALL_CLASSES {
        let members: Vec<usize> = layout
            .iter()
            .enumerate()
            .filter(|(_, (_, _, c))| *c == class)
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue;
        }
        for _ in 0..per_class {
            let t = members[rng.gen_range(0..members.len())];
            let index = rng.gen_range(0..grads[t].len());
            let mut plus = model.clone();
            plus.params.tensors_mut()[t][index] += step;
            let mut minus = model.clone();
            minus.params.tensors_mut()[t][index] -= step;
            let numeric = (plus.loss(batch, None)? - minus.loss(batch, None)?) / (2.0 * step);
            let analytic = grads[t][index];
            probes.push(GradProbe {
                class,
                tensor: layout[t].0.clone(),
                index,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(probes)
}
