//! Where fine-tuning moves the weights: cosine similarity between the
//! flattened parameter deltas of several variants of one base model, and a
//! deterministic 2-D principal-component projection of those deltas.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use omniweights_core::TensorArchive;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Loadings below this magnitude count as zero for the sign convention.
const LOADING_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub labels: Vec<String>,
    /// Euclidean norm of each flattened delta.
    pub norms: Vec<f64>,
    /// Variants whose delta is exactly zero; their cosines are undefined.
    pub zero_norm: Vec<String>,
    /// Pairwise cosine similarity; `None` where either delta is zero.
    pub cosine: Vec<Vec<Option<f64>>>,
    /// Coordinates on the first two principal components of the centered
    /// deltas; a component that does not exist (too few variants) is 0.
    pub projection: Vec<[f64; 2]>,
    /// Variance along each of the two components.
    pub explained_variance: [f64; 2],
}

impl DirectionReport {
    pub fn cosine_between(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == a)?;
        let j = self.labels.iter().position(|l| l == b)?;
        self.cosine[i][j]
    }

    /// `label,pc1,pc2`
    pub fn write_projection_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["label", "pc1", "pc2"])?;
        for (label, [x, y]) in self.labels.iter().zip(&self.projection) {
            out.write_record([label.clone(), x.to_string(), y.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Square matrix with a header row of labels; undefined entries empty.
    pub fn write_cosine_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec![String::new()];
        header.extend(self.labels.iter().cloned());
        out.write_record(&header)?;
        for (label, row) in self.labels.iter().zip(&self.cosine) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// `θ_variant − θ_base` over every tensor of `base`, in name order.
pub fn flattened_delta(base: &TensorArchive, variant: &TensorArchive) -> Result<Vec<f64>> {
    let base_names: Vec<&str> = base.names().collect();
    let variant_names: Vec<&str> = variant.names().collect();
    if base_names != variant_names {
        return Err(LabError::Input(format!(
            "{} does not have the same tensors as {}",
            variant.path().display(),
            base.path().display()
        )));
    }
    let mut delta = Vec::new();
    for name in base_names {
        let b = base.read_tensor(name)?;
        let v = variant.read_tensor(name)?;
        if b.shape != v.shape {
            return Err(omniweights_core::Error::ShapeMismatch {
                name: name.to_string(),
                left: b.shape,
                right: v.shape,
            }
            .into());
        }
        delta.extend(v.values.iter().zip(&b.values).map(|(x, y)| x - y));
    }
    Ok(delta)
}

/// Cosine matrix and principal-component projection of deltas given as
/// flat vectors of equal length.
pub fn direction_report(labels: Vec<String>, deltas: &[Vec<f64>]) -> Result<DirectionReport> {
    if deltas.is_empty() || labels.len() != deltas.len() {
        return Err(LabError::Input("need one label per delta and at least one delta".into()));
    }
    let dim = deltas[0].len();
    if deltas.iter().any(|d| d.len() != dim) {
        return Err(LabError::Input("deltas differ in length".into()));
    }
    let k = deltas.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let norms: Vec<f64> = deltas.iter().map(|d| dot(d, d).sqrt()).collect();
    let zero_norm = labels
        .iter()
        .zip(&norms)
        .filter(|(_, n)| **n == 0.0)
        .map(|(l, _)| l.clone())
        .collect();
    let mut cosine = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            if norms[i] > 0.0 && norms[j] > 0.0 {
                let c = (dot(&deltas[i], &deltas[j]) / (norms[i] * norms[j])).clamp(-1.0, 1.0);
                cosine[i][j] = Some(c);
                cosine[j][i] = Some(c);
            }
        }
    }

    // PCA through the k x k Gram matrix of the centered deltas.
    let mut mean = vec![0.0; dim];
    for d in deltas {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / k as f64;
        }
    }
    let centered: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| d.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let gram = DMatrix::from_fn(k, k, |i, j| dot(&centered[i], &centered[j]));
    let trace = gram.trace();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));

    let mut projection = vec![[0.0; 2]; k];
    let mut explained_variance = [0.0; 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if !(lambda > LOADING_EPS * trace.max(f64::MIN_POSITIVE)) {
            continue;
        }
        let mut u: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // loading vector in parameter space: centeredᵀ u / sqrt(λ)
        let scale = lambda.sqrt();
        let first = (0..dim)
            .map(|n| centered.iter().zip(&u).map(|(row, ui)| row[n] * ui).sum::<f64>() / scale)
            .find(|v| v.abs() > LOADING_EPS);
        if first.is_some_and(|v| v < 0.0) {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        for (i, p) in projection.iter_mut().enumerate() {
            p[c] = u[i] * scale;
        }
        explained_variance[c] = lambda / (k as f64);
    }

    Ok(DirectionReport {
        labels,
        norms,
        zero_norm,
        cosine,
        projection,
        explained_variance,
    })
}

/// Delta directions of `variants` (label, archive) relative to `base`.
pub fn delta_direction_analysis(base: &TensorArchive, variants: &[(String, &TensorArchive)]) -> Result<DirectionReport> {
    let deltas = variants
        .iter()
        .map(|(_, v)| flattened_delta(base, v))
        .collect::<Result<Vec<_>>>()?;
    direction_report(variants.iter().map(|(l, _)| l.clone()).collect(), &deltas)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    #[test]
    fn zero_delta_is_flagged() {
        let r = direction_report(labels(1), &[vec![0.0; 4]]).unwrap();
        assert_eq!(r.zero_norm, vec!["v0"]);
        assert_eq!(r.cosine[0][0], None);
        assert_eq!(r.projection, vec![[0.0, 0.0]]);
    }

    #[test]
    fn scaled_deltas_are_parallel() {
        let v = vec![1.0, -2.0, 0.5, 3.0];
        let w: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        let r = direction_report(labels(2), &[v, w]).unwrap();
        assert!((r.cosine[0][1].unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_recovers_planar_layout() {
        // three points on a line plus one off it
        let deltas = vec![
            vec![0.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![4.0, 0.0, 0.0],
            vec![2.0, 1.0, 0.0],
        ];
        let r = direction_report(labels(4), &deltas).unwrap();
        // pairwise distances are preserved by a full-rank projection
        let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert!((dist(r.projection[0], r.projection[2]) - 4.0).abs() < 1e-12);
        assert!((dist(r.projection[1], r.projection[3]) - 1.0).abs() < 1e-12);
        // first loading is along +x, so later points along x sit further right
        assert!(r.projection[2][0] > r.projection[0][0]);
        assert!(r.explained_variance[0] >= r.explained_variance[1]);
    }

    #[test]
    fn first_loading_is_positive() {
        for deltas in [vec![vec![-1.0, 0.0], vec![1.0, 0.0]], vec![vec![1.0, 0.0], vec![-1.0, 0.0]]] {
            let r = direction_report(labels(2), &deltas).unwrap();
            for (d, p) in deltas.iter().zip(&r.projection) {
                // loading is +x, so the coordinate has the sign of the x entry
                assert_eq!(p[0].signum(), d[0].signum());
            }
        }
    }
}
