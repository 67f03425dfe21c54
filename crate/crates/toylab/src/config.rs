use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tasks::TaskId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab: usize,
    pub context: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub hidden_dim: usize,
    pub mlp_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab: 256,
            context: 128,
            n_layers: 4,
            n_heads: 4,
            head_dim: 32,
            hidden_dim: 128,
            mlp_dim: 512,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab,
            self.context,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.hidden_dim,
            self.mlp_dim,
        ];
        if dims.iter().any(|d| *d == 0) {
            return Err(LabError::Config("all dimensions must be positive".into()));
        }
        if self.n_heads * self.head_dim != self.hidden_dim {
            return Err(LabError::Config(format!(
                "n_heads ({}) x head_dim ({}) != hidden_dim ({})",
                self.n_heads, self.head_dim, self.hidden_dim
            )));
        }
        if self.vocab < crate::tasks::MIN_VOCAB {
            return Err(LabError::Config(format!(
                "vocab {} is smaller than the {} tokens the tasks use",
                self.vocab,
                crate::tasks::MIN_VOCAB
            )));
        }
        Ok(())
    }

    /// Closed-form parameter count: learned token and position embeddings,
    /// per block two layer norms, biased q/k/v/o projections and a biased
    /// two-layer MLP, then a final layer norm and an untied output head.
    pub fn parameter_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.mlp_dim;
        let block = 2 * (2 * d) + 4 * (d * d + d) + (f * d + f) + (d * f + d);
        self.vocab * d + self.context * d + self.n_layers * block + 2 * d + self.vocab * d
    }
}

fn default_momentum() -> f64 {
    0.9
}

fn default_eval_samples() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    /// Task proportions as small integers, e.g. `[[TEXT, 3], [IMG, 2], [VID, 1]]`.
    /// Samples are interleaved block round-robin, so the ratio is exact
    /// within every block.
    pub mixture: Vec<(TaskId, usize)>,
    /// Log a trajectory entry every this many steps (0: only at the end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Seed of the held-out evaluation samples.
    #[serde(default)]
    pub eval_seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn single(task: TaskId, steps: usize, seed: u64) -> Self {
        TrainConfig {
            steps,
            batch_size: 16,
            learning_rate: 0.05,
            momentum: default_momentum(),
            seed,
            mixture: vec![(task, 1)],
            eval_every: 0,
            eval_samples: default_eval_samples(),
            eval_seed: 1_000_003,
            clip_norm: Some(1.0),
        }
    }

    /// Text : image : video = 3 : 2 : 1.
    pub fn default_mixture() -> Vec<(TaskId, usize)> {
        vec![(TaskId::Text, 3), (TaskId::Img, 2), (TaskId::Vid, 1)]
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LabError::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(LabError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(LabError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.mixture.is_empty() || self.mixture.iter().any(|(_, w)| *w == 0) {
            return Err(LabError::Config("mixture needs positive integer proportions".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(LabError::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }

    /// Proportions normalized to sum to one.
    pub fn proportions(&self) -> Vec<(TaskId, f64)> {
        let total: usize = self.mixture.iter().map(|(_, w)| w).sum();
        self.mixture
            .iter()
            .map(|(t, w)| (*t, *w as f64 / total as f64))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let cfg = ToyConfig::default();
        // 256*128 + 128*128 + 4 * (512 + 4*16512 + 66048 + 65664) + 256 + 256*128
        assert_eq!(cfg.parameter_count(), 32768 + 16384 + 4 * 198272 + 256 + 32768);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ToyConfig::default();
        cfg.head_dim = 31;
        assert!(cfg.validate().is_err());
        let mut t = TrainConfig::single(TaskId::Text, 10, 1);
        assert!(t.validate().is_ok());
        t.mixture = vec![(TaskId::Text, 0)];
        assert!(t.validate().is_err());
    }

    #[test]
    fn mixture_proportions() {
        let mut t = TrainConfig::single(TaskId::Text, 1, 1);
        t.mixture = TrainConfig::default_mixture();
        let p: Vec<f64> = t.proportions().iter().map(|(_, p)| *p).collect();
        assert_eq!(p, vec![0.5, 2.0 / 6.0, 1.0 / 6.0]);
    }
}
