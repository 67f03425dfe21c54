//! Deterministic SGD-with-momentum training and the trajectory log.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{LabError, Result};
use crate::eval::evaluate;
use crate::model::{Params, ToyModel};
use crate::tasks::{MixtureSchedule, Sample, TaskId, TaskSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub step: usize,
    /// Mean training loss over the steps since the previous entry; NaN for a
    /// step-0 entry, which has seen no batches.
    pub loss: f64,
    pub snapshot: String,
    pub accuracy: BTreeMap<TaskId, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryLog {
    pub fn last(&self) -> Option<&TrajectoryEntry> {
        self.entries.last()
    }

    /// `step,loss,acc_TEXT,acc_IMG,acc_VID`; tasks that were not evaluated
    /// are left empty.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "loss", "acc_TEXT", "acc_IMG", "acc_VID"])?;
        for e in &self.entries {
            let mut row = vec![e.step.to_string(), fmt_f64(e.loss)];
            for t in TaskId::ALL {
                row.push(e.accuracy.get(&t).map(|a| fmt_f64(*a)).unwrap_or_default());
            }
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Training run state: the model, its momentum buffer and the data stream.
pub struct Trainer {
    pub model: ToyModel,
    cfg: TrainConfig,
    velocity: Params,
    sampler: TaskSampler,
    schedule: MixtureSchedule,
    step: usize,
}

impl Trainer {
    pub fn new(model: ToyModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = Params::zeros(&model.cfg);
        Ok(Trainer {
            velocity,
            sampler: TaskSampler::new(cfg.seed),
            schedule: MixtureSchedule::new(&cfg.mixture),
            model,
            cfg,
            step: 0,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    fn next_batch(&mut self) -> Vec<Sample> {
        (0..self.cfg.batch_size)
            .map(|_| {
                let task = self.schedule.next().expect("schedule is endless");
                self.sampler.sample(task)
            })
            .collect()
    }

    /// One update; returns the batch loss before the update.
    pub fn advance(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        let (loss, mut grads) = self.model.loss_and_grads(&batch, None)?;
        self.step += 1;
        if !loss.is_finite() {
            return Err(LabError::Diverged { step: self.step, loss });
        }
        if let Some(clip) = self.cfg.clip_norm {
            let norm = grads.sum_of_squares().sqrt();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let (lr, mu) = (self.cfg.learning_rate, self.cfg.momentum);
        for ((p, v), g) in self
            .model
            .params
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .zip(grads.tensors())
        {
            for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        Ok(loss)
    }

    /// Held-out accuracy on each task.
    pub fn evaluate(&self, tasks: &[TaskId]) -> Result<BTreeMap<TaskId, f64>> {
        tasks
            .iter()
            .map(|t| Ok((*t, evaluate(&self.model, *t, self.cfg.eval_samples, self.cfg.eval_seed)?)))
            .collect()
    }
}

/// Train up to `cfg.steps`, logging at every checkpoint in `checkpoints`
/// (strictly increasing, at most `cfg.steps`).
pub fn train_with_checkpoints(
    model: &ToyModel,
    cfg: &TrainConfig,
    checkpoints: &[usize],
    eval_tasks: &[TaskId],
) -> Result<(ToyModel, TrajectoryLog)> {
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(LabError::Config("checkpoint steps must be strictly increasing".into()));
    }
    if checkpoints.last().is_some_and(|s| *s > cfg.steps) {
        return Err(LabError::Config(format!("checkpoint beyond the {} training steps", cfg.steps)));
    }
    let mut trainer = Trainer::new(model.clone(), cfg.clone())?;
    let mut log = TrajectoryLog::default();
    let mut window = (0.0, 0usize);
    let mut pending = checkpoints.iter().peekable();
    loop {
        if pending.peek().is_some_and(|s| **s == trainer.step()) {
            pending.next();
            let loss = if window.1 == 0 { f64::NAN } else { window.0 / window.1 as f64 };
            window = (0.0, 0);
            log.entries.push(TrajectoryEntry {
                step: trainer.step(),
                loss,
                snapshot: format!("step-{}", trainer.step()),
                accuracy: trainer.evaluate(eval_tasks)?,
            });
        }
        if trainer.step() == cfg.steps {
            break;
        }
        let loss = trainer.advance()?;
        window.0 += loss;
        window.1 += 1;
    }
    Ok((trainer.model, log))
}

/// Train for `cfg.steps`, logging every `cfg.eval_every` steps and at the end.
pub fn train(model: &ToyModel, cfg: &TrainConfig, eval_tasks: &[TaskId]) -> Result<(ToyModel, TrajectoryLog)> {
    let mut checkpoints: Vec<usize> = if cfg.eval_every > 0 {
        (1..=cfg.steps / cfg.eval_every).map(|k| k * cfg.eval_every).collect()
    } else {
        Vec::new()
    };
    if cfg.steps > 0 && checkpoints.last() != Some(&cfg.steps) {
        checkpoints.push(cfg.steps);
    }
    train_with_checkpoints(model, cfg, &checkpoints, eval_tasks)
}

/// Continued training with evaluation snapshots at every step of `grid`.
pub fn finetune_sweep(
    model: &ToyModel,
    cfg: &TrainConfig,
    grid: &[usize],
    eval_tasks: &[TaskId],
) -> Result<TrajectoryLog> {
    if grid.is_empty() {
        return Err(LabError::Config("empty step grid".into()));
    }
    let mut cfg = cfg.clone();
    cfg.steps = *grid.last().expect("non-empty");
    Ok(train_with_checkpoints(model, &cfg, grid, eval_tasks)?.1)
}
