//! The continual-learning loop and its bookkeeping.
//!
//! Per task: `iters_per_task` SGD steps on new labeled data plus replay plus
//! the scheduled unsupervised term, with every iteration's unlabeled batch
//! offered to the disk pool; then evaluation on every task seen so far;
//! then, between tasks, the offline exchange from disk into memory.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::config::{validate_config, Hyperparams};
use crate::disk_pool::{AdmissionDecision, AdmissionGate, DiskPool};
use crate::error::{Error, Result};
use crate::learner::{sgd_step, total_loss, Dims, Model, StepBatch};
use crate::memory_pool::{InsertOutcome, MemoryPool};
use crate::offline::{run_offline_phase, OfflineReport};
use crate::rng::{self, substream, Rng};
use crate::schedule::ProgressiveSchedule;
use crate::types::{LabeledSample, PseudoLabeledSample, Sample, Task, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Fine-tune on each task's labels only.
    Sft,
    /// Add reservoir replay of labeled samples.
    LabeledReplay,
    /// The full two-tier method.
    #[serde(rename = "edgehml")]
    EdgeHml,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Sft, Variant::LabeledReplay, Variant::EdgeHml];

    pub fn uses_memory_pool(self) -> bool {
        matches!(self, Variant::LabeledReplay | Variant::EdgeHml)
    }

    pub fn uses_disk_pool(self) -> bool {
        self == Variant::EdgeHml
    }

    pub fn uses_unlabeled(self) -> bool {
        self == Variant::EdgeHml
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Sft => "sft",
            Variant::LabeledReplay => "labeled-replay",
            Variant::EdgeHml => "edgehml",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("variant", format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_id: usize,
    pub iterations: usize,
    /// Iterations that computed the unsupervised objective.
    pub unsup_iterations: usize,
    pub first_unsup_iteration: Option<usize>,
    /// Unsupervised samples that cleared the confidence mask.
    pub unsup_confident: usize,
    /// Unlabeled samples offered to the admission gate.
    pub offered: usize,
    pub admitted: usize,
    pub rejected_low_confidence: usize,
    pub rejected_out_of_task: usize,
    pub rejected_by_coin: usize,
    /// Distinct labeled samples offered to the memory reservoir.
    pub labeled_offered: usize,
    pub labeled_stored: usize,
    pub final_loss: Option<f64>,
    pub online_s: f64,
}

struct Streams {
    batches: Rng,
    reservoir: Rng,
    admission: Rng,
    offline: Rng,
}

impl Streams {
    fn new(seed: u64) -> Self {
        Self {
            batches: substream(seed, rng::BATCHES),
            reservoir: substream(seed, rng::RESERVOIR),
            admission: substream(seed, rng::ADMISSION),
            offline: substream(seed, rng::OFFLINE),
        }
    }
}

/// Model, pools and random streams of one run.
pub struct Trainer {
    pub model: Model,
    pub mem: Option<MemoryPool>,
    pub disk: Option<DiskPool>,
    h: Hyperparams,
    variant: Variant,
    schedule: ProgressiveSchedule,
    gate: AdmissionGate,
    streams: Streams,
}

impl Trainer {
    /// A trainer with a freshly initialized model. `pool_path` is only used
    /// by variants with a disk pool.
    pub fn new(h: &Hyperparams, variant: Variant, stream: &TaskStream, pool_path: &Path) -> Result<Self> {
        let h = validate_config(h.clone(), stream.meta())?;
        let dims = Dims::new(stream.feature_dim, h.hidden, stream.num_classes);
        let model = Model::init(dims, &mut substream(h.seed, rng::MODEL_INIT));
        let mem = variant
            .uses_memory_pool()
            .then(|| MemoryPool::new(h.mem_capacity));
        let disk = if variant.uses_disk_pool() {
            Some(DiskPool::create(
                pool_path,
                stream.feature_dim,
                h.disk_capacity,
                stream.num_classes,
            )?)
        } else {
            None
        };
        Ok(Self::with_parts(model, mem, disk, h, variant))
    }

    /// Assembles a trainer from existing parts; `h` must already be valid.
    pub fn with_parts(
        model: Model,
        mem: Option<MemoryPool>,
        disk: Option<DiskPool>,
        h: Hyperparams,
        variant: Variant,
    ) -> Self {
        let schedule = ProgressiveSchedule::from_hyperparams(&h);
        let gate = AdmissionGate {
            num_classes: model.dims().classes,
            tau: h.tau,
            p_admit: h.p_admit,
        };
        let streams = Streams::new(h.seed);
        Self {
            model,
            mem,
            disk,
            h,
            variant,
            schedule,
            gate,
            streams,
        }
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.h
    }

    pub fn schedule(&self) -> &ProgressiveSchedule {
        &self.schedule
    }

    /// Runs the online phase of one task.
    pub fn train_task(&mut self, task: &Task) -> Result<TaskMetrics> {
        let start = Instant::now();
        let mut metrics = TaskMetrics {
            task_id: task.task_id,
            ..Default::default()
        };
        let iterations = self.h.iters_per_task;
        if iterations == 0 {
            return Ok(metrics);
        }
        if task.labeled.is_empty() {
            return Err(Error::EmptyBatch);
        }

        let n_labeled = task.labeled.len();
        let mut order: Vec<usize> = (0..n_labeled).collect();
        order.shuffle(&mut self.streams.batches);
        let per_batch = self.h.batch_new.min(n_labeled);
        let mut drawn = 0usize;

        let replay_unlab = if self.variant.uses_unlabeled() {
            self.h.batch_replay
        } else {
            0
        };
        let draws_unlabeled = self.variant.uses_unlabeled() && !task.unlabeled.is_empty();

        for v in 0..iterations {
            // (a) next slice of the task's labeled samples, cycling
            let new: Vec<LabeledSample> = (0..per_batch)
                .map(|i| task.labeled[order[(drawn + i) % n_labeled]].clone())
                .collect();
            let first_seen = n_labeled.saturating_sub(drawn).min(per_batch);
            drawn += per_batch;

            // (b) replay
            let (replay_lab, mut replay_pseudo) = match &self.mem {
                Some(mem) => mem.sample_replay_batch(self.h.batch_replay, replay_unlab, &mut self.streams.batches),
                None => (Vec::new(), Vec::new()),
            };
            if self.h.relabel_replay {
                relabel(&self.model, &mut replay_pseudo)?;
            }

            // (c) unlabeled batch, drawn every iteration for admission
            let unlabeled: Vec<Sample> = if draws_unlabeled {
                let k = self.h.batch_unlabeled.min(task.unlabeled.len());
                index::sample(&mut self.streams.batches, task.unlabeled.len(), k)
                    .into_iter()
                    .map(|i| task.unlabeled[i].clone())
                    .collect()
            } else {
                Vec::new()
            };
            let gamma = (self.variant.uses_unlabeled() && self.schedule.is_active(v) && !unlabeled.is_empty())
                .then(|| self.schedule.gamma(v));

            // (d) one step on the combined objective
            let batch = StepBatch {
                new: &new,
                replay_lab: &replay_lab,
                replay_unlab: &replay_pseudo,
                unlabeled: &unlabeled,
            };
            let step = total_loss(&self.model, batch, gamma, &self.h)?;
            sgd_step(&mut self.model, &step.grads, self.h.lr)?;
            if step.unsup_forwards > 0 {
                metrics.unsup_iterations += 1;
                metrics.first_unsup_iteration.get_or_insert(v);
            }
            metrics.unsup_confident += step.unsup_confident;
            metrics.final_loss = Some(step.loss.total);

            // (e) online admission into the disk pool
            if let Some(disk) = self.disk.as_mut() {
                for u in &unlabeled {
                    let probs = self.model.forward(&u.features)?;
                    metrics.offered += 1;
                    match self.gate.consider(u, &probs, &task.classes, &mut self.streams.admission)? {
                        AdmissionDecision::Admitted(ps) => {
                            disk.append(&ps)?;
                            metrics.admitted += 1;
                        }
                        AdmissionDecision::RejectedLowConfidence => metrics.rejected_low_confidence += 1,
                        AdmissionDecision::RejectedOutOfTask => metrics.rejected_out_of_task += 1,
                        AdmissionDecision::RejectedByCoin => metrics.rejected_by_coin += 1,
                    }
                }
            }

            // (f) each labeled sample enters the reservoir once per task
            if let Some(mem) = self.mem.as_mut() {
                for s in new.into_iter().take(first_seen) {
                    metrics.labeled_offered += 1;
                    if let InsertOutcome::Stored(_) = mem.insert_labeled(s, &mut self.streams.reservoir) {
                        metrics.labeled_stored += 1;
                    }
                }
            }
            metrics.iterations += 1;
        }
        metrics.online_s = start.elapsed().as_secs_f64();
        Ok(metrics)
    }

    /// Runs the disk-to-memory exchange, if this variant has both pools.
    pub fn offline_phase(&mut self) -> Result<Option<OfflineReport>> {
        match (self.mem.as_mut(), self.disk.as_mut()) {
            (Some(mem), Some(disk)) => {
                run_offline_phase(&self.model, mem, disk, &mut self.streams.offline).map(Some)
            }
            _ => Ok(None),
        }
    }

    pub fn check_pools(&self) -> Result<()> {
        if let Some(mem) = &self.mem {
            mem.check_invariants()?;
        }
        if let Some(disk) = &self.disk {
            disk.check_invariants()?;
        }
        Ok(())
    }
}

fn relabel(model: &Model, replay: &mut [PseudoLabeledSample]) -> Result<()> {
    for ps in replay {
        ps.pseudo_label = model.predict(&ps.sample.features)?;
    }
    Ok(())
}

/// Test accuracy of `model` on each task. Task-incremental evaluation
/// restricts the argmax to the task's own classes; `class_incremental`
/// uses the full head instead.
pub fn evaluate(model: &Model, tasks: &[Task], class_incremental: bool) -> Result<Vec<f64>> {
    tasks
        .iter()
        .map(|task| {
            if task.test.is_empty() {
                return Err(Error::EmptyTestSet { task: task.task_id });
            }
            let mut correct = 0usize;
            for s in &task.test {
                let probs = model.forward(&s.sample.features)?;
                let predicted = if class_incremental {
                    crate::types::argmax(&probs).map(|(c, _)| c)
                } else {
                    let mut best: Option<(usize, f64)> = None;
                    for &c in &task.classes {
                        if best.is_none_or(|(_, p)| probs[c] > p) {
                            best = Some((c, probs[c]));
                        }
                    }
                    best.map(|(c, _)| c)
                };
                if predicted == Some(s.label) {
                    correct += 1;
                }
            }
            Ok(correct as f64 / task.test.len() as f64)
        })
        .collect()
}

/// Mean of the last row of an accuracy matrix: the accuracy on each task
/// measured after the final task.
pub fn average_accuracy(acc_matrix: &[Vec<f64>]) -> f64 {
    match acc_matrix.last() {
        Some(row) if !row.is_empty() => row.iter().sum::<f64>() / row.len() as f64,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub seed: u64,
    /// Row `k` holds the accuracy on tasks `0..=k` after training task `k`.
    pub acc_matrix: Vec<Vec<f64>>,
    pub average_accuracy: f64,
    /// Share of all iterations that computed the unsupervised objective.
    pub unsup_fraction: f64,
    pub unsup_forward_count: usize,
    pub total_iterations: usize,
    /// Online training plus offline exchanges; evaluation excluded.
    pub iteration_time_s: f64,
    pub per_task_offline_s: Vec<f64>,
    pub task_metrics: Vec<TaskMetrics>,
    pub offline_reports: Vec<OfflineReport>,
    /// Disk-pool overflow policy.
    pub disk_eviction: String,
    pub config_echo: Hyperparams,
}

pub const CSV_VERSION: u32 = 1;
pub const CSV_COLUMNS: &str = "variant,seed,average_accuracy,unsup_fraction,iteration_time_s";

impl RunReport {
    /// Copy with every wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.iteration_time_s = 0.0;
        r.per_task_offline_s.iter_mut().for_each(|t| *t = 0.0);
        r.task_metrics.iter_mut().for_each(|m| m.online_s = 0.0);
        r.offline_reports.iter_mut().for_each(|o| o.duration_s = 0.0);
        r
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.variant, self.seed, self.average_accuracy, self.unsup_fraction, self.iteration_time_s
        )
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Trains on every task in order and reports the accuracy matrix, the
/// unsupervised-iteration share and the training time.
pub fn run_stream(stream: &TaskStream, h: &Hyperparams, variant: Variant, pool_path: &Path) -> Result<RunReport> {
    run_stream_with_model(stream, h, variant, pool_path).map(|(report, _)| report)
}

/// [`run_stream`], also handing back the final model.
pub fn run_stream_with_model(
    stream: &TaskStream,
    h: &Hyperparams,
    variant: Variant,
    pool_path: &Path,
) -> Result<(RunReport, Model)> {
    stream.validate()?;
    let mut trainer = Trainer::new(h, variant, stream, pool_path)?;
    let h = trainer.hyperparams().clone();

    let mut acc_matrix = Vec::with_capacity(stream.tasks.len());
    let mut task_metrics = Vec::with_capacity(stream.tasks.len());
    let mut offline_reports = Vec::new();
    let mut per_task_offline_s = Vec::new();
    let mut iteration_time_s = 0.0;

    for (k, task) in stream.tasks.iter().enumerate() {
        let metrics = trainer.train_task(task)?;
        iteration_time_s += metrics.online_s;
        log::debug!(
            "{variant} task {k}: loss {:?}, admitted {}/{}, unsupervised iterations {}",
            metrics.final_loss,
            metrics.admitted,
            metrics.offered,
            metrics.unsup_iterations
        );
        task_metrics.push(metrics);

        let row = evaluate(&trainer.model, &stream.tasks[..=k], h.class_incremental_eval)?;
        log::info!("{variant} after task {k}: {row:?}");
        acc_matrix.push(row);

        if k + 1 < stream.tasks.len() {
            if let Some(report) = trainer.offline_phase()? {
                iteration_time_s += report.duration_s;
                per_task_offline_s.push(report.duration_s);
                offline_reports.push(report);
            }
        }
        if cfg!(debug_assertions) {
            trainer.check_pools()?;
        }
    }
    if let Some(disk) = trainer.disk.as_mut() {
        disk.flush()?;
    }

    let total_iterations: usize = task_metrics.iter().map(|m| m.iterations).sum();
    let unsup_forward_count: usize = task_metrics.iter().map(|m| m.unsup_iterations).sum();
    let unsup_fraction = if total_iterations == 0 {
        0.0
    } else {
        unsup_forward_count as f64 / total_iterations as f64
    };
    let report = RunReport {
        variant,
        seed: h.seed,
        average_accuracy: average_accuracy(&acc_matrix),
        acc_matrix,
        unsup_fraction,
        unsup_forward_count,
        total_iterations,
        iteration_time_s,
        per_task_offline_s,
        task_metrics,
        offline_reports,
        disk_eviction: "fifo".to_string(),
        config_echo: h,
    };
    Ok((report, trainer.model))
}
