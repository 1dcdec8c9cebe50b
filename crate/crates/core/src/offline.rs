//! Between-task exchange from the disk pool into the memory pool.
//!
//! The latest model scores every labeled sample in the memory pool; summed
//! cross-entropy per class measures how much each class currently needs
//! rehearsal. Disk records are then drawn with class weights proportional
//! to `(total / class_num[c]) * (class_loss[c] / loss_total)`, favouring
//! classes that are rare on disk and poorly fit by the model, and the draw
//! replaces the memory pool's pseudo-labeled region.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::disk_pool::DiskPool;
use crate::error::{Error, Result};
use crate::learner::{cross_entropy, Model};
use crate::memory_pool::MemoryPool;
use crate::rng::Rng;
use crate::types::LabeledSample;

/// Per-class statistics of one exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_loss: Vec<f64>,
    pub class_prob: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub stats: ClassStats,
    /// Records requested from disk: the memory pool's free unlabeled room.
    pub requested: usize,
    pub drawn: usize,
    pub duration_s: f64,
}

/// Summed cross-entropy of the model on each class's labeled samples.
pub fn class_losses(model: &Model, labeled: &[LabeledSample], num_classes: usize) -> Result<Vec<f64>> {
    if model.dims().classes != num_classes {
        return Err(Error::Shape(format!(
            "model head has {} classes, expected {num_classes}",
            model.dims().classes
        )));
    }
    let mut class_loss = vec![0.0; num_classes];
    for s in labeled {
        if s.label >= num_classes {
            return Err(Error::Shape(format!("label {} outside [0, {num_classes})", s.label)));
        }
        let probs = model.forward(&s.sample.features)?;
        class_loss[s.label] += cross_entropy(&probs, s.label);
    }
    Ok(class_loss)
}

fn normalized(raw: Vec<f64>) -> Option<Vec<f64>> {
    let total: f64 = raw.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| raw.into_iter().map(|w| w / total).collect())
}

/// Class sampling probabilities from disk counts and class losses.
///
/// Classes with no records get 0. When every nonempty class has zero loss
/// the weights fall back to pure inverse frequency, and an empty pool
/// yields all zeros.
pub fn class_sampling_probs(class_num: &[u64], class_loss: &[f64]) -> Result<Vec<f64>> {
    if class_num.len() != class_loss.len() {
        return Err(Error::Shape(format!(
            "class_num has {} entries, class_loss {}",
            class_num.len(),
            class_loss.len()
        )));
    }
    if class_loss.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Shape("class losses must be finite and non-negative".into()));
    }
    let num_total: u64 = class_num.iter().sum();
    if num_total == 0 {
        return Ok(vec![0.0; class_num.len()]);
    }
    let num_total = num_total as f64;
    let loss_total: f64 = class_loss.iter().sum();

    let inverse_frequency = |i: usize| {
        if class_num[i] > 0 {
            num_total / class_num[i] as f64
        } else {
            0.0
        }
    };

    if loss_total > 0.0 {
        let raw = (0..class_num.len())
            .map(|i| inverse_frequency(i) * class_loss[i] / loss_total)
            .collect();
        if let Some(probs) = normalized(raw) {
            return Ok(probs);
        }
    }
    let raw = (0..class_num.len()).map(inverse_frequency).collect();
    Ok(normalized(raw).expect("a nonempty pool has a positive inverse-frequency weight"))
}

/// Runs the full exchange: class losses, class probabilities, a draw of
/// `capacity - labeled` records from disk, and the memory-pool refill.
pub fn run_offline_phase(
    model: &Model,
    mem: &mut MemoryPool,
    disk: &mut DiskPool,
    rng: &mut Rng,
) -> Result<OfflineReport> {
    let start = Instant::now();
    disk.flush()?;
    let class_loss = class_losses(model, mem.labeled(), disk.num_classes())?;
    let class_prob = class_sampling_probs(disk.class_num(), &class_loss)?;
    let requested = mem.unlabeled_room();
    let drawn = if requested == 0 {
        Vec::new()
    } else {
        disk.sample_by_class_prob(&class_prob, requested, rng)?
    };
    let drawn = mem.refill_unlabeled(drawn)?;
    Ok(OfflineReport {
        stats: ClassStats {
            class_loss,
            class_prob,
        },
        requested,
        drawn,
        duration_s: start.elapsed().as_secs_f64(),
    })
}
