//! Hyperparameters, config-file parsing and validation.
//!
//! The config file is flat TOML whose keys are exactly the field names of
//! [`Hyperparams`]; missing keys take their defaults and unknown keys are
//! rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::StreamMeta;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    /// Confidence threshold for pseudo-labels, both for disk admission and
    /// the masked unsupervised loss.
    pub tau: f64,
    /// Weight of replayed labeled samples in the memory loss.
    pub alpha: f64,
    /// Weight of replayed pseudo-labeled samples in the memory loss.
    pub beta: f64,
    /// Amplitude of the cosine ramp.
    pub eta: f64,
    /// Offset of the cosine ramp.
    pub xi: f64,
    /// Fraction of each task's iterations before the unsupervised loss starts.
    pub v1_frac: f64,
    /// Fraction of each task's iterations at which the ramp saturates.
    pub v2_frac: f64,
    /// Probability that a confident in-task candidate is appended to disk.
    pub p_admit: f64,
    pub lr: f64,
    pub mem_capacity: usize,
    pub disk_capacity: usize,
    pub iters_per_task: usize,
    pub batch_new: usize,
    pub batch_replay: usize,
    pub batch_unlabeled: usize,
    /// Hidden units of the classifier.
    pub hidden: usize,
    pub seed: u64,
    /// Re-derive replayed pseudo-labels from the live model instead of
    /// using the label stored at admission.
    pub relabel_replay: bool,
    /// Evaluate with argmax over all classes instead of the task's own.
    pub class_incremental_eval: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            tau: 0.95,
            alpha: 1.0,
            beta: 0.1,
            eta: -0.5,
            xi: 0.5,
            v1_frac: 0.20,
            v2_frac: 0.30,
            p_admit: 0.5,
            lr: 0.03,
            mem_capacity: 200,
            disk_capacity: 10_000,
            iters_per_task: 100,
            batch_new: 10,
            batch_replay: 32,
            batch_unlabeled: 32,
            hidden: 32,
            seed: 0,
            relabel_replay: false,
            class_incremental_eval: false,
        }
    }
}

/// `round(frac * total)` with halves rounded up.
pub fn resolve_iteration(frac: f64, total: usize) -> usize {
    (frac * total as f64 + 0.5).floor() as usize
}

impl Hyperparams {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::format(path, "config", e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("hyperparams always serialize")
    }

    /// Applies one `key=value` override. The value is parsed according to
    /// the type of the field it replaces.
    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        *self = apply_override(self, key, raw)?;
        Ok(())
    }

    pub fn has_key(key: &str) -> bool {
        has_key(&Self::default(), key)
    }

    /// Onset and saturation iterations for a task of `iters_per_task`
    /// iterations.
    pub fn schedule_bounds(&self) -> (usize, usize) {
        (
            resolve_iteration(self.v1_frac, self.iters_per_task),
            resolve_iteration(self.v2_frac, self.iters_per_task),
        )
    }
}

fn check(ok: bool, field: &str, reason: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::config(field, reason()))
    }
}

/// Returns `h` unchanged if every constraint holds, otherwise the first
/// violated constraint.
pub fn validate_config(h: Hyperparams, meta: StreamMeta) -> Result<Hyperparams> {
    check(h.tau > 0.0 && h.tau <= 1.0, "tau", || {
        format!("{} outside (0, 1]", h.tau)
    })?;
    for (name, value) in [("alpha", h.alpha), ("beta", h.beta), ("lr", h.lr)] {
        check(value.is_finite() && value >= 0.0, name, || {
            format!("{value} must be finite and non-negative")
        })?;
    }
    for (name, value) in [("eta", h.eta), ("xi", h.xi)] {
        check(value.is_finite(), name, || format!("{value} is not finite"))?;
    }
    check((0.0..=1.0).contains(&h.v1_frac), "v1_frac", || {
        format!("{} outside [0, 1]", h.v1_frac)
    })?;
    check((0.0..=1.0).contains(&h.v2_frac), "v2_frac", || {
        format!("{} outside [0, 1]", h.v2_frac)
    })?;
    check(h.v1_frac <= h.v2_frac, "v1_frac", || {
        format!("v1 > v2 ({} > {})", h.v1_frac, h.v2_frac)
    })?;
    check((0.0..=1.0).contains(&h.p_admit), "p_admit", || {
        format!("{} outside [0, 1]", h.p_admit)
    })?;
    check(h.mem_capacity >= 1, "mem_capacity", || "must be at least 1".into())?;
    check(h.disk_capacity >= h.mem_capacity, "disk_capacity", || {
        format!(
            "{} is smaller than mem_capacity {}",
            h.disk_capacity, h.mem_capacity
        )
    })?;
    check(h.disk_capacity <= u32::MAX as usize, "disk_capacity", || {
        "exceeds the pool file's 32-bit record count".into()
    })?;
    check(h.batch_new >= 1, "batch_new", || "must be at least 1".into())?;
    check(h.hidden >= 1, "hidden", || "must be at least 1".into())?;

    let (v1, v2) = h.schedule_bounds();
    check(v1 <= v2 && v2 <= h.iters_per_task, "v1_frac", || {
        format!("resolved v1={v1}, v2={v2} not ordered within V={}", h.iters_per_task)
    })?;

    check(meta.tasks >= 1, "stream", || "no tasks".into())?;
    check(meta.num_classes >= 1, "stream", || "no classes".into())?;
    check(
        meta.feature_dim >= 1 && meta.feature_dim <= u16::MAX as usize,
        "stream",
        || format!("feature dimension {} outside [1, 65535]", meta.feature_dim),
    )?;
    Ok(h)
}

fn to_table<T: Serialize>(value: &T) -> toml::Table {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(table)) => table,
        _ => unreachable!("config structs serialize to tables"),
    }
}

pub(crate) fn has_key<T: Serialize>(value: &T, key: &str) -> bool {
    to_table(value).contains_key(key)
}

/// Replaces one field of a flat serde struct, parsing `raw` as the type of
/// the existing value.
pub(crate) fn apply_override<T>(value: &T, key: &str, raw: &str) -> Result<T>
where
    T: Serialize + DeserializeOwned,
{
    let mut table = to_table(value);
    let current = table
        .get(key)
        .ok_or_else(|| Error::config(key, "unknown key"))?;
    let bad = |kind: &str| Error::config(key, format!("expected {kind}, got {raw:?}"));
    let parsed = match current {
        toml::Value::Float(_) => toml::Value::Float(raw.trim().parse().map_err(|_| bad("a number"))?),
        toml::Value::Integer(_) => {
            toml::Value::Integer(raw.trim().parse().map_err(|_| bad("an integer"))?)
        }
        toml::Value::Boolean(_) => {
            toml::Value::Boolean(raw.trim().parse().map_err(|_| bad("true or false"))?)
        }
        toml::Value::String(_) => toml::Value::String(raw.to_string()),
        _ => return Err(Error::config(key, "not overridable")),
    };
    table.insert(key.to_string(), parsed);
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(key, e.message().to_string()))
}
