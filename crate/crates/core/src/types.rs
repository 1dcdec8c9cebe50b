//! Samples, tasks and task streams.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Global class index in `[0, C)`.
pub type ClassId = usize;

/// An unlabeled observation. Features are stored in single precision, the
/// same representation the disk pool persists, so records read back from
/// disk are bit-identical to what was admitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: Vec<f32>,
}

impl Sample {
    pub fn new(id: u64, features: Vec<f32>) -> Self {
        Self { id, features }
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.features.len() != dim {
            return Err(Error::Shape(format!(
                "sample {} has {} features, expected {dim}",
                self.id,
                self.features.len()
            )));
        }
        if self.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::NonFinite("sample features"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sample: Sample,
    pub label: ClassId,
}

impl LabeledSample {
    pub fn new(sample: Sample, label: ClassId) -> Self {
        Self { sample, label }
    }
}

/// An unlabeled sample carrying the model's own prediction at admission.
///
/// `confidence` is rounded up to single precision, so it never drops below
/// the admission threshold it was compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeledSample {
    pub sample: Sample,
    pub pseudo_label: ClassId,
    pub confidence: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: usize,
    pub classes: BTreeSet<ClassId>,
    pub labeled: Vec<LabeledSample>,
    pub unlabeled: Vec<Sample>,
    pub test: Vec<LabeledSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl TaskStream {
    pub fn meta(&self) -> StreamMeta {
        StreamMeta {
            tasks: self.tasks.len(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Checks the structural invariants: disjoint class sets inside
    /// `[0, C)`, labels within their task, consistent feature dimension.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (position, task) in self.tasks.iter().enumerate() {
            if task.task_id != position {
                return Err(Error::Spec(format!(
                    "task at position {position} has id {}",
                    task.task_id
                )));
            }
            for &class in &task.classes {
                if class >= self.num_classes {
                    return Err(Error::Spec(format!(
                        "task {position} uses class {class} outside [0, {})",
                        self.num_classes
                    )));
                }
                if !seen.insert(class) {
                    return Err(Error::Spec(format!(
                        "class {class} appears in more than one task"
                    )));
                }
            }
            for ls in task.labeled.iter().chain(&task.test) {
                if !task.classes.contains(&ls.label) {
                    return Err(Error::Spec(format!(
                        "task {position} has a sample labeled {} outside its classes",
                        ls.label
                    )));
                }
                ls.sample.validate(self.feature_dim)?;
            }
            for s in &task.unlabeled {
                s.validate(self.feature_dim)?;
            }
        }
        Ok(())
    }
}

/// `(T, C, D)` of a stream, enough to validate a configuration against it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamMeta {
    pub tasks: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best
}
