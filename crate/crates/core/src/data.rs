//! Task streams: seeded Gaussian-cluster streams and pre-extracted feature
//! files split into disjoint-class tasks.
//!
//! In every stream the labeled samples of a class are also part of its
//! unlabeled pool, and test samples are held out from both.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use crate::types::{ClassId, LabeledSample, Sample, Task, TaskStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    pub labels_per_class: usize,
    pub unlabeled_per_class: usize,
    pub test_per_class: usize,
    /// Distance between class means, in units of the per-dimension
    /// cluster standard deviation.
    pub cluster_separation: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            feature_dim: 16,
            tasks: 5,
            classes_per_task: 2,
            labels_per_class: 5,
            unlabeled_per_class: 500,
            test_per_class: 100,
            cluster_separation: 3.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Spec(msg));
        if self.tasks == 0 || self.classes_per_task == 0 {
            return fail("tasks and classes_per_task must be positive".into());
        }
        if self.tasks * self.classes_per_task > self.num_classes {
            return fail(format!(
                "{} tasks of {} classes need more than {} classes",
                self.tasks, self.classes_per_task, self.num_classes
            ));
        }
        if self.labels_per_class == 0 {
            return fail("labels_per_class must be at least 1".into());
        }
        if self.unlabeled_per_class < self.labels_per_class {
            return fail(format!(
                "unlabeled_per_class {} is smaller than labels_per_class {}; labeled samples are drawn from the unlabeled pool",
                self.unlabeled_per_class, self.labels_per_class
            ));
        }
        if self.test_per_class == 0 {
            return fail("test_per_class must be at least 1".into());
        }
        if self.feature_dim == 0 || self.feature_dim > u16::MAX as usize {
            return fail(format!("feature_dim {} outside [1, 65535]", self.feature_dim));
        }
        if !(self.cluster_separation > 0.0 && self.cluster_separation.is_finite()) {
            return fail(format!("cluster_separation {} must be positive", self.cluster_separation));
        }
        Ok(())
    }

    pub fn apply_override(&mut self, key: &str, raw: &str) -> Result<()> {
        *self = crate::config::apply_override(self, key, raw)?;
        Ok(())
    }

    pub fn has_key(key: &str) -> bool {
        crate::config::has_key(&Self::default(), key)
    }
}

fn gaussian_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Class means at pairwise distance `separation`. With `C <= D` they sit on
/// a randomly rotated orthogonal frame (exact distances); otherwise on
/// random directions (distances close to `separation` in expectation).
fn class_means(spec: &SynthSpec, rng: &mut Rng) -> Vec<Vec<f64>> {
    let radius = spec.cluster_separation / std::f64::consts::SQRT_2;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    for _ in 0..spec.num_classes {
        let mut v = gaussian_vector(spec.feature_dim, rng);
        if spec.num_classes <= spec.feature_dim {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect()
}

fn draw_point(mean: &[f64], rng: &mut Rng) -> Vec<f32> {
    mean.iter()
        .map(|m| (m + rng.sample::<f64, _>(StandardNormal)) as f32)
        .collect()
}

pub fn synth_stream(spec: &SynthSpec) -> Result<TaskStream> {
    spec.validate()?;
    let means = class_means(spec, &mut substream(spec.seed, "synth-means"));
    let mut points = substream(spec.seed, "synth-points");
    let mut order = substream(spec.seed, "synth-tasks");

    let mut classes: Vec<ClassId> = (0..spec.num_classes).collect();
    classes.shuffle(&mut order);

    let mut next_id = 0u64;
    let mut tasks = Vec::with_capacity(spec.tasks);
    for (task_id, chunk) in classes
        .chunks(spec.classes_per_task)
        .take(spec.tasks)
        .enumerate()
    {
        let mut task = Task {
            task_id,
            classes: chunk.iter().copied().collect(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: Vec::new(),
        };
        for &class in &task.classes {
            let mean = &means[class];
            for i in 0..spec.unlabeled_per_class {
                let s = Sample::new(next_id, draw_point(mean, &mut points));
                next_id += 1;
                if i < spec.labels_per_class {
                    task.labeled.push(LabeledSample::new(s.clone(), class));
                }
                task.unlabeled.push(s);
            }
            for _ in 0..spec.test_per_class {
                let s = Sample::new(next_id, draw_point(mean, &mut points));
                next_id += 1;
                task.test.push(LabeledSample::new(s, class));
            }
        }
        tasks.push(task);
    }

    Ok(TaskStream {
        tasks,
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
    })
}

/// Labeled feature vectors read from a text file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub samples: Vec<LabeledSample>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

/// Reads the text format: a header line `C D N`, then `N` lines of
/// `label f_1 ... f_D`, whitespace-separated. Sample ids are the record
/// numbers, starting at 0.
pub fn load_feature_dataset(path: &Path) -> Result<FeatureDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "line 1", "missing header `C D N`"))?;
    let header: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(path, format!("line {header_line}"), format!("bad header: {e}")))?;
    let [num_classes, feature_dim, count] = header[..] else {
        return Err(Error::format(
            path,
            format!("line {header_line}"),
            "header must be exactly `C D N`",
        ));
    };

    let mut samples = Vec::with_capacity(count);
    for (line_no, line) in lines {
        let record = samples.len();
        let at = || format!("line {line_no} (record {record})");
        if record == count {
            return Err(Error::format(path, at(), format!("more than the {count} records declared")));
        }
        let mut fields = line.split_whitespace();
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .parse()
            .map_err(|e| Error::format(path, at(), format!("bad label: {e}")))?;
        if label >= num_classes {
            return Err(Error::format(
                path,
                at(),
                format!("label {label} outside [0, {num_classes})"),
            ));
        }
        let features: Vec<f32> = fields
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, at(), format!("bad feature: {e}")))?;
        if features.len() != feature_dim {
            return Err(Error::format(
                path,
                at(),
                format!("{} features, header declares {feature_dim}", features.len()),
            ));
        }
        if features.iter().any(|f| !f.is_finite()) {
            return Err(Error::format(path, at(), "non-finite feature"));
        }
        samples.push(LabeledSample::new(Sample::new(record as u64, features), label));
    }
    if samples.len() != count {
        return Err(Error::format(
            path,
            "end of file",
            format!("{} records, header declares {count}", samples.len()),
        ));
    }
    Ok(FeatureDataset {
        samples,
        num_classes,
        feature_dim,
    })
}

/// Writes `ds` in the format read by [`load_feature_dataset`]. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_feature_dataset(path: &Path, ds: &FeatureDataset) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{} {} {}", ds.num_classes, ds.feature_dim, ds.samples.len()).unwrap();
    for s in &ds.samples {
        write!(out, "{}", s.label).unwrap();
        for f in &s.sample.features {
            write!(out, " {f}").unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Splits a dataset into `tasks` tasks of `classes_per_task` classes each.
/// Per class, `round(test_fraction * n)` samples (at least one) are held
/// out for testing; of the rest, `labels_per_class` chosen at random are
/// labeled and all are unlabeled.
pub fn split_tasks(
    ds: &FeatureDataset,
    tasks: usize,
    classes_per_task: usize,
    labels_per_class: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<TaskStream> {
    if tasks == 0 || classes_per_task == 0 || tasks * classes_per_task > ds.num_classes {
        return Err(Error::Spec(format!(
            "{tasks} tasks of {classes_per_task} classes do not fit in {} classes",
            ds.num_classes
        )));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Spec(format!("test_fraction {test_fraction} outside [0, 1)")));
    }
    let mut by_class: Vec<Vec<&LabeledSample>> = vec![Vec::new(); ds.num_classes];
    for s in &ds.samples {
        by_class[s.label].push(s);
    }

    let mut rng = substream(seed, "split");
    let mut classes: Vec<ClassId> = (0..ds.num_classes).collect();
    classes.shuffle(&mut rng);

    let mut out = Vec::with_capacity(tasks);
    for (task_id, chunk) in classes.chunks(classes_per_task).take(tasks).enumerate() {
        let class_set: BTreeSet<ClassId> = chunk.iter().copied().collect();
        let mut task = Task {
            task_id,
            classes: class_set.clone(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: Vec::new(),
        };
        for class in class_set {
            let mut members = by_class[class].clone();
            let n = members.len();
            let n_test = ((test_fraction * n as f64).round() as usize).max(1);
            if n < n_test + labels_per_class {
                return Err(Error::InsufficientData {
                    class,
                    available: n,
                    required: n_test + labels_per_class,
                });
            }
            members.shuffle(&mut rng);
            let (test, train) = members.split_at(n_test);
            task.test.extend(test.iter().map(|s| (*s).clone()));
            task.labeled.extend(train[..labels_per_class].iter().map(|s| (*s).clone()));
            task.unlabeled.extend(train.iter().map(|s| s.sample.clone()));
        }
        out.push(task);
    }
    Ok(TaskStream {
        tasks: out,
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
    })
}
