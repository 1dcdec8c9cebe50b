//! The classifier and its training objectives.
//!
//! A `D -> H -> C` multilayer perceptron with a tanh hidden layer and a
//! softmax head, trained by plain SGD. Parameters live in one flat buffer
//! (`w1`, `b1`, `w2`, `b2`, row-major) so gradients, updates, checkpoints
//! and finite-difference checks all work on the same layout.
//!
//! Batch losses are means, so the relative weights `alpha`, `beta` and
//! `gamma` do not depend on batch size.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::Hyperparams;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{argmax, ClassId, LabeledSample, PseudoLabeledSample, Sample};

const CHECKPOINT_MAGIC: &[u8; 8] = b"EHMLMODL";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Dims {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input,
            hidden,
            classes,
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * self.input + self.hidden + self.classes * self.hidden + self.classes
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = w1 + self.hidden * self.input;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.classes * self.hidden;
        [w1, b1, w2, b2]
    }
}

/// Borrowed view of the four parameter blocks.
struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn split(dims: Dims, values: &[f64]) -> Layers<'_> {
    let [_, b1, w2, b2] = dims.offsets();
    let (w1, rest) = values.split_at(b1);
    let (b1v, rest) = rest.split_at(w2 - b1);
    let (w2v, b2v) = rest.split_at(b2 - w2);
    Layers {
        w1,
        b1: b1v,
        w2: w2v,
        b2: b2v,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    dims: Dims,
    params: Vec<f64>,
}

/// Gradient with the same flat layout as [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: Dims,
    values: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; dims.param_count()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        assert_eq!(self.dims, other.dims, "gradient shapes differ");
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Activations kept from a forward pass for the backward pass.
struct Trace {
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Model {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            params: vec![0.0; dims.param_count()],
        }
    }

    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(dims: Dims, rng: &mut Rng) -> Self {
        let mut model = Self::zeros(dims);
        let [w1, b1, w2, b2] = dims.offsets();
        let s1 = 1.0 / (dims.input as f64).sqrt();
        let s2 = 1.0 / (dims.hidden as f64).sqrt();
        for p in &mut model.params[w1..b1] {
            *p = s1 * rng.sample::<f64, _>(StandardNormal);
        }
        for p in &mut model.params[w2..b2] {
            *p = s2 * rng.sample::<f64, _>(StandardNormal);
        }
        model
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.dims.input {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.dims.input
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &[f32]) -> Trace {
        let Dims { input, hidden, classes } = self.dims;
        let l = split(self.dims, &self.params);
        let mut h = Vec::with_capacity(hidden);
        for j in 0..hidden {
            let row = &l.w1[j * input..(j + 1) * input];
            let z: f64 = row.iter().zip(x).map(|(w, &xi)| w * f64::from(xi)).sum();
            h.push((z + l.b1[j]).tanh());
        }
        let mut logits = Vec::with_capacity(classes);
        for c in 0..classes {
            let row = &l.w2[c * hidden..(c + 1) * hidden];
            let z: f64 = row.iter().zip(&h).map(|(w, hj)| w * hj).sum();
            logits.push(z + l.b2[c]);
        }
        Trace {
            hidden: h,
            probs: softmax(&logits),
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f32]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.trace(x).probs)
    }

    pub fn predict(&self, x: &[f32]) -> Result<ClassId> {
        Ok(argmax(&self.forward(x)?).map(|(c, _)| c).unwrap_or(0))
    }

    /// Backpropagates `weight * CE(probs, target)` into `grads` and returns
    /// the unweighted loss.
    fn backprop(&self, x: &[f32], trace: &Trace, target: ClassId, weight: f64, grads: &mut Gradients) -> f64 {
        let Dims { input, hidden, classes } = self.dims;
        let [o_w1, o_b1, o_w2, o_b2] = self.dims.offsets();
        let l = split(self.dims, &self.params);

        let mut d_logits = trace.probs.clone();
        d_logits[target] -= 1.0;
        for d in &mut d_logits {
            *d *= weight;
        }

        let g = &mut grads.values;
        let mut d_hidden = vec![0.0; hidden];
        for c in 0..classes {
            let dz = d_logits[c];
            g[o_b2 + c] += dz;
            let row = o_w2 + c * hidden;
            for j in 0..hidden {
                g[row + j] += dz * trace.hidden[j];
                d_hidden[j] += dz * l.w2[c * hidden + j];
            }
        }
        for j in 0..hidden {
            let dz = d_hidden[j] * (1.0 - trace.hidden[j] * trace.hidden[j]);
            g[o_b1 + j] += dz;
            let row = o_w1 + j * input;
            for (k, &xk) in x.iter().enumerate() {
                g[row + k] += dz * f64::from(xk);
            }
        }
        cross_entropy(&trace.probs, target)
    }

    /// Mean cross-entropy of `pairs` scaled by `coef`, with gradients of
    /// the scaled value added into `grads`. Returns the unscaled mean.
    fn mean_ce<'a, I>(&self, pairs: I, coef: f64, grads: &mut Gradients) -> Result<f64>
    where
        I: ExactSizeIterator<Item = (&'a [f32], ClassId)>,
    {
        let n = pairs.len();
        if n == 0 {
            return Ok(0.0);
        }
        let weight = coef / n as f64;
        let mut total = 0.0;
        for (x, y) in pairs {
            self.check_input(x)?;
            self.check_class(y)?;
            let trace = self.trace(x);
            total += self.backprop(x, &trace, y, weight, grads);
        }
        Ok(total / n as f64)
    }

    fn check_class(&self, class: ClassId) -> Result<()> {
        if class >= self.dims.classes {
            return Err(Error::Shape(format!(
                "class {class} outside model head of {}",
                self.dims.classes
            )));
        }
        Ok(())
    }

    /// Writes the model as little-endian `EHMLMODL` v1: magic, version
    /// (u16), D, H, C (u32 each), then every parameter as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for d in [self.dims.input, self.dims.hidden, self.dims.classes] {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &p in &self.params {
            w.write_all(&(p as f32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "header", "bad checkpoint magic"));
        }
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let version = u16::from_le_bytes(u16b);
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                "header",
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let mut u32b = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut u32b)?;
            *d = u32::from_le_bytes(u32b) as usize;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2]);
        let mut params = Vec::with_capacity(dims.param_count());
        for i in 0..dims.param_count() {
            r.read_exact(&mut u32b)
                .map_err(|_| Error::format(path, format!("parameter {i}"), "truncated"))?;
            params.push(f64::from(f32::from_le_bytes(u32b)));
        }
        Ok(Self { dims, params })
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln p[target]`, the cross-entropy of a one-hot target.
pub fn cross_entropy(probs: &[f64], target: ClassId) -> f64 {
    -probs[target].max(f64::MIN_POSITIVE).ln()
}

/// Mean cross-entropy of a batch of new labeled samples.
pub fn supervised_loss(model: &Model, batch: &[LabeledSample]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut grads = Gradients::zeros(model.dims);
    let loss = model.mean_ce(
        batch.iter().map(|s| (s.sample.features.as_slice(), s.label)),
        1.0,
        &mut grads,
    )?;
    Ok((loss, grads))
}

/// `alpha * meanCE(labeled replay) + beta * meanCE(pseudo-labeled replay)`,
/// the latter against the stored pseudo-labels. Empty lists contribute 0.
pub fn memory_loss(
    model: &Model,
    lab: &[LabeledSample],
    unlab: &[PseudoLabeledSample],
    alpha: f64,
    beta: f64,
) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(model.dims);
    let l_lab = model.mean_ce(
        lab.iter().map(|s| (s.sample.features.as_slice(), s.label)),
        alpha,
        &mut grads,
    )?;
    let l_unlab = model.mean_ce(
        unlab
            .iter()
            .map(|s| (s.sample.features.as_slice(), s.pseudo_label)),
        beta,
        &mut grads,
    )?;
    Ok((alpha * l_lab + beta * l_unlab, grads))
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnsupervisedOutcome {
    pub loss: f64,
    pub grads: Gradients,
    /// Samples whose top probability reached `tau`.
    pub confident: usize,
    /// Forward passes spent on the batch.
    pub forwards: usize,
}

/// Confidence-masked self-training loss: each sample whose top probability
/// reaches `tau` contributes the cross-entropy against its own argmax,
/// with that target held constant. The mean runs over confident samples
/// only; no confident sample gives a loss of 0.
pub fn unsupervised_loss(model: &Model, batch: &[Sample], tau: f64) -> Result<UnsupervisedOutcome> {
    let mut grads = Gradients::zeros(model.dims);
    let mut confident = Vec::new();
    for s in batch {
        model.check_input(&s.features)?;
        let trace = model.trace(&s.features);
        if let Some((label, p)) = argmax(&trace.probs) {
            if p >= tau {
                confident.push((s, label, trace));
            }
        }
    }
    let n = confident.len();
    let mut loss = 0.0;
    if n > 0 {
        let weight = 1.0 / n as f64;
        for (s, label, trace) in &confident {
            loss += model.backprop(&s.features, trace, *label, weight, &mut grads);
        }
        loss /= n as f64;
    }
    Ok(UnsupervisedOutcome {
        loss,
        grads,
        confident: n,
        forwards: batch.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_s: f64,
    pub l_m: f64,
    pub l_u: f64,
    pub gamma: f64,
    pub total: f64,
}

/// Inputs to one optimization step.
#[derive(Debug, Clone, Copy)]
pub struct StepBatch<'a> {
    pub new: &'a [LabeledSample],
    pub replay_lab: &'a [LabeledSample],
    pub replay_unlab: &'a [PseudoLabeledSample],
    pub unlabeled: &'a [Sample],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub unsup_forwards: usize,
    pub unsup_confident: usize,
}

/// `L = L_s + L_m + gamma * L_u`.
///
/// `gamma` is `None` while the schedule has not reached its onset; the
/// unsupervised batch is then never forwarded at all. A `Some` weight
/// computes `L_u` even when the weight itself is 0, which happens exactly
/// at the onset iteration.
pub fn total_loss(
    model: &Model,
    batch: StepBatch<'_>,
    gamma: Option<f64>,
    h: &Hyperparams,
) -> Result<StepOutcome> {
    let (l_s, mut grads) = supervised_loss(model, batch.new)?;
    let (l_m, g_m) = memory_loss(model, batch.replay_lab, batch.replay_unlab, h.alpha, h.beta)?;
    grads.add_scaled(&g_m, 1.0);

    let (l_u, gamma, forwards, confident) = match gamma {
        Some(gamma) => {
            let u = unsupervised_loss(model, batch.unlabeled, h.tau)?;
            grads.add_scaled(&u.grads, gamma);
            (u.loss, gamma, u.forwards, u.confident)
        }
        None => (0.0, 0.0, 0, 0),
    };
    Ok(StepOutcome {
        loss: LossBreakdown {
            l_s,
            l_m,
            l_u,
            gamma,
            total: l_s + l_m + gamma * l_u,
        },
        grads,
        unsup_forwards: forwards,
        unsup_confident: confident,
    })
}

/// `theta <- theta - lr * grad`. The model is left untouched on error.
pub fn sgd_step(model: &mut Model, grads: &Gradients, lr: f64) -> Result<()> {
    if grads.dims != model.dims {
        return Err(Error::Shape(format!(
            "gradient for {:?} applied to model {:?}",
            grads.dims, model.dims
        )));
    }
    if grads.values.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let updated: Vec<f64> = model
        .params
        .iter()
        .zip(&grads.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    if updated.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("parameters after update"));
    }
    model.params = updated;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn sample(id: u64, x: &[f32]) -> Sample {
        Sample::new(id, x.to_vec())
    }

    fn labeled(id: u64, x: &[f32], y: usize) -> LabeledSample {
        LabeledSample::new(sample(id, x), y)
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(Dims::new(3, 5, 4));
        let p = m.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = Model::zeros(Dims::new(3, 5, 4));
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_model_losses() {
        let m = Model::zeros(Dims::new(2, 3, 4));
        let batch = vec![labeled(0, &[1.0, 0.0], 2), labeled(1, &[0.0, 1.0], 0)];
        let (l, _) = supervised_loss(&m, &batch).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let unlab = vec![PseudoLabeledSample {
            sample: sample(2, &[0.3, 0.3]),
            pseudo_label: 1,
            confidence: 0.99,
        }];
        let (lm, _) = memory_loss(&m, &batch, &unlab, 1.0, 0.1).unwrap();
        assert!((lm - 1.1 * 4f64.ln()).abs() < 1e-12);
        assert!((lm - 1.5249).abs() < 1e-4);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let mut m = Model::zeros(Dims::new(1, 1, 2));
        // b2 = [800, 0]: class 0 gets all the mass
        let [_, _, _, b2] = m.dims().offsets();
        m.params_mut()[b2] = 800.0;
        let (l, _) = supervised_loss(&m, &[labeled(0, &[0.0], 0)]).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn empty_batches() {
        let m = Model::zeros(Dims::new(2, 2, 2));
        assert!(matches!(supervised_loss(&m, &[]), Err(Error::EmptyBatch)));
        let (l, g) = memory_loss(&m, &[], &[], 1.0, 0.1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.is_zero());
    }

    #[test]
    fn unconfident_batch_contributes_nothing() {
        let m = Model::zeros(Dims::new(2, 2, 3));
        let batch = vec![sample(0, &[1.0, 1.0]), sample(1, &[-1.0, 0.0])];
        let u = unsupervised_loss(&m, &batch, 0.95).unwrap();
        assert_eq!(u.loss, 0.0);
        assert_eq!(u.confident, 0);
        assert_eq!(u.forwards, 2);
        assert!(u.grads.is_zero());
    }

    #[test]
    fn single_confident_sample_loss_is_neg_log_top() {
        let mut m = Model::zeros(Dims::new(1, 1, 3));
        let [_, _, _, b2] = m.dims().offsets();
        m.params_mut()[b2 + 1] = 5.0;
        let p = m.forward(&[0.0]).unwrap();
        let top = p[1];
        assert!(top >= 0.95);
        let u = unsupervised_loss(&m, &[sample(0, &[0.0])], 0.95).unwrap();
        assert!((u.loss - (-top.ln())).abs() < 1e-15);
        assert_eq!(u.confident, 1);
    }

    #[test]
    fn gamma_none_skips_unsupervised_forwards() {
        let m = Model::init(Dims::new(2, 4, 3), &mut substream(1, "t"));
        let new = vec![labeled(0, &[1.0, 0.5], 1)];
        let unl = vec![sample(1, &[0.2, 0.1]); 5];
        let batch = StepBatch {
            new: &new,
            replay_lab: &[],
            replay_unlab: &[],
            unlabeled: &unl,
        };
        let h = Hyperparams::default();
        let off = total_loss(&m, batch, None, &h).unwrap();
        assert_eq!(off.unsup_forwards, 0);
        assert_eq!(off.loss.total, off.loss.l_s + off.loss.l_m);
        let on = total_loss(&m, batch, Some(1.0), &h).unwrap();
        assert_eq!(on.unsup_forwards, 5);
        assert_eq!(on.loss.total, on.loss.l_s + on.loss.l_m + on.loss.l_u);
    }

    #[test]
    fn sgd_no_ops_and_errors() {
        let mut m = Model::init(Dims::new(2, 3, 2), &mut substream(2, "t"));
        let before = m.clone();
        let zero = Gradients::zeros(m.dims());
        sgd_step(&mut m, &zero, 0.5).unwrap();
        assert_eq!(m, before);
        let mut g = Gradients::zeros(m.dims());
        g.values_mut().iter_mut().for_each(|v| *v = 1.0);
        sgd_step(&mut m, &g, 0.0).unwrap();
        assert_eq!(m, before);

        g.values_mut()[0] = f64::NAN;
        assert!(matches!(sgd_step(&mut m, &g, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(m, before);
        let wrong = Gradients::zeros(Dims::new(3, 3, 2));
        assert!(matches!(sgd_step(&mut m, &wrong, 0.1), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_single_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let m = Model::init(Dims::new(4, 8, 3), &mut substream(3, "t"));
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.dims(), m.dims());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, f64::from(*b as f32));
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 2 + 12 + 4 * m.dims().param_count());

        std::fs::write(&path, b"NOTAMODELFILE...........").unwrap();
        assert!(matches!(Model::load(&path), Err(Error::Format { .. })));
    }

    /// Forward pass spelled out from the documented parameter layout.
    fn scalar_forward(m: &Model, x: &[f32]) -> Vec<f64> {
        let Dims { input, hidden, classes } = m.dims();
        let p = m.params();
        let (w1, b1) = (0, hidden * input);
        let (w2, b2) = (b1 + hidden, b1 + hidden + classes * hidden);
        let h: Vec<f64> = (0..hidden)
            .map(|j| {
                let z: f64 = (0..input).map(|i| p[w1 + j * input + i] * f64::from(x[i])).sum();
                (z + p[b1 + j]).tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..classes)
            .map(|c| (0..hidden).map(|j| p[w2 + c * hidden + j] * h[j]).sum::<f64>() + p[b2 + c])
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    fn random_sample(rng: &mut Rng, id: u64, d: usize) -> Sample {
        Sample::new(id, (0..d).map(|_| rng.random_range(-2.0f32..2.0)).collect())
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = substream(4, "t");
        let m = Model::init(Dims::new(5, 7, 4), &mut rng);
        for id in 0..20 {
            let s = random_sample(&mut rng, id, 5);
            let got = m.forward(&s.features).unwrap();
            let want = scalar_forward(&m, &s.features);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_mean_matches_per_sample_recomputation() {
        let mut rng = substream(5, "t");
        let mut m = Model::init(Dims::new(3, 6, 3), &mut rng);
        m.params_mut().iter_mut().for_each(|p| *p *= 4.0);
        for round in 0..20 {
            let batch: Vec<Sample> = (0..16).map(|i| random_sample(&mut rng, round * 100 + i, 3)).collect();
            let tau = 0.8;
            let out = unsupervised_loss(&m, &batch, tau).unwrap();
            let losses: Vec<f64> = batch
                .iter()
                .filter_map(|s| {
                    let p = scalar_forward(&m, &s.features);
                    let top = p.iter().cloned().fold(0.0, f64::max);
                    (top >= tau).then(|| -top.ln())
                })
                .collect();
            assert_eq!(out.confident, losses.len());
            let want = if losses.is_empty() {
                0.0
            } else {
                losses.iter().sum::<f64>() / losses.len() as f64
            };
            assert!((out.loss - want).abs() < 1e-12, "{} vs {want}", out.loss);
        }
    }

    #[test]
    fn total_is_sum_of_independent_terms() {
        let mut rng = substream(6, "t");
        let mut m = Model::init(Dims::new(3, 5, 3), &mut rng);
        m.params_mut().iter_mut().for_each(|p| *p *= 4.0);
        let lab = |rng: &mut Rng, id| LabeledSample::new(random_sample(rng, id, 3), (id % 3) as usize);
        let new: Vec<_> = (0..4).map(|i| lab(&mut rng, i)).collect();
        let replay: Vec<_> = (10..13).map(|i| lab(&mut rng, i)).collect();
        let pseudo: Vec<_> = (20..22)
            .map(|i| PseudoLabeledSample {
                sample: random_sample(&mut rng, i, 3),
                pseudo_label: 1,
                confidence: 0.99,
            })
            .collect();
        let unlabeled: Vec<_> = (30..40).map(|i| random_sample(&mut rng, i, 3)).collect();
        let h = Hyperparams {
            tau: 0.7,
            ..Default::default()
        };
        let batch = StepBatch {
            new: &new,
            replay_lab: &replay,
            replay_unlab: &pseudo,
            unlabeled: &unlabeled,
        };
        let out = total_loss(&m, batch, Some(0.6), &h).unwrap();
        let l_s = supervised_loss(&m, &new).unwrap().0;
        let l_m = memory_loss(&m, &replay, &pseudo, h.alpha, h.beta).unwrap().0;
        let l_u = unsupervised_loss(&m, &unlabeled, h.tau).unwrap().loss;
        assert!((out.loss.total - (l_s + l_m + 0.6 * l_u)).abs() < 1e-12);
        assert_eq!((out.loss.l_s, out.loss.l_m, out.loss.l_u), (l_s, l_m, l_u));
    }

    #[test]
    fn small_step_descends() {
        let mut rng = substream(7, "t");
        for round in 0..10 {
            let mut m = Model::init(Dims::new(4, 8, 3), &mut rng);
            let batch: Vec<_> = (0..8)
                .map(|i| LabeledSample::new(random_sample(&mut rng, round * 10 + i, 4), (i % 3) as usize))
                .collect();
            let (before, g) = supervised_loss(&m, &batch).unwrap();
            sgd_step(&mut m, &g, 1e-3).unwrap();
            let (after, _) = supervised_loss(&m, &batch).unwrap();
            assert!(after < before, "round {round}: {before} -> {after}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn supervised_gradient_matches_finite_differences(seed in any::<u64>(), n in 1usize..6) {
                let mut rng = substream(seed, "fd");
                let m = Model::init(Dims::new(3, 4, 3), &mut rng);
                let batch: Vec<_> = (0..n as u64)
                    .map(|i| LabeledSample::new(random_sample(&mut rng, i, 3), rng.random_range(0..3)))
                    .collect();
                let (_, g) = supervised_loss(&m, &batch).unwrap();
                let step = 1e-5;
                let mut probe = m.clone();
                for k in 0..m.params().len() {
                    let orig = probe.params()[k];
                    probe.params_mut()[k] = orig + step;
                    let up = supervised_loss(&probe, &batch).unwrap().0;
                    probe.params_mut()[k] = orig - step;
                    let down = supervised_loss(&probe, &batch).unwrap().0;
                    probe.params_mut()[k] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let analytic = g.values()[k];
                    prop_assert!((numeric - analytic).abs() <= 1e-6 * (1.0 + analytic.abs()), "param {}: {} vs {}", k, analytic, numeric);
                }
            }
        }
    }
}
