//! Progressive weight of the unsupervised objective.
//!
//! Within each task the weight is zero for the first `v1` iterations, then
//! follows `eta * cos(pi * (v - v1) / (v2 - v1)) + xi` until `v2`, after
//! which it holds at `eta * cos(pi) + xi`. With the default `eta = -0.5`,
//! `xi = 0.5` this is a half-cosine ramp from 0 to 1.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::config::Hyperparams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveSchedule {
    pub v1: usize,
    pub v2: usize,
    pub eta: f64,
    pub xi: f64,
    pub total: usize,
}

impl ProgressiveSchedule {
    pub fn new(v1: usize, v2: usize, eta: f64, xi: f64, total: usize) -> Self {
        assert!(
            v1 <= v2 && v2 <= total,
            "schedule bounds must satisfy v1 <= v2 <= V (got {v1}, {v2}, {total})"
        );
        Self {
            v1,
            v2,
            eta,
            xi,
            total,
        }
    }

    pub fn from_hyperparams(h: &Hyperparams) -> Self {
        let (v1, v2) = h.schedule_bounds();
        Self::new(v1, v2, h.eta, h.xi, h.iters_per_task)
    }

    pub fn gamma(&self, v: usize) -> f64 {
        if v < self.v1 {
            0.0
        } else if v < self.v2 {
            let phase = (v - self.v1) as f64 / (self.v2 - self.v1) as f64;
            self.eta * (PI * phase).cos() + self.xi
        } else {
            self.saturated()
        }
    }

    pub fn saturated(&self) -> f64 {
        self.eta * PI.cos() + self.xi
    }

    /// Whether iteration `v` is past the onset. The unsupervised objective
    /// is computed exactly on these iterations (including `v1` itself,
    /// where the cosine branch evaluates to `eta + xi`).
    pub fn is_active(&self, v: usize) -> bool {
        v >= self.v1
    }

    /// Share of a task's iterations that compute the unsupervised
    /// objective, `(V - v1) / V`.
    pub fn unsupervised_fraction(&self) -> f64 {
        assert!(self.total > 0, "fraction of an empty schedule");
        (self.total - self.v1) as f64 / self.total as f64
    }
}
