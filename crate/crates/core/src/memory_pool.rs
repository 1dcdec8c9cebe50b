//! The RAM tier of the replay pool.
//!
//! One fixed slot budget is shared by two regions: labeled samples managed
//! as a reservoir over every labeled sample ever offered, and pseudo-labeled
//! samples refilled from the disk pool between tasks. Labeled samples take
//! priority: while the labeled region is below capacity a new labeled
//! sample is always stored, evicting a random pseudo-labeled entry if the
//! pool is full.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{LabeledSample, PseudoLabeledSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InsertOutcome {
    /// Stored at this index of the labeled region.
    Stored(usize),
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryPool {
    capacity: usize,
    labeled: Vec<LabeledSample>,
    unlabeled: Vec<PseudoLabeledSample>,
    seen_labeled: u64,
}

impl MemoryPool {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory pool needs at least one slot");
        Self {
            capacity,
            labeled: Vec::with_capacity(capacity),
            unlabeled: Vec::new(),
            seen_labeled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn labeled(&self) -> &[LabeledSample] {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &[PseudoLabeledSample] {
        &self.unlabeled
    }

    pub fn seen_labeled(&self) -> u64 {
        self.seen_labeled
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Slots not taken by labeled samples; the most a refill may store.
    pub fn unlabeled_room(&self) -> usize {
        self.capacity - self.labeled.len()
    }

    /// Offers one labeled sample. Below capacity it is always stored; once
    /// the labeled region fills the pool, the `n`-th sample offered replaces
    /// a uniformly chosen labeled slot with probability `capacity / n`.
    pub fn insert_labeled(&mut self, sample: LabeledSample, rng: &mut Rng) -> InsertOutcome {
        self.seen_labeled += 1;
        if self.labeled.len() < self.capacity {
            if self.len() >= self.capacity {
                let victim = rng.random_range(0..self.unlabeled.len());
                self.unlabeled.swap_remove(victim);
            }
            self.labeled.push(sample);
            return InsertOutcome::Stored(self.labeled.len() - 1);
        }
        let j = rng.random_range(0..self.seen_labeled);
        if j < self.capacity as u64 {
            let slot = j as usize;
            self.labeled[slot] = sample;
            InsertOutcome::Stored(slot)
        } else {
            InsertOutcome::Discarded
        }
    }

    /// Replaces the whole pseudo-labeled region with `samples`.
    pub fn refill_unlabeled(&mut self, samples: Vec<PseudoLabeledSample>) -> Result<usize> {
        let available = self.unlabeled_room();
        if samples.len() > available {
            return Err(Error::Capacity {
                requested: samples.len(),
                available,
            });
        }
        self.unlabeled = samples;
        Ok(self.unlabeled.len())
    }

    /// Draws up to `k_lab` labeled and `k_unlab` pseudo-labeled samples,
    /// uniformly and without replacement within each region.
    pub fn sample_replay_batch(
        &self,
        k_lab: usize,
        k_unlab: usize,
        rng: &mut Rng,
    ) -> (Vec<LabeledSample>, Vec<PseudoLabeledSample>) {
        (
            draw(&self.labeled, k_lab, rng),
            draw(&self.unlabeled, k_unlab, rng),
        )
    }

    pub fn check_invariants(&self) -> Result<()> {
        if self.len() > self.capacity {
            return Err(Error::Capacity {
                requested: self.len(),
                available: self.capacity,
            });
        }
        debug_assert!(self.seen_labeled >= self.labeled.len() as u64);
        Ok(())
    }
}

fn draw<T: Clone>(items: &[T], k: usize, rng: &mut Rng) -> Vec<T> {
    let k = k.min(items.len());
    if k == 0 {
        return Vec::new();
    }
    index::sample(rng, items.len(), k)
        .into_iter()
        .map(|i| items[i].clone())
        .collect()
}
