//! Prioritized experience replay.
//!
//! Experiences live in a ring of fixed capacity. Each slot has a priority
//! `p_i = |δ_i| + p_min` and is drawn with probability `P(i) = p_i^η / Σ p_k^η`
//! through stratified descent of a [`SumTree`]. Importance-sampling weights
//! `(N · P(i))^-ζ` are normalized by the batch maximum.

mod nstep;
mod sum_tree;

use rand::Rng;

pub use nstep::{NStepAccumulator, NStepOutput};
pub use sum_tree::SumTree;

use crate::error::{config, validation, Result};

/// Default priority floor.
pub const P_MIN: f64 = 1e-3;

/// One stored transition. Actions are pool record indices; their feature
/// vectors are fixed and looked up when a batch is assembled.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub action: usize,
    pub reward_n: f64,
    /// Handle of the candidate set used for the bootstrap term, if any.
    pub next: Option<u64>,
    pub insertion_index: u64,
}

/// Result of [`PrioritizedReplay::sample`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub leaves: Vec<usize>,
    pub probabilities: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedReplay<T> {
    items: Vec<T>,
    tree: SumTree,
    capacity: usize,
    next_slot: usize,
    eta: f64,
    p_min: f64,
}

impl<T> PrioritizedReplay<T> {
    pub fn new(capacity: usize, eta: f64, p_min: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(config("replay capacity must be at least 1"));
        }
        if !(eta >= 0.0) || !eta.is_finite() {
            return Err(config(format!("priority exponent {eta} must be >= 0")));
        }
        if !(p_min > 0.0) {
            return Err(config("priority floor must be positive"));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            tree: SumTree::new(capacity),
            capacity,
            next_slot: 0,
            eta,
            p_min,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    pub fn get(&self, leaf: usize) -> &T {
        &self.items[leaf]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn priority(&self, leaf: usize) -> f64 {
        self.tree.priority(leaf)
    }

    fn mass(&self, priority: f64) -> f64 {
        priority.powf(self.eta)
    }

    /// Stores `item` at the maximum current priority (at least `p_min`),
    /// overwriting the oldest slot once full. Returns the slot and any
    /// evicted item.
    pub fn push(&mut self, item: T) -> (usize, Option<T>) {
        let priority = self.tree.max_priority().max(self.p_min);
        self.push_with_priority(item, priority)
    }

    pub fn push_with_priority(&mut self, item: T, priority: f64) -> (usize, Option<T>) {
        let slot = self.next_slot;
        let evicted = if slot < self.items.len() {
            Some(std::mem::replace(&mut self.items[slot], item))
        } else {
            self.items.push(item);
            None
        };
        let m = self.mass(priority);
        self.tree.set(slot, priority, m);
        self.next_slot = (slot + 1) % self.capacity;
        (slot, evicted)
    }

    /// Stratified proportional sample of `batch` slots (with replacement).
    pub fn sample(&self, batch: usize, zeta: f64, rng: &mut impl Rng) -> Result<Sampled> {
        if self.is_empty() {
            return Err(validation("cannot sample from an empty buffer"));
        }
        if batch == 0 {
            return Err(validation("batch size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&zeta) {
            return Err(config(format!("importance exponent {zeta} outside [0, 1]")));
        }
        let total = self.tree.total();
        let segment = total / batch as f64;
        let mut leaves = Vec::with_capacity(batch);
        let mut probabilities = Vec::with_capacity(batch);
        for i in 0..batch {
            let u = ((i as f64 + rng.random::<f64>()) * segment).min(total);
            let leaf = self.tree.find(u).min(self.items.len() - 1);
            leaves.push(leaf);
            probabilities.push(self.tree.mass(leaf) / total);
        }
        let weights = importance_weights(&probabilities, self.items.len(), zeta);
        Ok(Sampled {
            leaves,
            probabilities,
            weights,
        })
    }

    /// Sets each leaf's priority to `|td_error| + p_min`.
    pub fn update_priorities(&mut self, leaves: &[usize], td_errors: &[f64]) -> Result<()> {
        if leaves.len() != td_errors.len() {
            return Err(validation("leaf and TD-error counts differ"));
        }
        if let Some(&bad) = leaves.iter().find(|&&l| l >= self.items.len()) {
            return Err(validation(format!("invalid leaf id {bad}")));
        }
        for (&leaf, &err) in leaves.iter().zip(td_errors) {
            let p = err.abs() + self.p_min;
            if !p.is_finite() {
                return Err(validation(format!("non-finite TD error for leaf {leaf}")));
            }
            let m = self.mass(p);
            self.tree.set(leaf, p, m);
        }
        Ok(())
    }
}

/// `w_i = (N · P(i))^-ζ`, divided by the largest weight of the batch.
pub fn importance_weights(probabilities: &[f64], n: usize, zeta: f64) -> Vec<f64> {
    let raw: Vec<f64> = probabilities
        .iter()
        .map(|&p| (n as f64 * p).powf(-zeta))
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    raw.into_iter().map(|w| w / max).collect()
}

/// Linear annealing of the importance exponent toward 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZetaSchedule {
    pub start: f64,
    pub steps: u64,
}

pub fn anneal_zeta(step: u64, schedule: &ZetaSchedule) -> f64 {
    if schedule.steps == 0 || step >= schedule.steps {
        return 1.0;
    }
    let frac = step as f64 / schedule.steps as f64;
    (schedule.start + (1.0 - schedule.start) * frac).min(1.0)
}
