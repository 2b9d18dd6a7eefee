//! The candidate pool: patch records, the labelled/unlabelled partition,
//! budget accounting and the running ground-truth pixel histogram of the
//! labelled set.

use rand::seq::index;
use rand::Rng;

use crate::error::{config, validation, Error, Result};
use crate::features::{ActionFeatures, BaldSummary, ClassPresence};
use crate::pool_io::PoolHeader;

/// One candidate patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub id: u64,
    pub bald: BaldSummary,
    /// Mean predictive entropy, present when the pool carries the entropy column.
    pub entropy_mean: Option<f64>,
    /// Classes the feature model predicts in the patch.
    pub presence: ClassPresence,
    /// Ground-truth pixels per class inside the patch.
    pub gt_pixel_counts: Vec<u32>,
}

impl PatchRecord {
    pub fn n_classes(&self) -> usize {
        self.gt_pixel_counts.len()
    }

    pub fn features(&self) -> ActionFeatures {
        crate::features::concat_features(&self.bald, &self.presence)
    }

    /// Writes the feature vector into `out` (length `3 + C`).
    pub fn write_features(&self, out: &mut [f64]) {
        out[0] = self.bald.max;
        out[1] = self.bald.min;
        out[2] = self.bald.mean;
        for (o, &b) in out[3..].iter_mut().zip(self.presence.bits()) {
            *o = if b { 1.0 } else { 0.0 };
        }
    }

    /// Whether the ground truth holds at least one pixel of `class`.
    pub fn contains(&self, class: usize) -> bool {
        self.gt_pixel_counts[class] > 0
    }
}

/// 1 if the patch holds at least one ground-truth pixel of `target`, else 0.
pub fn reward_categorical(patch: &PatchRecord, target: usize) -> Result<f64> {
    if target >= patch.n_classes() {
        return Err(validation(format!(
            "target class {target} out of range for {} classes",
            patch.n_classes()
        )));
    }
    Ok(if patch.contains(target) { 1.0 } else { 0.0 })
}

/// Cumulative ground-truth pixels per class over the labelled set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramState {
    counts: Vec<u64>,
}

impl HistogramState {
    pub fn zeros(classes: usize) -> Self {
        Self {
            counts: vec![0; classes],
        }
    }

    pub fn from_counts(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, gt: &[u32]) {
        for (h, &n) in self.counts.iter_mut().zip(gt) {
            *h += n as u64;
        }
    }
}

/// Shannon entropy (nats) of the normalized histogram.
pub fn histogram_entropy(h: &HistogramState) -> Result<f64> {
    let total = h.total();
    if total == 0 {
        return Err(validation("entropy of an empty histogram"));
    }
    let total = total as f64;
    let e = -h
        .counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(e.max(0.0))
}

/// Labelling budget, as fractions of the pool size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub initial_fraction: f64,
    pub total_fraction: f64,
    /// Overrides `initial_fraction` with an absolute patch count.
    pub initial_count: Option<usize>,
}

impl Budget {
    pub fn new(initial_fraction: f64, total_fraction: f64) -> Self {
        Self {
            initial_fraction,
            total_fraction,
            initial_count: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |f: f64| f > 0.0 && f <= 1.0;
        if !in_range(self.total_fraction) {
            return Err(config(format!(
                "budget fraction {} outside (0, 1]",
                self.total_fraction
            )));
        }
        if self.initial_count.is_none() {
            if !in_range(self.initial_fraction) {
                return Err(config(format!(
                    "initial fraction {} outside (0, 1]",
                    self.initial_fraction
                )));
            }
            if self.initial_fraction > self.total_fraction {
                return Err(config("initial fraction exceeds the total budget"));
            }
        }
        Ok(())
    }

    /// `floor(fraction * n)`, guarded against representation error.
    fn count(fraction: f64, n: usize) -> usize {
        ((fraction * n as f64) + 1e-9).floor() as usize
    }

    pub fn initial_size(&self, n: usize) -> usize {
        self.initial_count
            .unwrap_or_else(|| Self::count(self.initial_fraction, n))
    }

    pub fn total_size(&self, n: usize) -> usize {
        Self::count(self.total_fraction, n)
    }
}

/// Partitioned dataset with budget accounting.
#[derive(Debug, Clone)]
pub struct Pool {
    records: Vec<PatchRecord>,
    n_classes: usize,
    patch_capacity: u32,
    has_entropy: bool,
    labelled: Vec<bool>,
    unlabelled: Vec<usize>,
    slot: Vec<usize>,
    initial: Vec<usize>,
    labelled_count: usize,
    cap: usize,
    histogram: HistogramState,
}

impl Pool {
    /// Validates records and moves a seeded uniform sample of `D_initial` to
    /// the labelled partition. Records must be sorted by strictly increasing id.
    pub fn init(
        header: &PoolHeader,
        records: Vec<PatchRecord>,
        budget: Budget,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        budget.validate()?;
        if records.is_empty() {
            return Err(validation("pool has no records"));
        }
        let c = header.n_classes as usize;
        for (i, r) in records.iter().enumerate() {
            if r.presence.len() != c || r.gt_pixel_counts.len() != c {
                return Err(validation(format!("record {} has wrong class count", r.id)));
            }
            if i > 0 && records[i - 1].id >= r.id {
                return Err(validation(format!("record ids not increasing at {}", r.id)));
            }
        }
        let n = records.len();
        let cap = budget.total_size(n);
        let n_init = budget.initial_size(n);
        if n_init > cap {
            return Err(config(format!(
                "initial set of {n_init} patches exceeds the budget of {cap}"
            )));
        }
        let mut pool = Pool {
            n_classes: c,
            patch_capacity: header.patch_capacity,
            has_entropy: header.has_entropy(),
            labelled: vec![false; n],
            unlabelled: (0..n).collect(),
            slot: (0..n).collect(),
            initial: Vec::with_capacity(n_init),
            labelled_count: 0,
            cap,
            histogram: HistogramState::zeros(c),
            records,
        };
        let mut picked = index::sample(rng, n, n_init).into_vec();
        picked.sort_unstable();
        for idx in picked {
            pool.label(idx)?;
            pool.initial.push(idx);
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn patch_capacity(&self) -> u32 {
        self.patch_capacity
    }

    pub fn has_entropy(&self) -> bool {
        self.has_entropy
    }

    pub fn records(&self) -> &[PatchRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &PatchRecord {
        &self.records[idx]
    }

    /// Record index of a patch id.
    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.records.binary_search_by_key(&id, |r| r.id).ok()
    }

    pub fn is_labelled(&self, idx: usize) -> bool {
        self.labelled[idx]
    }

    /// Record indices of `D_initial`.
    pub fn initial(&self) -> &[usize] {
        &self.initial
    }

    /// Record indices still unlabelled (order is an implementation detail).
    pub fn unlabelled(&self) -> &[usize] {
        &self.unlabelled
    }

    pub fn labelled_count(&self) -> usize {
        self.labelled_count
    }

    /// Maximum number of labelled patches, `floor(total_fraction * N)`.
    pub fn budget_cap(&self) -> usize {
        self.cap
    }

    pub fn remaining_budget(&self) -> usize {
        self.cap - self.labelled_count
    }

    /// True once the budget is spent or nothing is left to label.
    pub fn is_exhausted(&self) -> bool {
        self.remaining_budget() == 0 || self.unlabelled.is_empty()
    }

    pub fn histogram(&self) -> &HistogramState {
        &self.histogram
    }

    /// Recomputes the labelled histogram by scanning every record.
    pub fn rescan_histogram(&self) -> HistogramState {
        let mut h = HistogramState::zeros(self.n_classes);
        for (r, _) in self.records.iter().zip(&self.labelled).filter(|(_, &l)| l) {
            h.add(&r.gt_pixel_counts);
        }
        h
    }

    /// Moves record `idx` to the labelled partition.
    pub fn label(&mut self, idx: usize) -> Result<()> {
        if idx >= self.records.len() {
            return Err(validation(format!("record index {idx} out of range")));
        }
        if self.labelled[idx] {
            return Err(Error::Invariant(format!(
                "patch {} is already labelled",
                self.records[idx].id
            )));
        }
        if self.labelled_count >= self.cap {
            return Err(Error::Invariant(format!(
                "labelling budget of {} patches exhausted",
                self.cap
            )));
        }
        let pos = self.slot[idx];
        self.unlabelled.swap_remove(pos);
        if pos < self.unlabelled.len() {
            self.slot[self.unlabelled[pos]] = pos;
        }
        self.slot[idx] = usize::MAX;
        self.labelled[idx] = true;
        self.labelled_count += 1;
        self.histogram.add(&self.records[idx].gt_pixel_counts);
        Ok(())
    }

    /// Labels a patch by id.
    pub fn label_id(&mut self, id: u64) -> Result<()> {
        let idx = self
            .index_of(id)
            .ok_or_else(|| validation(format!("unknown patch id {id}")))?;
        self.label(idx)
    }

    /// Uniform sample without replacement of `min(m, |unlabelled|)` record
    /// indices. An empty result means the pool is exhausted.
    pub fn sample_candidates(&self, m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
        if m == 0 {
            return Err(validation("candidate count must be at least 1"));
        }
        let take = m.min(self.unlabelled.len());
        Ok(index::sample(rng, self.unlabelled.len(), take)
            .into_iter()
            .map(|j| self.unlabelled[j])
            .collect())
    }
}
