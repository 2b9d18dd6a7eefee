//! Synthetic pools with controllable class imbalance, plus the
//! quantity–accuracy IoU model used for simulated rewards.
//!
//! Class `i` appears in a patch with base probability
//! `π_i = π_max · (i+1)^-ρ`. Co-occurrence rules then override individual
//! classes: a rule `(given, class, p)` redraws `class` with probability `p`
//! whenever `given` is present. Classes listed as exclusive clear every other
//! class before their rules apply, so their scenes contain only rule partners.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::Deserialize;

use crate::error::{config, validation, Result};
use crate::features::{BaldSummary, ClassPresence};
use crate::pool::{HistogramState, PatchRecord};
use crate::pool_io::PoolHeader;

/// Pixels in a 64 × 64 patch.
pub const PATCH_CAPACITY: u32 = 64 * 64;

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurrenceRule {
    pub given: usize,
    pub class: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_patches: usize,
    pub n_classes: usize,
    /// Prevalence decay exponent over class rank.
    pub imbalance: f64,
    /// Prevalence of class 0.
    pub max_prevalence: f64,
    pub rules: Vec<CooccurrenceRule>,
    pub exclusive: Vec<usize>,
    /// Probability that a predicted presence bit disagrees with ground truth.
    pub flip_prob: f64,
    /// Standard deviation of the noise on the mean BALD feature (nats).
    pub bald_noise: f64,
    pub with_entropy: bool,
    /// Pixel weight of a present class scales with `(π_i / π_max)^size_exponent`,
    /// so rare classes cover fewer pixels.
    pub size_exponent: f64,
    /// Share of patches that are all padding: no ground truth, high entropy.
    pub padding_fraction: f64,
    pub patch_capacity: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_patches: 100_000,
            n_classes: 16,
            imbalance: 1.0,
            max_prevalence: 0.6,
            rules: vec![CooccurrenceRule {
                given: 11,
                class: 0,
                prob: 0.9,
            }],
            exclusive: vec![11],
            flip_prob: 0.1,
            bald_noise: 0.05,
            with_entropy: true,
            size_exponent: 1.0,
            padding_fraction: 0.0,
            patch_capacity: PATCH_CAPACITY,
            seed: 0,
        }
    }
}

/// The class that the default configuration makes rare and scene-specific.
pub const DEFAULT_TARGET: usize = 11;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = self.n_classes;
        if self.n_patches == 0 {
            return Err(config("synth.n_patches must be at least 1"));
        }
        if c < 2 || c > u16::MAX as usize {
            return Err(config(format!("synth.n_classes {c} outside [2, 65535]")));
        }
        if !(self.imbalance >= 0.0) || !self.imbalance.is_finite() {
            return Err(config("synth.imbalance must be a finite value >= 0"));
        }
        if !(self.max_prevalence > 0.0 && self.max_prevalence <= 1.0) {
            return Err(config("synth.max_prevalence must be in (0, 1]"));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(config("synth.flip_prob must be in [0, 0.5)"));
        }
        if !(self.bald_noise >= 0.0) || !self.bald_noise.is_finite() {
            return Err(config("synth.bald_noise must be >= 0"));
        }
        if !(self.size_exponent >= 0.0) || !self.size_exponent.is_finite() {
            return Err(config("synth.size_exponent must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.padding_fraction) {
            return Err(config("synth.padding_fraction must be in [0, 1)"));
        }
        if (self.patch_capacity as usize) < c {
            return Err(config("synth.patch_capacity must be at least n_classes"));
        }
        for r in &self.rules {
            if r.given >= c || r.class >= c || r.given == r.class {
                return Err(config(format!(
                    "synth.rules entry ({}, {}) invalid for {c} classes",
                    r.given, r.class
                )));
            }
            if !(0.0..=1.0).contains(&r.prob) {
                return Err(config(format!(
                    "synth.rules probability {} outside [0, 1]",
                    r.prob
                )));
            }
        }
        if let Some(&e) = self.exclusive.iter().find(|&&e| e >= c) {
            return Err(config(format!("synth.exclusive class {e} out of range")));
        }
        Ok(())
    }

    /// Base presence probability of each class.
    pub fn prevalences(&self) -> Vec<f64> {
        (0..self.n_classes)
            .map(|i| self.max_prevalence * ((i + 1) as f64).powf(-self.imbalance))
            .collect()
    }

    pub fn header(&self) -> PoolHeader {
        PoolHeader::new(
            self.n_patches as u64,
            self.n_classes as u16,
            self.patch_capacity,
            self.with_entropy,
        )
    }
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    prevalence: Vec<f64>,
    size: Vec<f64>,
    rarity: Vec<f64>,
    max_rarity: f64,
    ln_c: f64,
    noise: Normal<f64>,
}

impl Generator<'_> {
    fn scene(&self, rng: &mut ChaCha8Rng) -> Vec<bool> {
        let c = self.cfg.n_classes;
        let mut present: Vec<bool> = self
            .prevalence
            .iter()
            .map(|&p| rng.random_bool(p))
            .collect();
        if let Some(&e) = self.cfg.exclusive.iter().find(|&&e| present[e]) {
            present.iter_mut().for_each(|b| *b = false);
            present[e] = true;
        }
        for r in &self.cfg.rules {
            // draw unconditionally so the stream does not depend on the scene
            let hit = rng.random_bool(r.prob);
            if present[r.given] {
                present[r.class] = hit;
            }
        }
        if !present.iter().any(|&b| b) {
            present[0] = true;
        }
        debug_assert_eq!(present.len(), c);
        present
    }

    fn pixels(&self, present: &[bool], rng: &mut ChaCha8Rng) -> Vec<u32> {
        let cap = self.cfg.patch_capacity;
        let weights: Vec<f64> = present
            .iter()
            .zip(&self.size)
            .map(|(&p, &s)| {
                if p {
                    s * rng.random_range(0.2..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let n_present = present.iter().filter(|&&p| p).count() as u32;
        // every present class gets one pixel, the rest is shared by weight
        let spare = cap - n_present;
        let mut counts: Vec<u32> = weights
            .iter()
            .zip(present)
            .map(|(&w, &p)| {
                if p {
                    1 + (spare as f64 * w / total).floor() as u32
                } else {
                    0
                }
            })
            .collect();
        let used: u32 = counts.iter().sum();
        let first = present.iter().position(|&p| p).expect("scene is non-empty");
        counts[first] += cap - used;
        counts
    }

    fn bald(&self, present: &[bool], rng: &mut ChaCha8Rng) -> BaldSummary {
        let rarity = present
            .iter()
            .zip(&self.rarity)
            .filter(|(&p, _)| p)
            .map(|(_, &r)| r)
            .fold(0.0, f64::max);
        let level = if self.max_rarity > 0.0 {
            rarity / self.max_rarity
        } else {
            0.0
        };
        let mean = (self.ln_c * (0.1 + 0.3 * level) + self.noise.sample(rng)).clamp(0.0, self.ln_c);
        let max = (mean * rng.random_range(1.2..2.0)).min(self.ln_c);
        let min = mean * rng.random_range(0.0..0.5);
        let mut v = [round_f32(min), round_f32(mean), round_f32(max)];
        v.sort_by(f64::total_cmp);
        BaldSummary {
            min: v[0],
            mean: v[1],
            max: v[2],
        }
    }

    fn record(&self, id: u64, rng: &mut ChaCha8Rng) -> PatchRecord {
        let c = self.cfg.n_classes;
        let padding = rng.random_bool(self.cfg.padding_fraction);
        let (gt, bald, bits, entropy) = if padding {
            let mut bits = vec![false; c];
            bits[0] = true;
            let bald = BaldSummary {
                min: 0.0,
                mean: round_f32(0.02 * self.ln_c),
                max: round_f32(0.05 * self.ln_c),
            };
            let entropy = round_f32(self.ln_c * rng.random_range(0.9..1.0));
            (vec![0; c], bald, bits, entropy)
        } else {
            let present = self.scene(rng);
            let gt = self.pixels(&present, rng);
            let bald = self.bald(&present, rng);
            let bits: Vec<bool> = present
                .iter()
                .map(|&p| p ^ rng.random_bool(self.cfg.flip_prob))
                .collect();
            let entropy =
                round_f32((bald.mean + self.ln_c * rng.random_range(0.1..0.4)).min(self.ln_c));
            (gt, bald, bits, entropy)
        };
        PatchRecord {
            id,
            bald,
            entropy_mean: self.cfg.with_entropy.then_some(entropy),
            presence: ClassPresence::new(bits),
            gt_pixel_counts: gt,
        }
    }
}

/// Generates the records of a synthetic pool; ids run from 0.
pub fn generate_records(cfg: &SynthConfig) -> Result<Vec<PatchRecord>> {
    cfg.validate()?;
    let prevalence = cfg.prevalences();
    let rarity: Vec<f64> = prevalence.iter().map(|p| -p.ln()).collect();
    let min_rarity = rarity.iter().cloned().fold(f64::INFINITY, f64::min);
    let rarity: Vec<f64> = rarity.iter().map(|r| r - min_rarity).collect();
    let max_rarity = rarity.iter().cloned().fold(0.0, f64::max);
    let gen = Generator {
        cfg,
        ln_c: (cfg.n_classes as f64).ln(),
        noise: Normal::new(0.0, cfg.bald_noise)
            .map_err(|e| config(format!("synth.bald_noise: {e}")))?,
        size: prevalence
            .iter()
            .map(|p| (p / cfg.max_prevalence).powf(cfg.size_exponent))
            .collect(),
        prevalence,
        rarity,
        max_rarity,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.n_patches as u64)
        .map(|id| gen.record(id, &mut rng))
        .collect())
}

/// Class-scaling model `IoU_i ≈ K_i · log10(h_i / h_min)`, zero below `h_min`.
#[derive(Debug, Clone, PartialEq)]
pub struct IouModel {
    pub k: Vec<f64>,
    pub h_min: f64,
    pub saturation: Option<f64>,
}

impl IouModel {
    pub const DEFAULT_H_MIN: f64 = 1e4;
    pub const K_MAX: f64 = 0.25;

    /// Slopes drawn uniformly in `[0, 0.25]`.
    pub fn random(classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            k: (0..classes)
                .map(|_| rng.random_range(0.0..=Self::K_MAX))
                .collect(),
            h_min: Self::DEFAULT_H_MIN,
            saturation: Some(1.0),
        }
    }

    pub fn equal(classes: usize, k: f64) -> Self {
        Self {
            k: vec![k; classes],
            h_min: Self::DEFAULT_H_MIN,
            saturation: None,
        }
    }

    pub fn classes(&self) -> usize {
        self.k.len()
    }

    pub fn class_iou(&self, class: usize, pixels: f64) -> f64 {
        if pixels <= 0.0 {
            return 0.0;
        }
        let v = self.k[class] * (pixels.log10() - self.h_min.log10()).max(0.0);
        match self.saturation {
            Some(s) => v.min(s),
            None => v,
        }
    }

    fn mean_over(&self, counts: impl Iterator<Item = f64>) -> f64 {
        counts
            .enumerate()
            .map(|(i, h)| self.class_iou(i, h))
            .sum::<f64>()
            / self.classes() as f64
    }

    pub fn simulated_mean_iou(&self, h: &HistogramState) -> Result<f64> {
        if h.counts().len() != self.classes() {
            return Err(validation("IoU model and histogram class counts differ"));
        }
        Ok(self.mean_over(h.counts().iter().map(|&v| v as f64)))
    }

    /// Change of the target's simulated class IoU between two histograms.
    pub fn delta_iou_reward(
        &self,
        before: &HistogramState,
        after: &HistogramState,
        target: usize,
    ) -> Result<f64> {
        if target >= self.classes() || before.counts().len() != self.classes() {
            return Err(validation(
                "target or histogram does not match the IoU model",
            ));
        }
        let (b, a) = (before.counts()[target], after.counts()[target]);
        if a < b {
            return Err(validation("histogram decreased between events"));
        }
        Ok(self.class_iou(target, a as f64) - self.class_iou(target, b as f64))
    }
}

/// Simulated mean-IoU curves of acquiring pixels in proportion to
/// `distribution` versus in equal shares per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ThoughtExperiment {
    pub random: Vec<f64>,
    pub uniform: Vec<f64>,
}

pub fn thought_experiment(
    model: &IouModel,
    distribution: &[f64],
    steps: usize,
    pixels_per_step: u64,
    seed: u64,
) -> Result<ThoughtExperiment> {
    let c = distribution.len();
    if c != model.classes() || c == 0 {
        return Err(validation("distribution and IoU model class counts differ"));
    }
    if distribution.iter().any(|&p| !(p >= 0.0)) {
        return Err(validation("distribution has negative entries"));
    }
    let total: f64 = distribution.iter().sum();
    if !(total > 0.0) {
        return Err(validation("distribution sums to zero"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h_random = vec![0.0; c];
    let mut h_uniform = vec![0.0; c];
    let share = pixels_per_step as f64 / c as f64;
    let mut out = ThoughtExperiment {
        random: Vec::with_capacity(steps),
        uniform: Vec::with_capacity(steps),
    };
    for _ in 0..steps {
        // multinomial draw as a chain of conditional binomials
        let mut left = pixels_per_step;
        let mut mass = 1.0;
        for (i, &p) in distribution.iter().enumerate() {
            let p = p / total;
            let n = if i + 1 == c || mass <= p {
                left
            } else {
                Binomial::new(left, (p / mass).clamp(0.0, 1.0))
                    .map_err(|e| validation(e.to_string()))?
                    .sample(&mut rng)
            };
            h_random[i] += n as f64;
            left -= n;
            mass -= p;
        }
        h_uniform.iter_mut().for_each(|h| *h += share);
        out.random.push(model.mean_over(h_random.iter().cloned()));
        out.uniform.push(model.mean_over(h_uniform.iter().cloned()));
    }
    Ok(out)
}

/// Normalized power-law distribution `∝ (i+1)^-ρ`.
pub fn power_law(classes: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..classes)
        .map(|i| ((i + 1) as f64).powf(-exponent))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}
