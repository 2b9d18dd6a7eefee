//! Patch-level action features computed from Monte Carlo class-probability maps.
//!
//! A [`ProbMap`] holds `T` stochastic forward passes over the `K` pixels of one
//! patch, each pixel carrying a distribution over `C` classes. From it we derive
//! the pooled BALD summary (max, min, mean of the per-pixel mutual information)
//! and the predicted class-presence bits. Their concatenation is the feature
//! vector the Q-network scores.
//!
//! All entropies are in nats and `0 · ln 0` is taken as `0`.

use crate::error::{validation, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const NORM_TOLERANCE: f64 = 1e-5;

/// `T × K × C` probabilities from `T` Monte Carlo passes over `K` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    passes: usize,
    pixels: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ProbMap {
    /// Builds a map from a flat `[t][k][c]` buffer, validating every distribution.
    pub fn new(passes: usize, pixels: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if passes == 0 || pixels == 0 {
            return Err(validation("probability map needs T >= 1 and K >= 1"));
        }
        if classes < 2 {
            return Err(validation("probability map needs at least 2 classes"));
        }
        if data.len() != passes * pixels * classes {
            return Err(validation(format!(
                "probability map has {} values, expected {}x{}x{}",
                data.len(),
                passes,
                pixels,
                classes
            )));
        }
        for row in data.chunks_exact(classes) {
            check_distribution(row)?;
        }
        Ok(Self {
            passes,
            pixels,
            classes,
            data,
        })
    }

    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Raw `[t][k][c]` values.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Distribution of pixel `k` in pass `t`.
    pub fn probs(&self, t: usize, k: usize) -> &[f64] {
        let start = (t * self.pixels + k) * self.classes;
        &self.data[start..start + self.classes]
    }

    /// The `T` sampled distributions for pixel `k`.
    pub fn pixel_samples(&self, k: usize) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.passes).map(move |t| self.probs(t, k))
    }

    /// Mean over passes of the distribution at pixel `k`.
    pub fn mean_probs(&self, k: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.classes];
        for row in self.pixel_samples(k) {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        let inv = 1.0 / self.passes as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        mean
    }
}

/// Max, min and mean of the per-pixel BALD values of a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaldSummary {
    pub max: f64,
    pub min: f64,
    pub mean: f64,
}

impl BaldSummary {
    pub const ZERO: BaldSummary = BaldSummary {
        max: 0.0,
        min: 0.0,
        mean: 0.0,
    };

    /// True when `0 <= min <= mean <= max`.
    pub fn is_ordered(&self) -> bool {
        self.min >= 0.0 && self.min <= self.mean && self.mean <= self.max
    }
}

/// Predicted presence of each class in a patch.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassPresence(Vec<bool>);

impl ClassPresence {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn zeros(classes: usize) -> Self {
        Self(vec![false; classes])
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> bool {
        self.0[class]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

/// `(bald_max, bald_min, bald_mean, bit_0, .., bit_{C-1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionFeatures(Vec<f64>);

impl ActionFeatures {
    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bald(&self) -> &[f64] {
        &self.0[..3]
    }

    pub fn presence(&self) -> &[f64] {
        &self.0[3..]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let mut sum = 0.0;
    for &v in p {
        if !(v >= 0.0) || v > 1.0 + NORM_TOLERANCE {
            return Err(validation(format!("probability {v} outside [0, 1]")));
        }
        sum += v;
    }
    if (sum - 1.0).abs() > NORM_TOLERANCE {
        return Err(validation(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(())
}

// Caller has already validated `p`.
fn entropy_unchecked(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Shannon entropy `-Σ p ln p` of a probability vector, in nats.
pub fn shannon_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(validation("entropy of an empty distribution"));
    }
    check_distribution(p)?;
    Ok(entropy_unchecked(p).max(0.0))
}

/// Monte Carlo BALD for one pixel: entropy of the mean prediction minus the
/// mean entropy of the individual predictions. Clamped at zero.
pub fn mc_bald_pixel<R: AsRef<[f64]>>(samples: &[R]) -> Result<f64> {
    let first = samples
        .first()
        .ok_or_else(|| validation("MC-BALD needs at least one sample"))?;
    let classes = first.as_ref().len();
    bald_from_rows(
        samples.iter().map(|r| r.as_ref()),
        samples.len(),
        classes,
        true,
    )
}

fn bald_from_rows<'a>(
    rows: impl Iterator<Item = &'a [f64]>,
    passes: usize,
    classes: usize,
    validate: bool,
) -> Result<f64> {
    let mut mean = vec![0.0; classes];
    let mut mean_entropy = 0.0;
    for row in rows {
        if row.len() != classes {
            return Err(validation("MC samples disagree on the number of classes"));
        }
        if validate {
            check_distribution(row)?;
        }
        mean_entropy += entropy_unchecked(row);
        for (m, p) in mean.iter_mut().zip(row) {
            *m += p;
        }
    }
    let inv = 1.0 / passes as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let bald = entropy_unchecked(&mean) - mean_entropy * inv;
    Ok(bald.max(0.0))
}

/// Pools per-pixel BALD values of a patch into `(max, min, mean)`.
pub fn bald_summary(map: &ProbMap) -> Result<BaldSummary> {
    let mut max = f64::NEG_INFINITY;
    let mut min = f64::INFINITY;
    let mut sum = 0.0;
    for k in 0..map.pixels {
        // The map was validated on construction.
        let b = bald_from_rows(map.pixel_samples(k), map.passes, map.classes, false)?;
        max = max.max(b);
        min = min.min(b);
        sum += b;
    }
    let mean = (sum / map.pixels as f64).clamp(min, max);
    Ok(BaldSummary { max, min, mean })
}

/// Mean over pixels of the predictive entropy (entropy of the pass-averaged
/// distribution). Used as the optional entropy column of a pool.
pub fn mean_predictive_entropy(map: &ProbMap) -> f64 {
    let total: f64 = (0..map.pixels)
        .map(|k| entropy_unchecked(&map.mean_probs(k)))
        .sum();
    total / map.pixels as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Class `i` is present iff some pixel's pass-averaged argmax is `i`.
pub fn class_presence(map: &ProbMap) -> ClassPresence {
    let mut bits = vec![false; map.classes];
    for k in 0..map.pixels {
        bits[argmax(&map.mean_probs(k))] = true;
    }
    ClassPresence(bits)
}

/// Concatenates the BALD summary and presence bits into one feature vector.
pub fn concat_features(bald: &BaldSummary, presence: &ClassPresence) -> ActionFeatures {
    let mut values = Vec::with_capacity(3 + presence.len());
    values.extend([bald.max, bald.min, bald.mean]);
    values.extend(presence.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }));
    ActionFeatures(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut impl Rng, c: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    fn random_map(rng: &mut impl Rng, t: usize, k: usize, c: usize) -> ProbMap {
        let data = (0..t * k).flat_map(|_| random_dist(rng, c)).collect();
        ProbMap::new(t, k, c, data).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((shannon_entropy(&[0.5, 0.5]).unwrap() - 0.693147).abs() < 1e-6);
        assert_eq!(shannon_entropy(&[1.0, 0.0]).unwrap(), 0.0);
        assert!((shannon_entropy(&[0.75, 0.25]).unwrap() - 0.562335).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_bad_input() {
        assert!(shannon_entropy(&[0.5, 0.6]).is_err());
        assert!(shannon_entropy(&[1.2, -0.2]).is_err());
        assert!(shannon_entropy(&[]).is_err());
        assert!(shannon_entropy(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn bald_examples() {
        let same = vec![vec![0.3, 0.7]; 5];
        assert!(mc_bald_pixel(&same).unwrap().abs() < 1e-15);
        let split = [[1.0, 0.0], [0.0, 1.0]];
        assert!((mc_bald_pixel(&split).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let empty: [[f64; 2]; 0] = [];
        assert!(mc_bald_pixel(&empty).is_err());
    }

    #[test]
    fn bald_three_rows_matches_two_pass() {
        let rows = [[0.6, 0.4], [0.5, 0.5], [0.4, 0.6]];
        // two-pass: entropy of the mean, then mean of the entropies
        let mean = [0.5, 0.5];
        let h_mean = -(mean[0] * f64::ln(mean[0]) + mean[1] * f64::ln(mean[1]));
        let h = |a: f64, b: f64| -(a * a.ln() + b * b.ln());
        let mean_h = (h(0.6, 0.4) + h(0.5, 0.5) + h(0.4, 0.6)) / 3.0;
        let expected = h_mean - mean_h;
        assert!((mc_bald_pixel(&rows).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.013424).abs() < 1e-6);
    }

    #[test]
    fn summary_examples() {
        let data = vec![0.2, 0.8, 0.6, 0.4].repeat(3);
        let map = ProbMap::new(3, 2, 2, data).unwrap();
        assert_eq!(bald_summary(&map).unwrap(), BaldSummary::ZERO);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let single = random_map(&mut rng, 4, 1, 3);
        let s = bald_summary(&single).unwrap();
        assert_eq!(s.max, s.min);
        assert_eq!(s.min, s.mean);
    }

    #[test]
    fn summary_matches_materialized_reduce() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, k, c) = (6, 64, 5);
        let map = random_map(&mut rng, t, k, c);
        let values: Vec<f64> = (0..k)
            .map(|px| {
                let rows: Vec<Vec<f64>> = (0..t).map(|tt| map.probs(tt, px).to_vec()).collect();
                mc_bald_pixel(&rows).unwrap()
            })
            .collect();
        let s = bald_summary(&map).unwrap();
        let max = values.iter().cloned().fold(f64::MIN, f64::max);
        let min = values.iter().cloned().fold(f64::MAX, f64::min);
        let mean = values.iter().sum::<f64>() / k as f64;
        assert_eq!(s.max, max);
        assert_eq!(s.min, min);
        assert!((s.mean - mean).abs() < 1e-15);
        assert!(s.is_ordered());
    }

    #[test]
    fn presence_examples() {
        let map = ProbMap::new(1, 3, 3, vec![0.9, 0.05, 0.05].repeat(3)).unwrap();
        assert_eq!(class_presence(&map).bits(), &[true, false, false]);

        let cover = vec![0.8, 0.1, 0.1, 0.1, 0.8, 0.1, 0.1, 0.1, 0.8];
        let map = ProbMap::new(1, 3, 3, cover).unwrap();
        assert_eq!(class_presence(&map).count(), 3);

        // exact ties resolve toward the lowest index
        let tie = ProbMap::new(1, 1, 3, vec![0.0, 0.5, 0.5]).unwrap();
        assert_eq!(class_presence(&tie).bits(), &[false, true, false]);
    }

    #[test]
    fn presence_matches_histogram_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, k, c) = (4, 50, 6);
        let map = random_map(&mut rng, t, k, c);
        let mut hist = vec![0usize; c];
        for px in 0..k {
            let mut avg = vec![0.0; c];
            for tt in 0..t {
                for (a, p) in avg.iter_mut().zip(map.probs(tt, px)) {
                    *a += p / t as f64;
                }
            }
            let mut best = 0;
            for cc in 1..c {
                if avg[cc] > avg[best] {
                    best = cc;
                }
            }
            hist[best] += 1;
        }
        let expected: Vec<bool> = hist.iter().map(|&n| n > 0).collect();
        assert_eq!(class_presence(&map).bits(), expected.as_slice());
    }

    #[test]
    fn concat_examples() {
        let z = concat_features(&BaldSummary::ZERO, &ClassPresence::zeros(4));
        assert_eq!(z.as_slice(), &[0.0; 7]);
        let b = BaldSummary {
            max: 0.9,
            min: 0.1,
            mean: 0.4,
        };
        let c = ClassPresence::new(vec![true, false, false, true]);
        let f = concat_features(&b, &c);
        assert_eq!(f.as_slice(), &[0.9, 0.1, 0.4, 1.0, 0.0, 0.0, 1.0]);
        assert_eq!(f.bald(), &[0.9, 0.1, 0.4]);
        assert_eq!(f.presence(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn probmap_validation() {
        assert!(ProbMap::new(0, 1, 2, vec![]).is_err());
        assert!(ProbMap::new(1, 1, 1, vec![1.0]).is_err());
        assert!(ProbMap::new(1, 1, 2, vec![0.7, 0.7]).is_err());
        assert!(ProbMap::new(1, 2, 2, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn bald_nonnegative_and_bounded_by_entropy_of_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10_000 {
            let t = 1 + i % 7;
            let c = 2 + i % 5;
            let mut rows: Vec<Vec<f64>> = (0..t).map(|_| random_dist(&mut rng, c)).collect();
            if i % 3 == 0 {
                // sharpen some rows toward one-hot to reach the extremes
                for r in rows.iter_mut() {
                    let j = rng.random_range(0..c);
                    r.iter_mut().for_each(|v| *v = 0.0);
                    r[j] = 1.0;
                }
            }
            let bald = mc_bald_pixel(&rows).unwrap();
            let mut mean = vec![0.0; c];
            for r in &rows {
                for (m, p) in mean.iter_mut().zip(r) {
                    *m += p / t as f64;
                }
            }
            let s: f64 = mean.iter().sum();
            mean.iter_mut().for_each(|m| *m /= s);
            let h = shannon_entropy(&mean).unwrap();
            assert!(bald >= 0.0);
            assert!(bald <= h + 1e-12, "bald {bald} > H {h}");
            assert!(h <= (c as f64).ln() + 1e-12);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dist(c: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.001f64..1.0, c).prop_map(|raw| {
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
        }

        proptest! {
            #[test]
            fn entropy_permutation_invariant(p in dist(6), seed in any::<u64>()) {
                use rand::seq::SliceRandom;
                let mut q = p.clone();
                q.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let a = shannon_entropy(&p).unwrap();
                let b = shannon_entropy(&q).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn presence_invariant_under_pixel_duplication(
                pixels in prop::collection::vec(dist(4), 1..12),
                dup in 0usize..12,
            ) {
                let k = pixels.len();
                let map = ProbMap::new(1, k, 4, pixels.concat()).unwrap();
                let mut more = pixels.clone();
                more.push(pixels[dup % k].clone());
                let bigger = ProbMap::new(1, k + 1, 4, more.concat()).unwrap();
                prop_assert_eq!(class_presence(&map), class_presence(&bigger));
            }

            #[test]
            fn summary_invariant_under_pass_permutation(
                rows in prop::collection::vec(dist(3), 2 * 5),
                seed in any::<u64>(),
            ) {
                use rand::seq::SliceRandom;
                // T = 5 passes, K = 2 pixels; scramble the pass order of pixel 0
                let t = 5;
                let map = ProbMap::new(t, 2, 3, rows.concat()).unwrap();
                let mut order: Vec<usize> = (0..t).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let mut data = Vec::new();
                for tt in 0..t {
                    data.extend_from_slice(map.probs(order[tt], 0));
                    data.extend_from_slice(map.probs(tt, 1));
                }
                let scrambled = ProbMap::new(t, 2, 3, data).unwrap();
                let a = bald_summary(&map).unwrap();
                let b = bald_summary(&scrambled).unwrap();
                prop_assert!((a.max - b.max).abs() < 1e-12);
                prop_assert!((a.min - b.min).abs() < 1e-12);
                prop_assert!((a.mean - b.mean).abs() < 1e-12);
            }

            #[test]
            fn concat_round_trip(
                b in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
                bits in prop::collection::vec(any::<bool>(), 2..20),
            ) {
                let s = BaldSummary { max: b.0, min: b.1, mean: b.2 };
                let c = ClassPresence::new(bits.clone());
                let f = concat_features(&s, &c);
                prop_assert_eq!(f.len(), 3 + bits.len());
                prop_assert_eq!(f.bald(), &[b.0, b.1, b.2][..]);
                let back: Vec<bool> = f.presence().iter().map(|&v| v == 1.0).collect();
                prop_assert_eq!(back, bits);
            }
        }
    }
}
