//! Reference acquisition rankers. Each returns positions into the candidate
//! slice it was given.

use rand::seq::index;
use rand::Rng;

use crate::error::{config, validation, Result};
use crate::pool::PatchRecord;

/// Uniform `k`-subset without replacement.
pub fn rank_random(n_candidates: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    index::sample(rng, n_candidates, k.min(n_candidates)).into_vec()
}

/// Top `k` by score, ties to the lower id.
pub fn rank_by_score(scores: &[f64], ids: &[u64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(ids[a].cmp(&ids[b])));
    order.truncate(k);
    order
}

fn ids(candidates: &[&PatchRecord]) -> Vec<u64> {
    candidates.iter().map(|r| r.id).collect()
}

/// Top `k` by mean patch BALD.
pub fn rank_bald(candidates: &[&PatchRecord], k: usize) -> Vec<usize> {
    let scores: Vec<f64> = candidates.iter().map(|r| r.bald.mean).collect();
    rank_by_score(&scores, &ids(candidates), k)
}

/// Top `k` by stored mean predictive entropy.
pub fn rank_entropy(candidates: &[&PatchRecord], k: usize) -> Result<Vec<usize>> {
    let scores = candidates
        .iter()
        .map(|r| {
            r.entropy_mean.ok_or_else(|| {
                config("entropy policy needs a pool with the entropy column (header flag bit 0)")
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(rank_by_score(&scores, &ids(candidates), k))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Farthest-first selection starting from known squared distances to the
/// nearest labelled point (`f64::INFINITY` when nothing is labelled).
/// `features` holds one row of `dim` values per candidate.
pub fn coreset_greedy_from(
    mut nearest_sq: Vec<f64>,
    features: &[f64],
    dim: usize,
    ids: &[u64],
    k: usize,
) -> Result<Vec<usize>> {
    let n = ids.len();
    if nearest_sq.len() != n || features.len() != n * dim {
        return Err(validation("coreset inputs have inconsistent lengths"));
    }
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k.min(n));
    for _ in 0..k.min(n) {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            best = match best {
                Some(b)
                    if nearest_sq[b] > nearest_sq[i]
                        || (nearest_sq[b] == nearest_sq[i] && ids[b] < ids[i]) =>
                {
                    Some(b)
                }
                _ => Some(i),
            };
        }
        let b = best.expect("an untaken candidate remains");
        taken[b] = true;
        out.push(b);
        let row = &features[b * dim..(b + 1) * dim];
        for i in (0..n).filter(|&i| !taken[i]) {
            let d = sq_dist(&features[i * dim..(i + 1) * dim], row);
            if d < nearest_sq[i] {
                nearest_sq[i] = d;
            }
        }
    }
    Ok(out)
}

/// k-center greedy against the labelled feature rows.
pub fn coreset_greedy(
    features: &[f64],
    dim: usize,
    ids: &[u64],
    labelled: &[f64],
    k: usize,
) -> Result<Vec<usize>> {
    if dim == 0 || !labelled.len().is_multiple_of(dim) {
        return Err(validation(
            "labelled features do not match the feature size",
        ));
    }
    let nearest = features
        .chunks_exact(dim)
        .map(|x| {
            labelled
                .chunks_exact(dim)
                .map(|l| sq_dist(x, l))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    coreset_greedy_from(nearest, features, dim, ids, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BaldSummary, ClassPresence};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: u64, mean: f64, entropy: Option<f64>) -> PatchRecord {
        PatchRecord {
            id,
            bald: BaldSummary {
                max: mean,
                min: mean,
                mean,
            },
            entropy_mean: entropy,
            presence: ClassPresence::zeros(2),
            gt_pixel_counts: vec![0, 0],
        }
    }

    #[test]
    fn random_takes_everything_when_k_is_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut all = rank_random(7, 7, &mut rng);
        all.sort();
        assert_eq!(all, (0..7).collect::<Vec<_>>());
        let a = rank_random(100, 5, &mut ChaCha8Rng::seed_from_u64(4));
        let b = rank_random(100, 5, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn random_frequencies_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hits = [0u32; 10];
        for _ in 0..100_000 {
            for i in rank_random(10, 3, &mut rng) {
                hits[i] += 1;
            }
        }
        for h in hits {
            assert!((h as f64 / 30_000.0 - 1.0).abs() < 0.02);
        }
    }

    #[test]
    fn bald_rank_and_ties() {
        let rs = [rec(5, 0.2, None), rec(1, 0.9, None), rec(3, 0.5, None)];
        let refs: Vec<_> = rs.iter().collect();
        assert_eq!(rank_bald(&refs, 2), vec![1, 2]);
        let eq = [rec(9, 0.1, None), rec(2, 0.1, None), rec(4, 0.1, None)];
        let refs: Vec<_> = eq.iter().collect();
        assert_eq!(rank_bald(&refs, 2), vec![1, 2]);
    }

    #[test]
    fn rankers_match_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rs: Vec<_> = (0..10_000u64)
            .map(|i| {
                let v = (rng.random_range(0..500) as f64) / 100.0;
                rec(i * 3 + 1, v, Some(v * 0.5))
            })
            .collect();
        let refs: Vec<_> = rs.iter().collect();
        let mut oracle: Vec<(f64, u64, usize)> = rs
            .iter()
            .enumerate()
            .map(|(i, r)| (r.bald.mean, r.id, i))
            .collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = oracle.iter().take(100).map(|t| t.2).collect();
        assert_eq!(rank_bald(&refs, 100), expect);
        assert_eq!(rank_entropy(&refs, 100).unwrap(), expect);
    }

    #[test]
    fn entropy_needs_the_column() {
        let rs = [rec(0, 0.1, None)];
        let refs: Vec<_> = rs.iter().collect();
        let err = rank_entropy(&refs, 1).unwrap_err();
        assert!(err.to_string().contains("entropy column"));
        let rs = [rec(0, 0.0, Some(0.0)), rec(1, 0.0, Some((2f64).ln()))];
        let refs: Vec<_> = rs.iter().collect();
        assert_eq!(rank_entropy(&refs, 1).unwrap(), vec![1]);
    }

    #[test]
    fn coreset_farthest_first() {
        let feats = [1.0, 2.0, 3.0];
        let ids = [0, 1, 2];
        assert_eq!(coreset_greedy(&feats, 1, &ids, &[0.0], 1).unwrap(), vec![2]);
        assert_eq!(
            coreset_greedy(&feats, 1, &ids, &[0.0], 3).unwrap(),
            vec![2, 0, 1]
        );
    }

    fn cover_radius(points: &[f64], centers: &[usize], labelled: &[f64]) -> f64 {
        points
            .iter()
            .map(|&p| {
                centers
                    .iter()
                    .map(|&c| (p - points[c]).abs())
                    .chain(labelled.iter().map(|&l| (p - l).abs()))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn greedy_is_within_twice_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let n = rng.random_range(4..=12);
            let k = rng.random_range(1..=3);
            let pts: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let ids: Vec<u64> = (0..n as u64).collect();
            let labelled = [rng.random_range(0.0..10.0)];
            let greedy = coreset_greedy(&pts, 1, &ids, &labelled, k).unwrap();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << n) {
                if mask.count_ones() as usize == k {
                    let centers: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
                    best = best.min(cover_radius(&pts, &centers, &labelled));
                }
            }
            assert!(cover_radius(&pts, &greedy, &labelled) <= 2.0 * best + 1e-12);
        }
    }
}
