//! Fast self-checks run by `misical verify`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::features::{BaldSummary, ClassPresence};
use crate::pool::PatchRecord;
use crate::pool_io::{read_pool, write_pool, PoolHeader, HEADER_LEN};
use crate::qnet::QNetwork;
use crate::replay::{NStepAccumulator, PrioritizedReplay, P_MIN};

/// Committed sample pool used when no fixture path is given.
pub const EMBEDDED_FIXTURE: &[u8] = include_bytes!("../fixtures/verify_pool.msal");

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> SuiteReport {
    let start = Instant::now();
    let (passed, detail) = f();
    SuiteReport {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

/// Empirical sampling frequencies of a frozen buffer after `draws` samples
/// taken in stratified batches of `batch`.
pub fn sampling_frequencies(
    priorities: &[f64],
    eta: f64,
    draws: usize,
    batch: usize,
    seed: u64,
) -> Vec<f64> {
    let mut buffer = PrioritizedReplay::new(priorities.len(), eta, P_MIN).expect("valid buffer");
    for (i, &p) in priorities.iter().enumerate() {
        buffer.push_with_priority(i, p);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts = vec![0usize; priorities.len()];
    for _ in 0..draws / batch {
        let s = buffer
            .sample(batch, 0.5, &mut rng)
            .expect("non-empty buffer");
        for leaf in s.leaves {
            counts[leaf] += 1;
        }
    }
    let total = (draws / batch * batch) as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// Largest relative deviation of empirical from analytic `P(i)`.
pub fn per_max_relative_error(entries: usize, eta: f64, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let priorities: Vec<f64> = (0..entries).map(|_| rng.random_range(0.1..1.0)).collect();
    let freq = sampling_frequencies(&priorities, eta, draws, 1_000, seed ^ 0x5eed);
    let masses: Vec<f64> = priorities.iter().map(|p| p.powf(eta)).collect();
    let total: f64 = masses.iter().sum();
    freq.iter()
        .zip(&masses)
        .map(|(f, m)| (f - m / total).abs() / (m / total))
        .fold(0.0, f64::max)
}

/// χ² goodness-of-fit p-value of `counts` against equal expected frequencies.
pub fn chi_square_uniform_p(counts: &[f64]) -> f64 {
    let n: f64 = counts.iter().sum();
    let expected = n / counts.len() as f64;
    let stat: f64 = counts
        .iter()
        .map(|c| (c - expected).powi(2) / expected)
        .sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive dof");
    1.0 - dist.cdf(stat)
}

pub fn per_suite(draws: usize) -> SuiteReport {
    timed("replay sampling", || {
        let rel = per_max_relative_error(64, 0.6, draws, 1);
        let uniform = sampling_frequencies(&[2.0; 100], 0.0, draws, 1, 2);
        let counts: Vec<f64> = uniform.iter().map(|f| f * draws as f64).collect();
        let p = chi_square_uniform_p(&counts);
        (
            rel < 0.02 && p > 0.01,
            format!("max relative error {rel:.4} (eta 0.6), uniformity p {p:.3} (eta 0)"),
        )
    })
}

/// Loss as a function of one parameter, for finite differences.
fn loss_at(net: &mut QNetwork, p: usize, value: f64, xs: &[f64], ys: &[f64], ws: &[f64]) -> f64 {
    let old = net.params()[p];
    net.params_mut()[p] = value;
    let loss = net.loss_and_gradient(xs, ys, ws).expect("finite loss").0;
    net.params_mut()[p] = old;
    loss
}

/// Max relative error between analytic and central-difference gradients
/// over `instances` random networks and batches, `per_instance` parameters
/// each. Parameters whose ±h perturbation changes a rectifier's state are
/// skipped, since the loss is not differentiable across that boundary.
pub fn gradient_check(instances: usize, per_instance: usize, seed: u64) -> (f64, usize) {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..instances {
        let d = rng.random_range(3..12);
        let dims = [d, rng.random_range(2..16), rng.random_range(2..16), 1];
        let mut net = QNetwork::zeros(&dims).expect("valid dims");
        for p in net.params_mut() {
            *p = rng.random_range(-1.0..1.0);
        }
        let n = rng.random_range(1..8);
        let xs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let (_, grad, _) = net.loss_and_gradient(&xs, &ys, &ws).expect("finite loss");
        let pattern = net.relu_pattern(&xs);
        for _ in 0..per_instance {
            let p = rng.random_range(0..net.n_params());
            let v = net.params()[p];
            let mut same = true;
            for shifted in [v + h, v - h] {
                net.params_mut()[p] = shifted;
                same &= net.relu_pattern(&xs) == pattern;
            }
            net.params_mut()[p] = v;
            if !same {
                continue;
            }
            let fd = (loss_at(&mut net, p, v + h, &xs, &ys, &ws)
                - loss_at(&mut net, p, v - h, &xs, &ys, &ws))
                / (2.0 * h);
            let rel = (grad[p] - fd).abs() / grad[p].abs().max(fd.abs()).max(1e-7);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn gradient_suite(instances: usize) -> SuiteReport {
    timed("gradient check", || {
        let (worst, checked) = gradient_check(instances, 20, 3);
        (
            worst < 1e-4 && checked > 0,
            format!("max relative error {worst:.2e} over {checked} parameters"),
        )
    })
}

/// Every window sum of a full reward sequence, computed directly.
pub fn nstep_brute_force(rewards: &[f64], n: usize, gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            (t..(t + n).min(rewards.len()))
                .map(|j| gamma.powi((j - t) as i32) * rewards[j])
                .sum()
        })
        .collect()
}

/// Max absolute difference between the accumulator and the brute-force sums.
pub fn nstep_max_error(length: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for gamma in [0.0, 0.1, 0.5, 0.99] {
        for n in [1, 3, 5] {
            let rewards: Vec<f64> = (0..length).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut acc = NStepAccumulator::new(n, gamma).expect("valid parameters");
            let mut got = vec![f64::NAN; length];
            for (t, &r) in rewards.iter().enumerate() {
                if let Some(out) = acc.push(r, t) {
                    got[out.payload] = out.reward_n;
                }
            }
            for out in acc.flush() {
                got[out.payload] = out.reward_n;
            }
            let expect = nstep_brute_force(&rewards, n, gamma);
            for (g, e) in got.iter().zip(&expect) {
                worst = worst.max(if g.is_nan() {
                    f64::INFINITY
                } else {
                    (g - e).abs()
                });
            }
        }
    }
    worst
}

pub fn nstep_suite() -> SuiteReport {
    timed("n-step oracle", || {
        let err = nstep_max_error(1_000, 4);
        (err <= 1e-12, format!("max absolute error {err:.2e}"))
    })
}

/// Largest excess of `‖θ_t − θ_l‖` after `k` soft updates over the decay law
/// `(1−β)^k ‖θ_t,0 − θ_l‖`, in units of the allowed error: a relative 1e-9
/// plus a floor of 64 ulps of `‖θ_l‖`, below which the distance is roundoff.
/// Values at most 1 satisfy the law; `ks` must be increasing.
pub fn soft_update_excess(beta: f64, ks: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local = QNetwork::new(&[6, 8, 1], &mut rng).expect("valid dims");
    let mut target = QNetwork::new(&[6, 8, 1], &mut rng).expect("valid dims");
    let dist = |t: &QNetwork| {
        t.params()
            .iter()
            .zip(local.params())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    };
    let norm = local.params().iter().map(|v| v * v).sum::<f64>().sqrt();
    let floor = 64.0 * f64::EPSILON * norm;
    let d0 = dist(&target);
    let mut done = 0;
    let mut worst: f64 = 0.0;
    for &k in ks {
        for _ in done..k {
            target
                .soft_update_from(&local, beta)
                .expect("same topology");
        }
        done = k;
        let expect = (1.0 - beta).powi(k as i32) * d0;
        worst = worst.max((dist(&target) - expect).abs() / (1e-9 * expect + floor));
    }
    worst
}

pub fn soft_update_suite() -> SuiteReport {
    timed("soft update", || {
        let ks = [1, 10, 100, 1_000, 10_000];
        let worst = [0.002, 0.02, 0.2]
            .iter()
            .map(|&b| soft_update_excess(b, &ks, 5))
            .fold(0.0, f64::max);
        (
            worst <= 1.0,
            format!("worst deviation {worst:.3} of tolerance (beta up to 0.2, k up to 1e4)"),
        )
    })
}

/// A random valid pool.
pub fn random_pool(rng: &mut impl Rng, max_records: usize) -> (PoolHeader, Vec<PatchRecord>) {
    let c = rng.random_range(2..20usize);
    let cap = rng.random_range(c as u32..5_000);
    let entropy = rng.random_bool(0.5);
    let n = rng.random_range(0..=max_records);
    let mut id = 0u64;
    let records = (0..n)
        .map(|_| {
            id += rng.random_range(1..1_000);
            let mut v = [0.0f64; 3].map(|_| rng.random_range(0.0..2.0f32) as f64);
            v.sort_by(f64::total_cmp);
            let mut left = cap;
            let gt = (0..c)
                .map(|_| {
                    let g = rng.random_range(0..=left / 2);
                    left -= g;
                    g
                })
                .collect();
            PatchRecord {
                id,
                bald: BaldSummary {
                    min: v[0],
                    mean: v[1],
                    max: v[2],
                },
                entropy_mean: entropy.then(|| rng.random_range(0.0..3.0f32) as f64),
                presence: ClassPresence::new((0..c).map(|_| rng.random_bool(0.3)).collect()),
                gt_pixel_counts: gt,
            }
        })
        .collect::<Vec<_>>();
    (PoolHeader::new(n as u64, c as u16, cap, entropy), records)
}

/// Round-trip failures over `cases` pools, and the share of `trials` single
/// byte corruptions that the reader rejects.
pub fn format_fuzz(cases: usize, trials: usize, seed: u64) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    for _ in 0..cases {
        let (h, recs) = random_pool(&mut rng, 40);
        let mut bytes = Vec::new();
        write_pool(&h, &recs, &mut bytes).expect("valid pool");
        match read_pool(bytes.as_slice()) {
            Ok((h2, r2)) if h2 == h && r2 == recs => {}
            _ => failures += 1,
        }
    }
    let (h, recs) = loop {
        let (h, recs) = random_pool(&mut rng, 40);
        if recs.len() >= 10 {
            break (h, recs);
        }
    };
    let mut clean = Vec::new();
    write_pool(&h, &recs, &mut clean).expect("valid pool");
    let mut detected = 0;
    for _ in 0..trials {
        let mut bytes = clean.clone();
        let pos = rng.random_range(HEADER_LEN..bytes.len());
        bytes[pos] ^= rng.random_range(1..=255u8);
        if read_pool(bytes.as_slice()).is_err() {
            detected += 1;
        }
    }
    (failures, detected as f64 / trials as f64)
}

pub fn format_suite(fixture: &[u8], cases: usize, trials: usize) -> SuiteReport {
    timed("pool format", || {
        let fixture_ok = read_pool(fixture);
        let (failures, rate) = format_fuzz(cases, trials, 6);
        let mut detail = format!(
            "{failures} round-trip failures, {:.2}% corruptions detected",
            rate * 100.0
        );
        if let Err(e) = &fixture_ok {
            detail.push_str(&format!("; fixture rejected: {e}"));
        }
        (fixture_ok.is_ok() && failures == 0 && rate >= 0.99, detail)
    })
}

/// All suites at their full sizes.
pub fn run_all(fixture: &[u8]) -> Vec<SuiteReport> {
    vec![
        per_suite(1_000_000),
        gradient_suite(100),
        nstep_suite(),
        soft_update_suite(),
        format_suite(fixture, 1_000, 10_000),
    ]
}
