//! Summary statistics and the Welch t-test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{validation, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n − 1 denominator); 0 for a single value.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch t-test for unequal variances.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(validation(
            "Welch t-test needs at least two samples per group",
        ));
    }
    let (ma, mb) = (mean(a), mean(b));
    let va = sample_std(a).powi(2) / a.len() as f64;
    let vb = sample_std(b).powi(2) / b.len() as f64;
    let se2 = va + vb;
    if se2 == 0.0 {
        // both groups constant: identical means are indistinguishable
        let same = ma == mb;
        return Ok(WelchResult {
            t: if same {
                0.0
            } else {
                f64::INFINITY.copysign(ma - mb)
            },
            df: f64::NAN,
            p_value: if same { 1.0 } else { 0.0 },
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| validation(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0);
    Ok(WelchResult { t, df, p_value })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptive_statistics() {
        let xs = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
        assert_eq!(mean(&xs), 5.0);
        assert!((sample_std(&xs) - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(median(&xs), 4.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(sample_std(&[1.0]), 0.0);
    }

    #[test]
    fn welch_textbook_statistic() {
        // means 10 and 12, unit sample standard deviation, n = 5 each
        let d = [-1.2, -0.56f64.sqrt(), 0.0, 0.56f64.sqrt(), 1.2];
        let a = d.map(|x| 10.0 + x);
        let b = d.map(|x| 12.0 + x);
        let s = sample_std(&a);
        assert!((s - 1.0).abs() < 1e-12);
        let r = welch_t_test(&a, &b).unwrap();
        let t_hand = (10.0 - 12.0) / (1.0f64 / 5.0 + 1.0 / 5.0).sqrt();
        assert!((r.t - t_hand).abs() < 1e-6);
        // equal variances and sizes: df = 2(n − 1)
        assert!((r.df - 8.0).abs() < 1e-9);
        // two-sided p for |t| = 3.1623 with 8 df
        assert!((r.p_value - 0.013_349_063).abs() < 1e-6, "{}", r.p_value);
    }

    #[test]
    fn identical_groups_are_not_significant() {
        let a = [1.0, 2.0, 3.0];
        assert!((welch_t_test(&a, &a).unwrap().p_value - 1.0).abs() < 1e-12);
        let c = [4.0, 4.0, 4.0];
        assert_eq!(welch_t_test(&c, &c).unwrap().p_value, 1.0);
        assert!(welch_t_test(&[1.0], &a).is_err());
    }
}
