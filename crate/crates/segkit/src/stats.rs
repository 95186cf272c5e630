//! Paired nonparametric significance testing for per-image metric
//! comparisons.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Outcome of a Wilcoxon signed-rank test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WilcoxonResult {
    /// min(W+, W−): the smaller of the signed rank sums.
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Number of pairs remaining after dropping zero differences.
    pub n: usize,
}

impl WilcoxonResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Average ranks of |d|, ascending, with tied values sharing their mean
/// rank. Returned in the order of `values`.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the mean of ranks i+1..=j+1.
        let shared = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = shared;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided p-value: the null distribution of W+ is enumerated by a
/// subset-sum count over doubled ranks (doubling makes half-integer
/// average ranks exact integers), equivalent to walking all 2^n sign
/// assignments.
fn exact_p(ranks: &[f64], w_min: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|&r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let w2 = (2.0 * w_min).round() as usize;
    let below: f64 = counts[..=w2.min(total)].iter().sum();
    let cdf = below / 2f64.powi(ranks.len() as i32);
    (2.0 * cdf).min(1.0)
}

/// Normal approximation with continuity correction and tie-corrected
/// variance, for n above the exact-enumeration limit.
fn approx_p(ranks: &[f64], w_min: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie correction: subtract (t^3 - t)/48 per group of t tied ranks.
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let sd = var.sqrt();
    // W = min(W+, W−) ≤ mean, so the continuity correction moves toward it.
    let z = (w_min - mean + 0.5) / sd;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * normal.cdf(z)).min(1.0)
}

/// Largest n for which the exact null distribution is enumerated.
pub const WILCOXON_EXACT_LIMIT: usize = 20;

/// Two-sided Wilcoxon signed-rank test on paired observations.
///
/// Zero differences are dropped (all-zero pairs are reported as
/// non-significant with p = 1.0); at least 5 nonzero differences are
/// required otherwise. Tied absolute differences share average ranks. The
/// null distribution is enumerated exactly up to n = 20 and approximated
/// by a tie- and continuity-corrected normal beyond that.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired test needs equal lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("non-finite difference in paired test".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { statistic: 0.0, p_value: 1.0, n: 0 });
    }
    if n < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 nonzero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let w_minus: f64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d < 0.0).map(|(r, _)| r).sum();
    let w_min = w_plus.min(w_minus);
    let p = if n <= WILCOXON_EXACT_LIMIT { exact_p(&ranks, w_min) } else { approx_p(&ranks, w_min) };
    Ok(WilcoxonResult { statistic: w_min, p_value: p, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_pairs_are_non_significant() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = wilcoxon_signed_rank(&a, &a).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.n, 0);
        assert!(!r.significant(0.05));
    }

    #[test]
    fn six_positive_differences_hand_case() {
        // All six differences positive: W = 0 and the exact two-sided
        // p-value is 2/2^6 = 0.03125 (verified against scipy.stats.wilcoxon).
        let a = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let b = [2.5, 0.8, 3.1, 1.4, 8.7, 2.2];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(r.n, 6);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 0.03125);
        assert!(r.significant(0.05));
    }

    #[test]
    fn exact_path_matches_reference_values() {
        // Frozen from scipy.stats.wilcoxon(d, alternative='two-sided',
        // mode='exact').
        let d10 = [1.2, -0.4, 2.1, 0.6, -1.7, 0.9, 3.3, -0.2, 1.1, 0.5];
        let zeros = [0.0; 10];
        let r = wilcoxon_signed_rank(&d10, &zeros).unwrap();
        assert_eq!(r.statistic, 11.0);
        assert!((r.p_value - 0.10546875).abs() < 1e-12, "p = {}", r.p_value);

        let d12 = [
            0.6047170797544313,
            -0.7399841062404955,
            1.0504511958064573,
            1.240564716391214,
            -1.6510351886538364,
            -1.002179506862318,
            0.42784040316728533,
            -0.01624259234358222,
            0.2831988424957112,
            -0.5530439275735801,
            1.1793979748628285,
            1.0777919354289482,
        ];
        let zeros = [0.0; 12];
        let r = wilcoxon_signed_rank(&d12, &zeros).unwrap();
        assert_eq!(r.statistic, 30.0);
        assert!((r.p_value - 0.5185546875).abs() < 1e-12, "p = {}", r.p_value);
    }

    #[test]
    fn normal_approximation_matches_reference_value() {
        // n=30 with heavy ties; frozen from scipy.stats.wilcoxon(d,
        // alternative='two-sided', mode='approx', correction=True).
        let d30 = [
            0.4, 0.7, 0.1, -0.5, -0.1, -0.6, 0.5, 1.7, -0.1, -0.2, 0.9, 0.8, 0.5, -0.5, 0.4, 1.1,
            -0.9, -0.1, -1.5, -0.9, -1.4, 0.2, -0.9, 0.7, 0.6, 0.2, -2.1, -0.1, 0.4, 0.5,
        ];
        let zeros = [0.0; 30];
        let r = wilcoxon_signed_rank(&d30, &zeros).unwrap();
        assert_eq!(r.statistic, 220.0);
        assert!((r.p_value - 0.8047437120954182).abs() < 1e-9, "p = {}", r.p_value);
    }

    #[test]
    fn exact_path_matches_brute_force_enumeration() {
        // Oracle: walk every sign assignment of the ranked |d| and count
        // how often min(W+, W−) is at most the observed statistic.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [5usize, 6, 8, 10, 12] {
            for _ in 0..3 {
                let d: Vec<f64> = (0..n)
                    .map(|_| {
                        // Coarse values force tied ranks regularly.
                        let v = rng.random_range(1..=5) as f64 * 0.5;
                        if rng.random_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect();
                let zeros = vec![0.0; n];
                let r = wilcoxon_signed_rank(&d, &zeros).unwrap();

                let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
                let ranks = average_ranks(&abs);
                let w_obs = r.statistic;
                // p = min(1, 2 * P(W+ ≤ w_obs)) under the symmetric null.
                let mut le = 0u64;
                for mask in 0u64..(1 << n) {
                    let w_plus: f64 = ranks
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| mask >> i & 1 == 1)
                        .map(|(_, r)| r)
                        .sum();
                    if w_plus <= w_obs + 1e-9 {
                        le += 1;
                    }
                }
                let p_oracle = (2.0 * le as f64 / (1u64 << n) as f64).min(1.0);
                assert!(
                    (r.p_value - p_oracle).abs() < 1e-12,
                    "n={n} d={d:?}: {} vs oracle {}",
                    r.p_value,
                    p_oracle
                );
            }
        }
    }

    #[test]
    fn too_few_nonzero_differences_is_an_error() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 1.0, 2.0, 3.0];
        assert!(wilcoxon_signed_rank(&a, &b).is_err());
        // Six pairs but only three nonzero differences.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 2.0, 3.0, 3.5, 4.5, 5.5];
        assert!(wilcoxon_signed_rank(&a, &b).is_err());
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        assert!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn test_is_symmetric_in_its_arguments() {
        let a = [3.2, 1.1, 4.5, 2.2, 5.9, 2.6, 7.4, 0.3];
        let b = [2.5, 1.8, 3.1, 2.4, 8.7, 2.2, 6.6, 0.9];
        let r1 = wilcoxon_signed_rank(&a, &b).unwrap();
        let r2 = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(r1.statistic, r2.statistic);
        assert_eq!(r1.p_value, r2.p_value);
    }
}
