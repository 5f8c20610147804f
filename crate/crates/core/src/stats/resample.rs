// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::Rng;

use super::rng::stream;
use super::{
    compensated_sum, effect_sizes, mean, require_finite, variance, BootstrapStatistic,
    PermutationStatistic, ResamplingConfig, TestResult,
};
use crate::error::{Error, Result};

/// Mean kept inside the sample range, which rounding alone could leave.
fn bounded_mean(values: impl Iterator<Item = f64> + Clone, len: usize) -> f64 {
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (compensated_sum(values) / len as f64).clamp(lo, hi)
}

fn resample_mean(values: &[f64], rng: &mut impl Rng) -> f64 {
    let n = values.len();
    let picks: Vec<f64> = (0..n).map(|_| values[rng.random_range(0..n)]).collect();
    bounded_mean(picks.iter().copied(), n)
}

/// Percentile interval of a sorted bootstrap distribution.
fn percentile_interval(mut stats: Vec<f64>, level: f64) -> (f64, f64) {
    stats.sort_by(f64::total_cmp);
    let b = stats.len();
    let tail = (1.0 - level) / 2.0;
    let lo = ((b as f64 * tail).floor() as usize).min(b - 1);
    let hi = ((b as f64 * (1.0 - tail)).ceil() as usize).clamp(1, b) - 1;
    (stats[lo], stats[hi])
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_ci(
    values: &[f64],
    stat: BootstrapStatistic,
    cfg: &ResamplingConfig,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    require_finite(values, "bootstrap input")?;
    let BootstrapStatistic::Mean = stat;
    match values {
        [] => Err(Error::InvalidInput("bootstrap needs at least one value".into())),
        [v] => {
            log::warn!("bootstrap of a single value: degenerate interval");
            Ok((*v, *v))
        }
        _ => {
            let mut rng = stream(cfg.seed, "bootstrap");
            let stats = (0..cfg.n_bootstrap)
                .map(|_| resample_mean(values, &mut rng))
                .collect();
            Ok(percentile_interval(stats, cfg.ci_level))
        }
    }
}

fn signed_statistic(deltas: &[f64], signs: impl Fn(usize) -> bool, kind: PermutationStatistic) -> f64 {
    let flipped: Vec<f64> = deltas
        .iter()
        .enumerate()
        .map(|(i, &d)| if signs(i) { -d } else { d })
        .collect();
    let m = mean(&flipped);
    match kind {
        PermutationStatistic::Mean => m,
        PermutationStatistic::TStatistic => {
            if flipped.len() < 2 {
                return m;
            }
            let sd = variance(&flipped).sqrt();
            if sd > 0.0 {
                m / (sd / (flipped.len() as f64).sqrt())
            } else if m == 0.0 {
                0.0
            } else {
                m.signum() * f64::INFINITY
            }
        }
    }
}

/// Two-sided sign-flip test on paired deltas.
///
/// All 2ⁿ sign patterns are enumerated when that is no more than
/// `n_permutations`; otherwise `n_permutations` random patterns are drawn
/// and the observed pattern is counted once more, so `p ≥ 1/(B+1)`.
pub fn paired_permutation_p(deltas: &[f64], cfg: &ResamplingConfig) -> Result<TestResult> {
    cfg.validate()?;
    require_finite(deltas, "permutation input")?;
    if deltas.is_empty() {
        return Err(Error::InvalidInput("permutation test needs at least one delta".into()));
    }
    let n = deltas.len();
    let kind = cfg.permutation_statistic;
    let observed = signed_statistic(deltas, |_| false, kind);
    let scale = observed.abs().max(mean(&deltas.iter().map(|d| d.abs()).collect::<Vec<_>>()));
    let threshold = observed.abs() - 1e-12 * scale;
    let extreme = |s: f64| s.abs() >= threshold;

    let exhaustive = n < 63 && (1u64 << n) <= cfg.n_permutations as u64;
    let (hits, total) = if exhaustive {
        let patterns = 1u64 << n;
        let hits = (0..patterns)
            .filter(|&mask| extreme(signed_statistic(deltas, |i| mask >> i & 1 == 1, kind)))
            .count();
        (hits, patterns as usize)
    } else {
        let mut rng = stream(cfg.seed, "permutation");
        let mut hits = 1; // the observed pattern
        for _ in 0..cfg.n_permutations {
            let flips: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            if extreme(signed_statistic(deltas, |i| flips[i], kind)) {
                hits += 1;
            }
        }
        (hits, cfg.n_permutations + 1)
    };
    let method = match kind {
        PermutationStatistic::Mean => "paired sign-flip permutation (mean)",
        PermutationStatistic::TStatistic => "paired sign-flip permutation (t)",
    };
    let mut result = TestResult::new(method, observed, hits as f64 / total as f64);
    result.exhaustive = exhaustive;
    Ok(result)
}

/// Difference of means `mean(a) − mean(b)`, with a bootstrap interval that
/// resamples each group independently and a label-permutation p-value.
pub fn group_shift(group_a: &[f64], group_b: &[f64], cfg: &ResamplingConfig) -> Result<TestResult> {
    cfg.validate()?;
    require_finite(group_a, "group a")?;
    require_finite(group_b, "group b")?;
    if group_a.is_empty() || group_b.is_empty() {
        return Err(Error::InvalidInput("group shift needs two non-empty groups".into()));
    }
    let observed = mean(group_a) - mean(group_b);

    let mut rng = stream(cfg.seed, "group-shift-bootstrap");
    let stats = (0..cfg.n_bootstrap)
        .map(|_| resample_mean(group_a, &mut rng) - resample_mean(group_b, &mut rng))
        .collect();
    let ci = percentile_interval(stats, cfg.ci_level);

    let mut pooled: Vec<f64> = group_a.iter().chain(group_b).copied().collect();
    let na = group_a.len();
    let threshold = observed.abs() * (1.0 - 1e-12);
    let mut rng = stream(cfg.seed, "group-shift-permutation");
    let mut hits = 1;
    for _ in 0..cfg.n_permutations {
        // Partial Fisher–Yates: the first `na` slots become group a.
        for i in 0..na {
            let j = rng.random_range(i..pooled.len());
            pooled.swap(i, j);
        }
        let shift = mean(&pooled[..na]) - mean(&pooled[na..]);
        if shift.abs() >= threshold {
            hits += 1;
        }
    }
    let mut result = TestResult::new(
        "difference of means (independent bootstrap, label permutation)",
        observed,
        hits as f64 / (cfg.n_permutations + 1) as f64,
    );
    result.ci = Some(ci);
    if let Ok(es) = effect_sizes(group_a, group_b, false, cfg) {
        result.effect_size_g = Some(es.hedges_g);
        result.effect_size_d = Some(es.cohens_d);
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ResamplingConfig {
        ResamplingConfig::default().with_seed(42)
    }

    #[test]
    fn constant_values_give_a_point_interval() {
        let (lo, hi) = bootstrap_ci(&[0.3; 7], BootstrapStatistic::Mean, &cfg()).unwrap();
        assert_eq!((lo, hi), (0.3, 0.3));
    }

    #[test]
    fn binary_values_interval() {
        let v = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (lo, hi) = bootstrap_ci(&v, BootstrapStatistic::Mean, &cfg()).unwrap();
        assert!((0.0..=0.5).contains(&lo) && (0.5..=1.0).contains(&hi), "{lo} {hi}");
    }

    #[test]
    fn single_value_is_degenerate() {
        assert_eq!(
            bootstrap_ci(&[2.5], BootstrapStatistic::Mean, &cfg()).unwrap(),
            (2.5, 2.5)
        );
        assert!(bootstrap_ci(&[], BootstrapStatistic::Mean, &cfg()).is_err());
    }

    #[test]
    fn all_zero_deltas() {
        let r = paired_permutation_p(&[0.0; 6], &cfg()).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.exhaustive);
    }

    #[test]
    fn five_ones_exhaustive() {
        let r = paired_permutation_p(&[1.0; 5], &cfg()).unwrap();
        assert!(r.exhaustive);
        assert_eq!(r.p_value, 2.0 / 32.0);
    }

    #[test]
    fn single_delta() {
        let r = paired_permutation_p(&[1.0], &cfg()).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn monte_carlo_floor() {
        let c = ResamplingConfig {
            n_permutations: 100,
            ..cfg()
        };
        let r = paired_permutation_p(&[1.0; 20], &c).unwrap();
        assert!(!r.exhaustive);
        assert!(r.p_value >= 1.0 / 101.0);
    }

    #[test]
    fn t_statistic_variant() {
        let c = ResamplingConfig {
            permutation_statistic: PermutationStatistic::TStatistic,
            ..cfg()
        };
        let r = paired_permutation_p(&[1.0, 2.0, 1.5, 0.5, 1.2, 0.9], &c).unwrap();
        assert!(r.exhaustive);
        // Only the all-positive / all-negative patterns match or exceed it.
        assert_eq!(r.p_value, 2.0 / 64.0);
    }

    #[test]
    fn identical_groups() {
        let a = [0.2, 0.5, 0.4, 0.9, 0.1];
        let r = group_shift(&a, &a, &cfg()).unwrap();
        assert_eq!(r.statistic, 0.0);
        let (lo, hi) = r.ci.unwrap();
        assert!(lo <= 0.0 && 0.0 <= hi);
    }

    #[test]
    fn shifted_group_is_exactly_minus_one() {
        let a = [0.25, 0.5, 0.75, 1.5, 2.0];
        let b: Vec<f64> = a.iter().map(|v| v + 1.0).collect();
        let r = group_shift(&a, &b, &cfg()).unwrap();
        assert_eq!(r.statistic, -1.0);
    }
}
