// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::Serialize;

use super::{mean, require_finite, variance, ResamplingConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EffectSizes {
    /// Hedges' g on symmetrically trimmed samples.
    pub hedges_g: f64,
    /// Cohen's d on the full samples.
    pub cohens_d: f64,
    pub trim_fraction: f64,
}

fn trimmed(values: &[f64], fraction: f64) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut = (fraction * values.len() as f64).floor() as usize;
    sorted[cut..sorted.len() - cut].to_vec()
}

/// Standardised mean difference with the pooled SD; returns (d, df).
fn standardised_difference(a: &[f64], b: &[f64], paired: bool) -> Result<(f64, f64)> {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a), variance(b));
    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    if !(pooled > 0.0) {
        let which = match (va > 0.0, vb > 0.0) {
            (false, false) => "both samples are",
            (false, true) => "sample a is",
            _ => "sample b is",
        };
        return Err(Error::Degenerate(format!(
            "pooled standard deviation is zero: {which} constant"
        )));
    }
    let df = if paired { na - 1.0 } else { na + nb - 2.0 };
    Ok(((mean(a) - mean(b)) / pooled, df))
}

fn small_sample_correction(df: f64) -> f64 {
    1.0 - 3.0 / (4.0 * df - 1.0)
}

/// Cohen's d and trimmed Hedges' g for `a` relative to `b`.
///
/// Paired samples use the same pooled-SD standardiser with `n − 1` degrees
/// of freedom in the correction; independent samples use `na + nb − 2`.
pub fn effect_sizes(a: &[f64], b: &[f64], paired: bool, cfg: &ResamplingConfig) -> Result<EffectSizes> {
    cfg.validate()?;
    require_finite(a, "sample a")?;
    require_finite(b, "sample b")?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidInput("effect sizes need at least 2 values per sample".into()));
    }
    if paired && a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let (cohens_d, _) = standardised_difference(a, b, paired)?;

    let (ta, tb) = (trimmed(a, cfg.trim_fraction), trimmed(b, cfg.trim_fraction));
    if ta.len() < 2 || tb.len() < 2 {
        return Err(Error::InvalidInput("trimming leaves fewer than 2 values".into()));
    }
    let (d_trim, df) = standardised_difference(&ta, &tb, paired)?;
    Ok(EffectSizes {
        hedges_g: d_trim * small_sample_correction(df),
        cohens_d,
        trim_fraction: cfg.trim_fraction,
    })
}
