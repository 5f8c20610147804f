// SPDX-License-Identifier: MIT OR Apache-2.0

//! Resampling statistics: percentile bootstrap, trimmed effect sizes,
//! sign-flip permutation tests, Benjamini–Hochberg FDR, Pearson
//! correlation with Fisher-z intervals, and two-group shifts.

mod correlation;
mod effect;
mod fdr;
mod resample;
pub mod rng;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use correlation::pearson_r_ci;
pub use effect::{effect_sizes, EffectSizes};
pub use fdr::{bh_fdr, FdrOutcome};
pub use resample::{bootstrap_ci, group_shift, paired_permutation_p};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapStatistic {
    #[default]
    Mean,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationStatistic {
    /// Mean of the signed deltas.
    #[default]
    Mean,
    /// One-sample t statistic of the signed deltas.
    TStatistic,
}

/// Family over which BH correction runs in stress tables.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdrScope {
    /// All cells of one model.
    #[default]
    PerModel,
    /// Every cell of the table at once.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResamplingConfig {
    pub n_bootstrap: usize,
    pub n_permutations: usize,
    pub ci_level: f64,
    pub fdr_q: f64,
    pub trim_fraction: f64,
    pub seed: u64,
    pub permutation_statistic: PermutationStatistic,
    pub fdr_scope: FdrScope,
}

impl Default for ResamplingConfig {
    fn default() -> Self {
        Self {
            n_bootstrap: 2000,
            n_permutations: 10_000,
            ci_level: 0.95,
            fdr_q: 0.05,
            trim_fraction: 0.1,
            seed: 0,
            permutation_statistic: PermutationStatistic::Mean,
            fdr_scope: FdrScope::PerModel,
        }
    }
}

impl ResamplingConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bootstrap == 0 || self.n_permutations == 0 {
            return Err(Error::InvalidInput("resample counts must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::InvalidInput(format!("ci_level {} not in (0,1)", self.ci_level)));
        }
        if !(self.fdr_q > 0.0 && self.fdr_q < 1.0) {
            return Err(Error::InvalidInput(format!("fdr_q {} not in (0,1)", self.fdr_q)));
        }
        if !(0.0..=0.25).contains(&self.trim_fraction) {
            return Err(Error::InvalidInput(format!(
                "trim_fraction {} not in [0, 0.25]",
                self.trim_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub p_adjusted: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub effect_size_g: Option<f64>,
    pub effect_size_d: Option<f64>,
    pub method: String,
    pub exhaustive: bool,
}

impl TestResult {
    fn new(method: &str, statistic: f64, p_value: f64) -> Self {
        Self {
            statistic,
            p_value,
            p_adjusted: None,
            ci: None,
            effect_size_g: None,
            effect_size_d: None,
            method: method.to_string(),
            exhaustive: false,
        }
    }
}

/// Neumaier-compensated sum; independent of summation grouping to within
/// a couple of ulps.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample variance (n − 1 denominator).
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() as f64 - 1.0)
}

fn require_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} contains non-finite values")));
    }
    Ok(())
}
