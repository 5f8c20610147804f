// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rule-based forensic labels.
//!
//! Three independent classifiers, all driven by a versioned threshold file:
//!
//! * smoothness regime from layer-2 smoothness `S`:
//!   Rough `S < 0.50`, Medium `0.50 ≤ S < 1.00`, Smooth `S ≥ 1.00`;
//! * processing strategy from an early-window English signature, as an
//!   ordered decision list;
//! * entropy diagnosis separating structured high connectivity from
//!   uniform ("panic") attention.
//!
//! Every classification returns its label together with the evidence and
//! the threshold version so a reviewer can re-derive it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FROZEN_VERSION: &str = "frozen-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SmoothnessRegime {
    Rough,
    Medium,
    Smooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeRule {
    pub rough_upper: f64,
    pub smooth_lower: f64,
}

impl Default for RegimeRule {
    fn default() -> Self {
        Self {
            rough_upper: 0.50,
            smooth_lower: 1.00,
        }
    }
}

/// Thresholds of the strategy decision list.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyThresholds {
    /// Specialized iff Δλ₂ ≤ this.
    pub specialized_delta_lambda2: f64,
    /// Fragmented requires baseline λ₂ below this …
    pub fragmented_baseline_lambda2: f64,
    /// … and ΔHFER below this.
    pub fragmented_delta_hfer: f64,
    /// Confident iff ΔEntropy ≤ this.
    pub confident_delta_entropy: f64,
}

impl Default for StrategyThresholds {
    fn default() -> Self {
        Self {
            specialized_delta_lambda2: -0.30,
            fragmented_baseline_lambda2: 0.30,
            fragmented_delta_hfer: -0.10,
            confident_delta_entropy: -0.10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyThresholds {
    pub lambda2_high: f64,
    pub entropy_high: f64,
}

impl Default for EntropyThresholds {
    fn default() -> Self {
        Self {
            lambda2_high: 0.70,
            entropy_high: 1.00,
        }
    }
}

/// The threshold file. Shipped values are [`ThresholdConfig::frozen`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub rough_upper: f64,
    pub smooth_lower: f64,
    pub strategy: StrategyThresholds,
    pub entropy: EntropyThresholds,
    pub version: String,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self::frozen()
    }
}

impl ThresholdConfig {
    pub fn frozen() -> Self {
        let rule = RegimeRule::default();
        Self {
            rough_upper: rule.rough_upper,
            smooth_lower: rule.smooth_lower,
            strategy: StrategyThresholds::default(),
            entropy: EntropyThresholds::default(),
            version: FROZEN_VERSION.to_string(),
        }
    }

    pub fn regime_rule(&self) -> RegimeRule {
        RegimeRule {
            rough_upper: self.rough_upper,
            smooth_lower: self.smooth_lower,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidInput(format!("threshold file {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rough_upper < self.smooth_lower) {
            return Err(Error::InvalidInput(format!(
                "rough_upper {} must be below smooth_lower {}",
                self.rough_upper, self.smooth_lower
            )));
        }
        Ok(())
    }
}

pub fn classify_smoothness(s: f64, rule: &RegimeRule) -> Result<SmoothnessRegime> {
    if !(s >= 0.0) {
        return Err(Error::InvalidInput(format!("smoothness {s} must be non-negative")));
    }
    Ok(if s < rule.rough_upper {
        SmoothnessRegime::Rough
    } else if s < rule.smooth_lower {
        SmoothnessRegime::Medium
    } else {
        SmoothnessRegime::Smooth
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Specialized,
    Fragmented,
    Uniform,
    Confident,
}

/// Early-window English values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySignature {
    pub lambda2_en_baseline: f64,
    pub delta_lambda2: f64,
    pub delta_hfer: f64,
    pub delta_entropy: f64,
}

pub fn classify_strategy(sig: &StrategySignature, t: &StrategyThresholds) -> Strategy {
    if sig.delta_lambda2 <= t.specialized_delta_lambda2 {
        Strategy::Specialized
    } else if sig.lambda2_en_baseline < t.fragmented_baseline_lambda2
        && sig.delta_hfer < t.fragmented_delta_hfer
    {
        Strategy::Fragmented
    } else if sig.delta_entropy <= t.confident_delta_entropy {
        Strategy::Confident
    } else {
        Strategy::Uniform
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyLabel {
    StructuredIntegration,
    PanicMode,
    Modular,
    /// Structured integration observed on the model's reference language.
    Native,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyDiagnosis {
    pub label: EntropyLabel,
    pub lambda2: f64,
    pub entropy: f64,
}

pub fn entropy_discriminator(lambda2: f64, entropy: f64, t: &EntropyThresholds) -> Result<EntropyDiagnosis> {
    if !(lambda2.is_finite() && entropy.is_finite() && lambda2 >= 0.0 && entropy >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "entropy discriminator needs finite non-negative inputs, got ({lambda2}, {entropy})"
        )));
    }
    let label = match (lambda2 >= t.lambda2_high, entropy >= t.entropy_high) {
        (false, _) => EntropyLabel::Modular,
        (true, false) => EntropyLabel::StructuredIntegration,
        (true, true) => EntropyLabel::PanicMode,
    };
    Ok(EntropyDiagnosis {
        label,
        lambda2,
        entropy,
    })
}

/// As [`entropy_discriminator`], but relabels structured integration on the
/// model's reference (native) language as [`EntropyLabel::Native`].
pub fn diagnose_language(
    lambda2: f64,
    entropy: f64,
    is_reference_language: bool,
    t: &EntropyThresholds,
) -> Result<EntropyDiagnosis> {
    let mut d = entropy_discriminator(lambda2, entropy, t)?;
    if is_reference_language && d.label == EntropyLabel::StructuredIntegration {
        d.label = EntropyLabel::Native;
    }
    Ok(d)
}

/// One smoothness value and the label it is expected to receive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeFixture {
    pub name: String,
    pub smoothness: f64,
    pub expected: SmoothnessRegime,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditEntry {
    pub name: String,
    pub smoothness: f64,
    pub nominal: SmoothnessRegime,
    /// Every label observed across the jitter grid.
    pub observed: Vec<SmoothnessRegime>,
    pub stable: bool,
}

/// Re-classifies each fixture with both thresholds jittered over
/// `{-jitter, 0, +jitter}` (independently) and reports label instability.
pub fn audit_thresholds(fixtures: &[RegimeFixture], rule: &RegimeRule, jitter: f64) -> Result<Vec<AuditEntry>> {
    let offsets = [-jitter, 0.0, jitter];
    fixtures
        .iter()
        .map(|f| {
            let nominal = classify_smoothness(f.smoothness, rule)?;
            let mut observed = vec![nominal];
            for dr in offsets {
                for ds in offsets {
                    let r = RegimeRule {
                        rough_upper: rule.rough_upper + dr,
                        smooth_lower: rule.smooth_lower + ds,
                    };
                    let label = classify_smoothness(f.smoothness, &r)?;
                    if !observed.contains(&label) {
                        observed.push(label);
                    }
                }
            }
            observed.sort();
            Ok(AuditEntry {
                name: f.name.clone(),
                smoothness: f.smoothness,
                nominal,
                stable: observed.len() == 1,
                observed,
            })
        })
        .collect()
}

/// Full forensic verdict with its evidence.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub threshold_version: String,
    pub smoothness: Option<f64>,
    pub regime: Option<SmoothnessRegime>,
    pub signature: Option<StrategySignature>,
    pub strategy: Option<Strategy>,
    pub entropy: Vec<LanguageDiagnosis>,
    /// Assumptions behind the evidence, stated for auditors.
    pub assumptions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageDiagnosis {
    pub language: String,
    pub diagnosis: EntropyDiagnosis,
}
