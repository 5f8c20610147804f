// SPDX-License-Identifier: MIT OR Apache-2.0

//! Report documents and their text projections.
//!
//! JSON is the canonical output. `.dat` files are two-column whitespace
//! tables (`layer value`) with `#` comment headers, ready for plotting
//! tools; CSV carries the stress tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::capture::{pair_samples, CaptureBundle, Construction, Role};
use crate::error::{Error, Result};
use crate::forensics::{
    classify_smoothness, classify_strategy, diagnose_language, LanguageDiagnosis, RegimeReport,
    StrategySignature, ThresholdConfig,
};
use crate::graph::{per_layer_metrics, AnalysisConfig, LayerMetrics};
use crate::intervention::{AblationCurve, HeadImportance};
use crate::stats::{mean, ResamplingConfig};
use crate::stress::{LayerWindow, Metric, StressTable};

/// Settings echoed into every report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfigEcho {
    pub bundle: String,
    pub analysis: AnalysisConfig,
    pub window: LayerWindow,
    pub metrics: Vec<Metric>,
    pub resampling: ResamplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportDocument {
    pub tool_version: String,
    pub threshold_version: String,
    pub model_id: String,
    pub config: ConfigEcho,
    /// Sample id → per-layer metrics.
    pub samples: BTreeMap<String, Vec<LayerMetrics>>,
    pub stress: Vec<StressTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regime: Option<RegimeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_importance: Option<HeadImportance>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationCurve>,
}

/// Per-layer metrics of every sample, keyed by sample id.
pub fn analyze_bundle(
    bundle: &CaptureBundle,
    config: &AnalysisConfig,
) -> Result<BTreeMap<String, Vec<LayerMetrics>>> {
    bundle
        .samples()
        .iter()
        .map(|s| Ok((s.record.id.clone(), per_layer_metrics(s, config)?)))
        .collect()
}

/// Which samples feed the forensic rules.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeSet {
    /// Language of the smoothness probe and the strategy signature.
    pub reference_language: String,
    /// Construction of the smoothness probe samples.
    pub construction: Construction,
    /// 1-based layer whose smoothness drives the regime rule.
    pub smoothness_layer: usize,
}

impl Default for ProbeSet {
    fn default() -> Self {
        Self {
            reference_language: "en".into(),
            construction: Construction::Active,
            smoothness_layer: 2,
        }
    }
}

fn window_value(
    samples: &BTreeMap<String, Vec<LayerMetrics>>,
    id: &str,
    window: LayerWindow,
    metric: Metric,
) -> Result<Option<f64>> {
    let layers = samples
        .get(id)
        .ok_or_else(|| Error::InvalidInput(format!("no metrics for sample {id:?}")))?;
    let series: Option<Vec<f64>> = layers.iter().map(|m| metric.value(m)).collect();
    series.map(|s| window.mean_of(&s)).transpose()
}

/// Regime, strategy and per-language entropy labels from a bundle's
/// metrics. Evidence that the bundle cannot supply is left empty and the
/// gap is listed under `assumptions`.
pub fn regime_report(
    bundle: &CaptureBundle,
    samples: &BTreeMap<String, Vec<LayerMetrics>>,
    window: LayerWindow,
    thresholds: &ThresholdConfig,
    probe: &ProbeSet,
) -> Result<RegimeReport> {
    thresholds.validate()?;
    window.check(bundle.manifest().num_layers)?;
    let lang = probe.reference_language.as_str();
    let mut assumptions = vec![
        format!(
            "smoothness is the layer-{} mean over canonical {lang} {} samples",
            probe.smoothness_layer, probe.construction
        ),
        format!("strategy signature uses {lang} pairs averaged over window {window}"),
        format!("entropy labels use every sample of a language averaged over window {window}"),
    ];

    let probes: Vec<f64> = bundle
        .samples()
        .iter()
        .filter(|s| {
            s.record.language == lang
                && s.record.construction == probe.construction
                && s.record.role == Role::Canonical
        })
        .filter_map(|s| {
            samples
                .get(&s.record.id)?
                .get(probe.smoothness_layer.checked_sub(1)?)?
                .smoothness
        })
        .collect();
    let smoothness = (!probes.is_empty()).then(|| mean(&probes));
    if smoothness.is_none() {
        assumptions.push("no probe sample carries hidden states at the smoothness layer; regime left open".into());
    }
    let regime = smoothness
        .map(|s| classify_smoothness(s, &thresholds.regime_rule()))
        .transpose()?;

    let pairing = pair_samples(bundle)?;
    let mut baseline = Vec::new();
    let mut deltas: [Vec<f64>; 3] = Default::default();
    let mut hfer_metric = Metric::HferSignal;
    for pair in &pairing.pairs {
        let Some(c) = bundle.sample(&pair.canonical) else { continue };
        if c.record.language != lang {
            continue;
        }
        if window_value(samples, &pair.canonical, window, Metric::HferSignal)?.is_none()
            || window_value(samples, &pair.stressed, window, Metric::HferSignal)?.is_none()
        {
            hfer_metric = Metric::HferSpectral;
        }
    }
    if hfer_metric == Metric::HferSpectral {
        assumptions.push("hidden states missing; ΔHFER uses the spectral variant".into());
    }
    let mut seen = Vec::new();
    for pair in &pairing.pairs {
        let Some(c) = bundle.sample(&pair.canonical) else { continue };
        if c.record.language != lang {
            continue;
        }
        if !seen.contains(&pair.canonical) {
            seen.push(pair.canonical.clone());
            baseline.push(window_value(samples, &pair.canonical, window, Metric::Fiedler)?.unwrap_or(f64::NAN));
        }
        for (slot, metric) in deltas
            .iter_mut()
            .zip([Metric::Fiedler, hfer_metric, Metric::SpectralEntropy])
        {
            let a = window_value(samples, &pair.canonical, window, metric)?;
            let b = window_value(samples, &pair.stressed, window, metric)?;
            if let (Some(a), Some(b)) = (a, b) {
                slot.push(b - a);
            }
        }
    }
    let signature = (!baseline.is_empty() && deltas.iter().all(|d| !d.is_empty())).then(|| StrategySignature {
        lambda2_en_baseline: mean(&baseline),
        delta_lambda2: mean(&deltas[0]),
        delta_hfer: mean(&deltas[1]),
        delta_entropy: mean(&deltas[2]),
    });
    if signature.is_none() {
        assumptions.push(format!("no {lang} pairs; strategy left open"));
    }
    let strategy = signature.map(|s| classify_strategy(&s, &thresholds.strategy));

    let mut per_language: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for s in bundle.samples() {
        let id = s.record.id.as_str();
        let l2 = window_value(samples, id, window, Metric::Fiedler)?.unwrap_or(f64::NAN);
        let h = window_value(samples, id, window, Metric::SpectralEntropy)?.unwrap_or(f64::NAN);
        let e = per_language.entry(s.record.language.as_str()).or_default();
        e.0.push(l2);
        e.1.push(h);
    }
    let entropy = per_language
        .into_iter()
        .map(|(language, (l2, h))| {
            Ok(LanguageDiagnosis {
                language: language.to_string(),
                diagnosis: diagnose_language(mean(&l2), mean(&h), language == lang, &thresholds.entropy)?,
            })
        })
        .collect::<Result<_>>()?;

    Ok(RegimeReport {
        threshold_version: thresholds.version.clone(),
        smoothness,
        regime,
        signature,
        strategy,
        entropy,
        assumptions,
    })
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("cannot serialise report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Six significant digits: fixed six decimals for zero and for
/// `|v| ≥ 0.1`, scientific notation below that.
pub fn format_dat_value(v: f64) -> String {
    if v == 0.0 || v.abs() >= 0.1 {
        format!("{v:.6}")
    } else {
        format!("{v:.5e}")
    }
}

/// Renders a 1-based layer series. `header` lines are prefixed with `# `.
pub fn render_dat(series: &[f64], header: &[String]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::InvalidInput("cannot emit an empty series".into()));
    }
    if let Some(bad) = series.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite value {bad} in series")));
    }
    let mut out = String::new();
    for line in header {
        let _ = writeln!(out, "# {line}");
    }
    out.push_str("# layer value\n");
    for (i, v) in series.iter().enumerate() {
        let _ = writeln!(out, "{} {}", i + 1, format_dat_value(*v));
    }
    Ok(out)
}

pub fn emit_dat(series: &[f64], header: &[String], path: impl AsRef<Path>) -> Result<()> {
    write_text(path, &render_dat(series, header)?)
}

/// Parses a `.dat` body back into `(layer, value)` rows.
pub fn parse_dat(text: &str) -> Result<Vec<(usize, f64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(no, line)| {
            let mut cols = line.split_whitespace();
            let bad = || Error::InvalidInput(format!("line {}: expected `layer value`", no + 1));
            let layer = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            let value = cols.next().and_then(|c| c.parse().ok()).ok_or_else(bad)?;
            if cols.next().is_some() {
                return Err(bad());
            }
            Ok((layer, value))
        })
        .collect()
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '-' })
        .collect::<String>()
        .to_lowercase()
}

/// `{model}_{lang}_diff_{metric}.dat`, with `_{construction}` after the
/// language when one is given.
pub fn dat_file_name(model: &str, language: &str, construction: Option<Construction>, metric: Metric) -> String {
    match construction {
        Some(c) => format!(
            "{}_{}_{}_diff_{}.dat",
            file_safe(model),
            file_safe(language),
            c.as_str(),
            metric.file_token()
        ),
        None => format!(
            "{}_{}_diff_{}.dat",
            file_safe(model),
            file_safe(language),
            metric.file_token()
        ),
    }
}

/// `{model}_{sample}_{metric}.dat` for a single sample's layer series.
pub fn sample_dat_file_name(model: &str, sample_id: &str, metric: Metric) -> String {
    format!("{}_{}_{}.dat", file_safe(model), file_safe(sample_id), metric.file_token())
}

/// One `.dat` per cell holding the cell's mean delta profile. The
/// construction is named in the file only when a language has several.
pub fn stress_dat_files(table: &StressTable) -> Result<Vec<(String, String)>> {
    let mut per_language: BTreeMap<&str, usize> = BTreeMap::new();
    for c in &table.cells {
        *per_language.entry(c.language.as_str()).or_default() += 1;
    }
    table
        .cells
        .iter()
        .map(|c| {
            let construction = (per_language[c.language.as_str()] > 1).then_some(c.construction);
            let name = dat_file_name(&table.model_id, &c.language, construction, table.metric);
            let header = vec![
                format!("model {}", table.model_id),
                format!("language {} construction {}", c.language, c.construction),
                format!("metric {} delta (stressed - canonical), {} pairs", table.metric, c.n_pairs),
                format!("window {} mean {}", table.window, format_dat_value(c.mean)),
            ];
            Ok((name, render_dat(&c.mean_profile, &header)?))
        })
        .collect()
}

#[derive(Serialize)]
struct CsvRow<'a> {
    model_id: &'a str,
    metric: &'a str,
    language: &'a str,
    construction: &'a str,
    window: String,
    n_pairs: usize,
    mean: f64,
    ci_lo: Option<f64>,
    ci_hi: Option<f64>,
    p_value: Option<f64>,
    p_adjusted: Option<f64>,
    significant: bool,
    effect_size_g: Option<f64>,
    peak_delta: f64,
    peak_layer: usize,
}

/// One CSV row per stress cell, with a header row.
pub fn stress_csv(tables: &[StressTable]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in tables {
        for c in &t.cells {
            w.serialize(CsvRow {
                model_id: &t.model_id,
                metric: t.metric.as_str(),
                language: &c.language,
                construction: c.construction.as_str(),
                window: t.window.to_string(),
                n_pairs: c.n_pairs,
                mean: c.mean,
                ci_lo: c.ci.map(|x| x.0),
                ci_hi: c.ci.map(|x| x.1),
                p_value: c.p_value,
                p_adjusted: c.p_adjusted,
                significant: c.significant,
                effect_size_g: c.effect_size_g,
                peak_delta: c.peak_delta,
                peak_layer: c.peak_layer,
            })
            .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Per-sample metric series as CSV (`sample,layer,<metric columns>`).
pub fn metrics_csv(samples: &BTreeMap<String, Vec<LayerMetrics>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["sample".to_string(), "layer".to_string()];
    header.extend(Metric::ALL.iter().map(|m| m.as_str().to_string()));
    w.write_record(&header)
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    for (id, layers) in samples {
        for m in layers {
            let mut row = vec![id.clone(), m.layer.to_string()];
            row.extend(
                Metric::ALL
                    .iter()
                    .map(|k| k.value(m).map_or_else(String::new, |v| v.to_string())),
            );
            w.write_record(&row)
                .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        }
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dat_body_layout() {
        let text = render_dat(&[0.0, -1.0], &[]).unwrap();
        assert_eq!(text, "# layer value\n1 0.000000\n2 -1.000000\n");
    }

    #[test]
    fn dat_rejects_empty_and_non_finite() {
        assert!(render_dat(&[], &[]).is_err());
        assert!(render_dat(&[f64::NAN], &[]).is_err());
    }

    #[test]
    fn small_values_keep_six_digits() {
        assert_eq!(format_dat_value(0.0123456789), "1.23457e-2");
        assert_eq!(format_dat_value(-0.62), "-0.620000");
        assert_eq!(format_dat_value(0.1), "0.100000");
    }

    #[test]
    fn parse_skips_comments_and_checks_columns() {
        let rows = parse_dat("# hi\n\n1 0.5\n2 -1.5e-3\n").unwrap();
        assert_eq!(rows, vec![(1, 0.5), (2, -1.5e-3)]);
        assert!(parse_dat("1 2 3\n").is_err());
        assert!(parse_dat("x 2\n").is_err());
    }

    #[test]
    fn file_names() {
        assert_eq!(dat_file_name("phi3", "en", None, Metric::Fiedler), "phi3_en_diff_fiedlervalue.dat");
        assert_eq!(
            dat_file_name("org/Model 7B", "ja", Some(Construction::Passive), Metric::HferSignal),
            "org-model-7b_ja_passive_diff_hfer.dat"
        );
    }
}
