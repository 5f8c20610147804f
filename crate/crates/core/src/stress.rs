// SPDX-License-Identifier: MIT OR Apache-2.0

//! Paired stress deltas (stressed − canonical) per layer, early-window
//! summaries, and per-(language, construction) tables with statistics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::capture::{pair_samples, CaptureBundle, Construction, PairedSample};
use crate::error::{Error, Result};
use crate::graph::{per_layer_metrics, AnalysisConfig, LayerMetrics};
use crate::stats::rng::derive_seed;
use crate::stats::{
    bh_fdr, bootstrap_ci, compensated_sum, effect_sizes, paired_permutation_p, BootstrapStatistic,
    ResamplingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Fiedler,
    HferSignal,
    HferSpectral,
    Smoothness,
    SpectralEntropy,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Fiedler,
        Metric::HferSignal,
        Metric::HferSpectral,
        Metric::Smoothness,
        Metric::SpectralEntropy,
    ];

    pub fn value(self, m: &LayerMetrics) -> Option<f64> {
        match self {
            Metric::Fiedler => Some(m.fiedler),
            Metric::HferSignal => m.hfer_signal,
            Metric::HferSpectral => Some(m.hfer_spectral),
            Metric::Smoothness => m.smoothness,
            Metric::SpectralEntropy => Some(m.spectral_entropy),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Fiedler => "fiedler",
            Metric::HferSignal => "hfer_signal",
            Metric::HferSpectral => "hfer_spectral",
            Metric::Smoothness => "smoothness",
            Metric::SpectralEntropy => "spectral_entropy",
        }
    }

    /// Token used in `.dat` file names.
    pub fn file_token(self) -> &'static str {
        match self {
            Metric::Fiedler => "fiedlervalue",
            Metric::HferSignal => "hfer",
            Metric::HferSpectral => "hferspectral",
            Metric::Smoothness => "smoothness",
            Metric::SpectralEntropy => "entropy",
        }
    }

    /// Whether the metric needs hidden states.
    pub fn needs_hidden(self) -> bool {
        matches!(self, Metric::HferSignal | Metric::Smoothness)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s || (s == "entropy" && *m == Metric::SpectralEntropy))
            .ok_or_else(|| Error::InvalidInput(format!("unknown metric {s:?}")))
    }
}

/// Inclusive range of 1-based layer numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerWindow {
    pub first: usize,
    pub last: usize,
}

impl LayerWindow {
    pub fn new(first: usize, last: usize) -> Result<Self> {
        if first == 0 {
            return Err(Error::InvalidInput("layer windows are 1-based".into()));
        }
        if first > last {
            return Err(Error::InvalidInput(format!("empty layer window [{first},{last}]")));
        }
        Ok(Self { first, last })
    }

    pub fn check(&self, num_layers: usize) -> Result<()> {
        if self.last > num_layers {
            return Err(Error::InvalidInput(format!(
                "window [{},{}] exceeds {num_layers} layers",
                self.first, self.last
            )));
        }
        Ok(())
    }

    /// Shifts both ends; used for adjacent-window robustness checks.
    pub fn shifted(&self, offset: isize) -> Result<Self> {
        let first = self.first as isize + offset;
        let last = self.last as isize + offset;
        if first < 1 {
            return Err(Error::InvalidInput("shifted window starts before layer 1".into()));
        }
        Self::new(first as usize, last as usize)
    }

    /// Mean of `series[first-1 ..= last-1]`.
    pub fn mean_of(&self, series: &[f64]) -> Result<f64> {
        self.check(series.len())?;
        let slice = &series[self.first - 1..self.last];
        Ok(compensated_sum(slice.iter().copied()) / slice.len() as f64)
    }
}

impl Default for LayerWindow {
    fn default() -> Self {
        Self { first: 2, last: 5 }
    }
}

impl fmt::Display for LayerWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.first, self.last)
    }
}

impl FromStr for LayerWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidInput(format!("window {s:?} is not A:B")))?;
        let parse = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidInput(format!("bad layer number {t:?}")))
        };
        Self::new(parse(a)?, parse(b)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaProfile {
    pub pair_id: String,
    pub canonical_id: String,
    pub stressed_id: String,
    pub metric: Metric,
    /// `per_layer_delta[ℓ-1]` = stressed − canonical at layer ℓ.
    pub per_layer_delta: Vec<f64>,
    pub early_window: LayerWindow,
    pub early_window_mean: f64,
    /// Most negative per-layer delta and its 1-based layer.
    pub peak_delta: f64,
    pub peak_layer: usize,
}

fn metric_series(metrics: &[LayerMetrics], metric: Metric, id: &str) -> Result<Vec<f64>> {
    metrics
        .iter()
        .map(|m| {
            metric.value(m).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "sample {id:?} has no hidden states, so {metric} is unavailable"
                ))
            })
        })
        .collect()
}

/// Builds a profile from already computed per-layer metrics.
pub fn profile_from_metrics(
    pair: &PairedSample,
    canonical: &[LayerMetrics],
    stressed: &[LayerMetrics],
    metric: Metric,
    window: LayerWindow,
) -> Result<DeltaProfile> {
    if canonical.len() != stressed.len() {
        return Err(Error::ShapeMismatch {
            what: format!("layer count of pair {:?}", pair.pair_id),
            expected: canonical.len(),
            found: stressed.len(),
        });
    }
    let c = metric_series(canonical, metric, &pair.canonical)?;
    let s = metric_series(stressed, metric, &pair.stressed)?;
    let per_layer_delta: Vec<f64> = s.iter().zip(&c).map(|(s, c)| s - c).collect();
    let early_window_mean = window.mean_of(&per_layer_delta)?;
    let (peak_idx, peak_delta) = argmin(&per_layer_delta);
    Ok(DeltaProfile {
        pair_id: pair.pair_id.clone(),
        canonical_id: pair.canonical.clone(),
        stressed_id: pair.stressed.clone(),
        metric,
        per_layer_delta,
        early_window: window,
        early_window_mean,
        peak_delta,
        peak_layer: peak_idx + 1,
    })
}

/// Per-layer deltas of one pair; both members are analysed with `config`.
pub fn delta_profile(
    bundle: &CaptureBundle,
    pair: &PairedSample,
    metric: Metric,
    config: &AnalysisConfig,
    window: LayerWindow,
) -> Result<DeltaProfile> {
    let lookup = |id: &str| {
        bundle
            .sample(id)
            .ok_or_else(|| Error::InvalidInput(format!("sample {id:?} not in bundle")))
    };
    let canonical = per_layer_metrics(lookup(&pair.canonical)?, config)?;
    let stressed = per_layer_metrics(lookup(&pair.stressed)?, config)?;
    profile_from_metrics(pair, &canonical, &stressed, metric, window)
}

/// Recomputes the window mean of a profile for any window.
pub fn early_window_mean(profile: &DeltaProfile, window: LayerWindow) -> Result<f64> {
    window.mean_of(&profile.per_layer_delta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressCell {
    pub model_id: String,
    pub language: String,
    pub construction: Construction,
    pub n_pairs: usize,
    /// Unweighted mean over pairs of each pair's early-window mean.
    pub mean: f64,
    /// Absent with fewer than two pairs.
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub significant: bool,
    pub effect_size_g: Option<f64>,
    /// Mean delta per layer across pairs.
    pub mean_profile: Vec<f64>,
    /// Minimum of `mean_profile` and its 1-based layer.
    pub peak_delta: f64,
    pub peak_layer: usize,
    pub pair_ids: Vec<String>,
}

/// Lowest stressed-side metric value per (language, construction).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeverityRow {
    pub language: String,
    pub construction: Construction,
    pub min_value: f64,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StressTable {
    pub model_id: String,
    pub metric: Metric,
    pub window: LayerWindow,
    pub cells: Vec<StressCell>,
    pub severity: Vec<SeverityRow>,
    pub profiles: Vec<DeltaProfile>,
}

impl StressTable {
    /// Cells ordered from the most negative mean delta upwards.
    pub fn severity_order(&self) -> Vec<&StressCell> {
        let mut cells: Vec<&StressCell> = self.cells.iter().collect();
        cells.sort_by(|a, b| a.mean.total_cmp(&b.mean));
        cells
    }

    pub fn cell(&self, language: &str, construction: Construction) -> Option<&StressCell> {
        self.cells
            .iter()
            .find(|c| c.language == language && c.construction == construction)
    }

    /// Re-runs BH over this table's cells.
    pub fn correct(&mut self, q: f64) -> Result<()> {
        correct_cells(self.cells.iter_mut().collect(), q)
    }
}

fn correct_cells(mut cells: Vec<&mut StressCell>, q: f64) -> Result<()> {
    cells.retain(|c| c.p_value.is_some());
    let ps: Vec<f64> = cells.iter().filter_map(|c| c.p_value).collect();
    let outcome = bh_fdr(&ps, q)?;
    for ((cell, adj), rej) in cells.into_iter().zip(outcome.adjusted).zip(outcome.reject) {
        cell.p_adjusted = Some(adj);
        cell.significant = rej;
    }
    Ok(())
}

/// BH across every cell of several tables at once (the global FDR scope).
pub fn correct_globally(tables: &mut [StressTable], q: f64) -> Result<()> {
    correct_cells(tables.iter_mut().flat_map(|t| t.cells.iter_mut()).collect(), q)
}

fn column_means(rows: &[&[f64]]) -> Vec<f64> {
    let len = rows.first().map_or(0, |r| r.len());
    (0..len)
        .map(|l| compensated_sum(rows.iter().map(|r| r[l])) / rows.len() as f64)
        .collect()
}

fn argmin(values: &[f64]) -> (usize, f64) {
    values
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, v)| if v < acc.1 { (i, v) } else { acc })
}

/// Aggregates every pair of the bundle into (language, stressed construction)
/// cells. BH correction runs across the cells of this table.
pub fn stress_table(
    bundle: &CaptureBundle,
    metric: Metric,
    config: &AnalysisConfig,
    window: LayerWindow,
    resampling: &ResamplingConfig,
) -> Result<StressTable> {
    resampling.validate()?;
    window.check(bundle.manifest().num_layers)?;
    let pairing = pair_samples(bundle)?;

    let mut metrics: BTreeMap<&str, Vec<LayerMetrics>> = BTreeMap::new();
    for pair in &pairing.pairs {
        for id in [pair.canonical.as_str(), pair.stressed.as_str()] {
            if !metrics.contains_key(id) {
                let sample = bundle
                    .sample(id)
                    .ok_or_else(|| Error::InvalidInput(format!("sample {id:?} not in bundle")))?;
                metrics.insert(id, per_layer_metrics(sample, config)?);
            }
        }
    }

    type CellKey = (String, Construction);
    let mut groups: BTreeMap<CellKey, Vec<(DeltaProfile, f64, f64)>> = BTreeMap::new();
    let mut profiles = Vec::with_capacity(pairing.pairs.len());
    for pair in &pairing.pairs {
        let stressed = bundle.sample(&pair.stressed).expect("looked up above");
        let c = &metrics[pair.canonical.as_str()];
        let s = &metrics[pair.stressed.as_str()];
        let profile = profile_from_metrics(pair, c, s, metric, window)?;
        let c_win = window.mean_of(&metric_series(c, metric, &pair.canonical)?)?;
        let s_win = window.mean_of(&metric_series(s, metric, &pair.stressed)?)?;
        let key = (stressed.record.language.clone(), stressed.record.construction);
        groups
            .entry(key)
            .or_default()
            .push((profile.clone(), c_win, s_win));
        profiles.push(profile);
    }

    let model_id = bundle.model_id().to_string();
    let mut cells = Vec::with_capacity(groups.len());
    let mut severity = Vec::with_capacity(groups.len());
    for ((language, construction), members) in groups {
        let window_means: Vec<f64> = members.iter().map(|(p, _, _)| p.early_window_mean).collect();
        let n = window_means.len();
        let mean = compensated_sum(window_means.iter().copied()) / n as f64;

        let cell_cfg = resampling.with_seed(derive_seed(
            resampling.seed,
            &format!("{model_id}/{language}/{construction}/{metric}"),
        ));
        let (ci, p_value, effect_size_g) = if n >= 2 {
            let ci = bootstrap_ci(&window_means, BootstrapStatistic::Mean, &cell_cfg)?;
            let p = paired_permutation_p(&window_means, &cell_cfg)?.p_value;
            let canon: Vec<f64> = members.iter().map(|m| m.1).collect();
            let stress: Vec<f64> = members.iter().map(|m| m.2).collect();
            let g = effect_sizes(&stress, &canon, true, &cell_cfg).ok().map(|e| e.hedges_g);
            (Some(ci), Some(p), g)
        } else {
            (None, None, None)
        };

        let rows: Vec<&[f64]> = members.iter().map(|(p, _, _)| p.per_layer_delta.as_slice()).collect();
        let mean_profile = column_means(&rows);
        let (peak_idx, peak_delta) = argmin(&mean_profile);

        let stressed_rows: Vec<Vec<f64>> = members
            .iter()
            .map(|(p, _, _)| metric_series(&metrics[p.stressed_id.as_str()], metric, &p.stressed_id))
            .collect::<Result<_>>()?;
        let stressed_refs: Vec<&[f64]> = stressed_rows.iter().map(Vec::as_slice).collect();
        let (min_idx, min_value) = argmin(&column_means(&stressed_refs));
        severity.push(SeverityRow {
            language: language.clone(),
            construction,
            min_value,
            layer: min_idx + 1,
        });

        cells.push(StressCell {
            model_id: model_id.clone(),
            language,
            construction,
            n_pairs: n,
            mean,
            ci,
            p_value,
            p_adjusted: None,
            significant: false,
            effect_size_g,
            mean_profile,
            peak_delta,
            peak_layer: peak_idx + 1,
            pair_ids: members.iter().map(|(p, _, _)| p.pair_id.clone()).collect(),
        });
    }

    let mut table = StressTable {
        model_id,
        metric,
        window,
        cells,
        severity,
        profiles,
    };
    table.correct(resampling.fdr_q)?;
    Ok(table)
}
