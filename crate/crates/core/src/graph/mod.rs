// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token graphs built from multi-head attention, and their spectra.
//!
//! A layer's heads `A⁽ʰ⁾` are symmetrised and combined as
//! `W = Σ_h α_h · ½(A⁽ʰ⁾ + A⁽ʰ⁾ᵀ)`, where `α` is either proportional to
//! each head's total attention mass or uniform. The Laplacian of `W` then
//! drives every spectral diagnostic in [`metrics`].

mod laplacian;
mod metrics;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use laplacian::{build_laplacian, LaplacianSpectrum, LaplacianVariant, DEGENERATE_GAP};
pub use metrics::{
    baseline_metrics, high_frequency_start, per_layer_metrics, signal_metrics, spectrum_metrics,
    AnalysisConfig, BaselineMetrics, HiddenAlignment, LayerMetrics, SignalMetrics,
    SpectrumMetrics,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// α_h proportional to Σ_ij A⁽ʰ⁾_ij, normalised to sum to 1.
    #[default]
    MassWeighted,
    /// α_h = 1/H.
    Uniform,
}

/// Symmetric non-negative weight matrix for one layer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenGraph {
    #[serde(skip)]
    pub weights: DMatrix<f64>,
    /// One weight per head; ablated or massless heads carry 0.
    pub head_weights: Vec<f64>,
    /// 1-based layer number, 0 when unknown.
    pub layer: usize,
    pub aggregation: Aggregation,
}

impl TokenGraph {
    /// Wraps an explicit weight matrix (single pseudo-head), symmetrising it.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if n != weights.ncols() || n == 0 {
            return Err(Error::InvalidInput("weight matrix must be square and non-empty".into()));
        }
        let mut w = weights;
        for i in 0..n {
            for j in 0..i {
                let v = 0.5 * (w[(i, j)] + w[(j, i)]);
                w[(i, j)] = v;
                w[(j, i)] = v;
            }
        }
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput("weights must be finite and non-negative".into()));
        }
        Ok(Self {
            weights: w,
            head_weights: vec![1.0],
            layer: 0,
            aggregation: Aggregation::Uniform,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.weights.nrows()
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }
}

/// Aggregates all heads of one layer.
pub fn aggregate_heads(heads: &[DMatrix<f64>], mode: Aggregation) -> Result<TokenGraph> {
    aggregate_heads_excluding(heads, mode, &[])
}

/// Aggregates the heads of one layer with the zero-based heads in
/// `excluded` removed; survivors' weights are renormalised.
pub fn aggregate_heads_excluding(
    heads: &[DMatrix<f64>],
    mode: Aggregation,
    excluded: &[usize],
) -> Result<TokenGraph> {
    let h = heads.len();
    if h == 0 {
        return Err(Error::InvalidInput("layer has no attention heads".into()));
    }
    let n = heads[0].nrows();
    if heads.iter().any(|m| m.nrows() != n || m.ncols() != n) {
        return Err(Error::InvalidInput("all heads must be N×N with the same N".into()));
    }
    if let Some(&bad) = excluded.iter().find(|&&e| e >= h) {
        return Err(Error::InvalidInput(format!("head {bad} out of range for {h} heads")));
    }
    let alive: Vec<bool> = (0..h).map(|k| !excluded.contains(&k)).collect();
    if !alive.iter().any(|&a| a) {
        return Err(Error::InvalidInput("every head was excluded".into()));
    }

    let mut alpha = vec![0.0; h];
    match mode {
        Aggregation::Uniform => {
            let survivors = alive.iter().filter(|&&a| a).count() as f64;
            for (a, &live) in alpha.iter_mut().zip(&alive) {
                if live {
                    *a = 1.0 / survivors;
                }
            }
        }
        Aggregation::MassWeighted => {
            let masses: Vec<f64> = heads.iter().map(|m| m.sum()).collect();
            let mut total = 0.0;
            for (k, &m) in masses.iter().enumerate() {
                if !alive[k] {
                    continue;
                }
                if m > 0.0 {
                    total += m;
                } else {
                    log::warn!("head {k} has zero attention mass; excluded from aggregation");
                }
            }
            if !(total > 0.0) {
                return Err(Error::Degenerate(
                    "no surviving head carries attention mass".into(),
                ));
            }
            for k in 0..h {
                if alive[k] && masses[k] > 0.0 {
                    alpha[k] = masses[k] / total;
                }
            }
        }
    }

    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (m, &a) in heads.iter().zip(&alpha) {
                if a != 0.0 {
                    acc += a * (0.5 * (m[(i, j)] + m[(j, i)]));
                }
            }
            w[(i, j)] = acc;
            w[(j, i)] = acc;
        }
    }
    Ok(TokenGraph {
        weights: w,
        head_weights: alpha,
        layer: 0,
        aggregation: mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::uniform_heads;

    #[test]
    fn single_uniform_head() {
        let g = aggregate_heads(&uniform_heads(1, 4), Aggregation::MassWeighted).unwrap();
        assert_eq!(g.head_weights, vec![1.0]);
        assert!(g.weights.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn identical_heads_match_single_head() {
        let one = DMatrix::from_row_slice(3, 3, &[0.5, 0.3, 0.2, 0.1, 0.8, 0.1, 0.25, 0.25, 0.5]);
        let single = aggregate_heads(std::slice::from_ref(&one), Aggregation::Uniform).unwrap();
        for mode in [Aggregation::Uniform, Aggregation::MassWeighted] {
            let two = aggregate_heads(&[one.clone(), one.clone()], mode).unwrap();
            assert!((two.weights.clone() - &single.weights).abs().max() < 1e-15);
        }
    }

    #[test]
    fn mass_weights_hand_computed() {
        // Head A carries twice head B's mass.
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 2.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let g = aggregate_heads(&[a, b], Aggregation::MassWeighted).unwrap();
        assert!((g.head_weights[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.head_weights[1] - 1.0 / 3.0).abs() < 1e-15);
        // Hand arithmetic: symA = [[2,0,0],[0,0,2],[0,2,0]],
        // symB = [[0,.5,0],[.5,1,0],[0,0,1]].
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                4.0 / 3.0,
                1.0 / 6.0,
                0.0,
                1.0 / 6.0,
                1.0 / 3.0,
                4.0 / 3.0,
                0.0,
                4.0 / 3.0,
                1.0 / 3.0,
            ],
        );
        assert!((g.weights - expected).abs().max() < 1e-15);
    }

    #[test]
    fn zero_mass_head_is_dropped() {
        let heads = vec![DMatrix::zeros(3, 3), uniform_heads(1, 3).remove(0)];
        let g = aggregate_heads(&heads, Aggregation::MassWeighted).unwrap();
        assert_eq!(g.head_weights, vec![0.0, 1.0]);
    }

    #[test]
    fn no_heads_is_an_error() {
        assert!(aggregate_heads(&[], Aggregation::Uniform).is_err());
    }

    #[test]
    fn weights_are_exactly_symmetric() {
        let a = DMatrix::from_fn(5, 5, |i, j| ((i * 7 + j * 3) % 5) as f64 / 10.0 + 0.01);
        let b = DMatrix::from_fn(5, 5, |i, j| ((i * 2 + j * 5) % 7) as f64 / 13.0 + 0.02);
        let g = aggregate_heads(&[a, b], Aggregation::MassWeighted).unwrap();
        assert_eq!(g.weights, g.weights.transpose());
        let s: f64 = g.head_weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
