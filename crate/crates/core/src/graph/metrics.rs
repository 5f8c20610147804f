// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{aggregate_heads, build_laplacian, Aggregation, LaplacianSpectrum, LaplacianVariant, TokenGraph};
use crate::capture::CapturedSample;
use crate::error::{Error, Result};

/// Zero-based index of the first high-frequency mode: ascending modes with
/// 1-based index strictly greater than ⌈N/2⌉.
pub fn high_frequency_start(n: usize) -> usize {
    n.div_ceil(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectrumMetrics {
    pub fiedler: f64,
    /// Bits.
    pub spectral_entropy: f64,
    pub hfer_spectral: f64,
}

/// Fiedler value, spectral entropy and the eigenvalue-mass HFER.
pub fn spectrum_metrics(s: &LaplacianSpectrum) -> Result<SpectrumMetrics> {
    let n = s.num_tokens();
    if n < 2 {
        return Err(Error::InvalidInput("spectrum needs at least 2 eigenvalues".into()));
    }
    let total: f64 = s.eigenvalues.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate(
            "all-zero spectrum: entropy and HFER are undefined for an empty graph".into(),
        ));
    }
    let mut entropy = 0.0;
    for &l in &s.eigenvalues {
        let p = l / total;
        if p > 0.0 {
            entropy -= p * p.log2();
        }
    }
    let high: f64 = s.eigenvalues[high_frequency_start(n)..].iter().sum();
    Ok(SpectrumMetrics {
        fiedler: s.eigenvalues[1],
        spectral_entropy: entropy,
        hfer_spectral: high / total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SignalMetrics {
    /// Dirichlet energy over signal energy (uncentred).
    pub smoothness: f64,
    pub hfer_signal: f64,
    pub low_frequency_ratio: f64,
}

/// Smoothness and graph-Fourier HFER of the `N×d` signal `x`.
pub fn signal_metrics(s: &LaplacianSpectrum, x: &DMatrix<f64>) -> Result<SignalMetrics> {
    let n = s.num_tokens();
    if x.nrows() != n {
        return Err(Error::ShapeMismatch {
            what: "signal rows vs graph tokens".into(),
            expected: n,
            found: x.nrows(),
        });
    }
    let energy = x.norm_squared();
    if !(energy > 0.0) {
        return Err(Error::Degenerate("all-zero signal has no energy".into()));
    }
    let dirichlet = (x.transpose() * &s.combinatorial * x).trace();
    let coeffs = s.eigenvectors.transpose() * x;
    let split = high_frequency_start(n);
    let high = coeffs.rows(split, n - split).norm_squared();
    let low = coeffs.rows(0, split).norm_squared();
    Ok(SignalMetrics {
        smoothness: dirichlet / energy,
        hfer_signal: high / energy,
        low_frequency_ratio: low / energy,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineMetrics {
    pub frobenius: f64,
    pub max_attention: f64,
    /// Mean per-row Shannon entropy in bits.
    pub row_entropy: f64,
}

/// Conventional attention statistics, evaluated on the aggregated graph.
pub fn baseline_metrics(g: &TokenGraph) -> BaselineMetrics {
    let w = &g.weights;
    let n = w.nrows();
    let mut entropy_sum = 0.0;
    for i in 0..n {
        let row = w.row(i);
        let mass = row.sum();
        if !(mass > 0.0) {
            log::warn!("row {i} of layer {} has no mass; counted as zero entropy", g.layer);
            continue;
        }
        let mut h = 0.0;
        for &v in row.iter() {
            let p = v / mass;
            if p > 0.0 {
                h -= p * p.log2();
            }
        }
        entropy_sum += h;
    }
    BaselineMetrics {
        frobenius: w.norm(),
        max_attention: w.max(),
        row_entropy: entropy_sum / n as f64,
    }
}

/// Which stored hidden layer pairs with graph layer ℓ (1-based).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenAlignment {
    /// Hidden index ℓ, the block's output.
    #[default]
    BlockOutput,
    /// Hidden index ℓ − 1, the block's input.
    BlockInput,
}

impl HiddenAlignment {
    pub fn hidden_index(self, layer: usize) -> usize {
        match self {
            HiddenAlignment::BlockOutput => layer,
            HiddenAlignment::BlockInput => layer - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub aggregation: Aggregation,
    pub laplacian: LaplacianVariant,
    pub hidden_alignment: HiddenAlignment,
}

/// Every diagnostic for one layer of one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerMetrics {
    /// 1-based.
    pub layer: usize,
    pub tokens: usize,
    pub fiedler: f64,
    pub spectral_gap: f64,
    pub spectral_entropy: f64,
    pub hfer_spectral: f64,
    /// Absent when the sample has no hidden states.
    pub hfer_signal: Option<f64>,
    pub smoothness: Option<f64>,
    pub baseline_frobenius: f64,
    pub baseline_max_attention: f64,
    pub baseline_row_entropy: f64,
}

/// Metrics for one layer given its heads and (optionally) its hidden states.
pub fn layer_metrics(
    heads: &[DMatrix<f64>],
    hidden: Option<&DMatrix<f64>>,
    layer: usize,
    config: &AnalysisConfig,
) -> Result<LayerMetrics> {
    let g = aggregate_heads(heads, config.aggregation)?.with_layer(layer);
    let spectrum = build_laplacian(&g, config.laplacian)?;
    let sm = spectrum_metrics(&spectrum)?;
    let signal = hidden.map(|x| signal_metrics(&spectrum, x)).transpose()?;
    let base = baseline_metrics(&g);
    Ok(LayerMetrics {
        layer,
        tokens: g.num_tokens(),
        fiedler: sm.fiedler,
        spectral_gap: spectrum.spectral_gap,
        spectral_entropy: sm.spectral_entropy,
        hfer_spectral: sm.hfer_spectral,
        hfer_signal: signal.map(|s| s.hfer_signal),
        smoothness: signal.map(|s| s.smoothness),
        baseline_frobenius: base.frobenius,
        baseline_max_attention: base.max_attention,
        baseline_row_entropy: base.row_entropy,
    })
}

/// One [`LayerMetrics`] per layer of the sample, in layer order.
pub fn per_layer_metrics(sample: &CapturedSample, config: &AnalysisConfig) -> Result<Vec<LayerMetrics>> {
    let att = &sample.attention;
    (0..att.num_layers())
        .map(|idx| {
            let layer = idx + 1;
            let hidden = sample
                .hidden
                .as_ref()
                .map(|h| h.layer(config.hidden_alignment.hidden_index(layer)));
            layer_metrics(&att.layer_heads(idx), hidden.as_ref(), layer, config).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!(
                    "sample {:?} layer {layer}: {msg}",
                    sample.record.id
                )),
                other => other,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::path_weights;

    fn spectrum_of(w: DMatrix<f64>) -> LaplacianSpectrum {
        build_laplacian(&TokenGraph::from_weights(w).unwrap(), LaplacianVariant::Combinatorial).unwrap()
    }

    fn spectrum_with(eigenvalues: &[f64]) -> LaplacianSpectrum {
        let n = eigenvalues.len();
        LaplacianSpectrum {
            variant: LaplacianVariant::Combinatorial,
            eigenvalues: eigenvalues.to_vec(),
            eigenvectors: DMatrix::identity(n, n),
            spectral_gap: eigenvalues[2] - eigenvalues[1],
            combinatorial: DMatrix::zeros(n, n),
        }
    }

    #[test]
    fn k4_spectrum_metrics() {
        let m = spectrum_metrics(&spectrum_with(&[0.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(m.fiedler, 1.0);
        assert!((m.spectral_entropy - 3f64.log2()).abs() < 1e-12);
        assert!((m.hfer_spectral - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disconnected_has_zero_fiedler() {
        let m = spectrum_metrics(&spectrum_with(&[0.0, 0.0, 2.5, 7.0])).unwrap();
        assert_eq!(m.fiedler, 0.0);
    }

    #[test]
    fn p3_hfer_uses_ceiling_rule() {
        let m = spectrum_metrics(&spectrum_with(&[0.0, 1.0, 3.0])).unwrap();
        assert_eq!(m.fiedler, 1.0);
        assert!((m.hfer_spectral - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_graph_is_refused() {
        assert!(matches!(
            spectrum_metrics(&spectrum_with(&[0.0, 0.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn constant_signal_is_perfectly_smooth() {
        let s = spectrum_of(DMatrix::from_element(4, 4, 0.25));
        let x = DMatrix::from_fn(4, 3, |_, j| j as f64 + 1.5);
        let m = signal_metrics(&s, &x).unwrap();
        assert!(m.smoothness.abs() < 1e-14);
        assert!(m.hfer_signal.abs() < 1e-14);
    }

    #[test]
    fn fiedler_vector_signal_recovers_fiedler_value() {
        let s = spectrum_of(path_weights(5));
        let x = DMatrix::from_column_slice(5, 1, s.fiedler_vector().as_slice());
        let m = signal_metrics(&s, &x).unwrap();
        assert!((m.smoothness - s.fiedler_value()).abs() < 1e-13);
    }

    #[test]
    fn zero_signal_is_refused() {
        let s = spectrum_of(path_weights(3));
        assert!(signal_metrics(&s, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn signal_row_mismatch() {
        let s = spectrum_of(path_weights(3));
        assert!(matches!(
            signal_metrics(&s, &DMatrix::from_element(4, 2, 1.0)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn baseline_uniform_fixture() {
        let g = TokenGraph::from_weights(DMatrix::from_element(4, 4, 0.25)).unwrap();
        let b = baseline_metrics(&g);
        assert!((b.frobenius - 1.0).abs() < 1e-15);
        assert_eq!(b.max_attention, 0.25);
        assert!((b.row_entropy - 2.0).abs() < 1e-15);
    }

    #[test]
    fn baseline_identity_and_scaling() {
        let g = TokenGraph::from_weights(DMatrix::identity(3, 3)).unwrap();
        let b = baseline_metrics(&g);
        assert_eq!(b.row_entropy, 0.0);
        assert_eq!(b.max_attention, 1.0);

        let w = DMatrix::from_fn(4, 4, |i, j| 0.1 + ((i + j) % 3) as f64 * 0.2);
        let b1 = baseline_metrics(&TokenGraph::from_weights(w.clone()).unwrap());
        let b2 = baseline_metrics(&TokenGraph::from_weights(w * 2.0).unwrap());
        assert!((b2.frobenius - 2.0 * b1.frobenius).abs() < 1e-14);
        assert!((b2.max_attention - 2.0 * b1.max_attention).abs() < 1e-15);
        assert!((b2.row_entropy - b1.row_entropy).abs() < 1e-14);
    }

    #[test]
    fn zero_row_counts_as_zero_entropy() {
        let mut w = DMatrix::from_element(3, 3, 1.0);
        for k in 0..3 {
            w[(0, k)] = 0.0;
            w[(k, 0)] = 0.0;
        }
        let b = baseline_metrics(&TokenGraph::from_weights(w).unwrap());
        assert!((b.row_entropy - 2.0 / 3.0).abs() < 1e-15);
    }
}
