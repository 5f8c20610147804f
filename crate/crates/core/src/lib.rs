// SPDX-License-Identifier: MIT OR Apache-2.0

//! Spectral diagnostics for transformer attention.
//!
//! Each layer's multi-head attention is collapsed into an undirected token
//! graph; the graph Laplacian spectrum then yields the algebraic
//! connectivity (Fiedler value), spectral entropy, high-frequency energy
//! ratios and the smoothness of hidden states over the graph.
//!
//! The crate is organised bottom-up:
//!
//! | Module | Purpose |
//! |--------|---------|
//! | [`capture`] | capture-bundle format: manifest, raw tensors, validation, pairing |
//! | [`graph`] | head aggregation, Laplacian spectra, per-layer metrics |
//! | [`stress`] | paired deltas, early-window means, stress tables |
//! | [`stats`] | bootstrap, effect sizes, permutation tests, BH-FDR, correlation |
//! | [`forensics`] | frozen-threshold regime rules, strategy taxonomy, entropy discriminator |
//! | [`intervention`] | Fiedler gradients, head importance, ablation curves, steering vectors |
//! | [`report`] | report documents and `.dat` / CSV projections |
//! | [`fixtures`] | synthetic attention used by tests, benches and demos |

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod capture;
pub mod error;
pub mod fixtures;
pub mod forensics;
pub mod graph;
pub mod intervention;
pub mod report;
pub mod stats;
pub mod stress;

pub use nalgebra;

pub use capture::{
    load_bundle, pair_samples, validate_attention, AttentionTensor, CaptureBundle,
    CaptureManifest, CapturedSample, Construction, HiddenTensor, LoadOptions, PairedSample,
    Pairing, Role, SampleRecord, ValidationReport,
};
pub use error::{Error, Result};
pub use graph::{
    aggregate_heads, baseline_metrics, build_laplacian, per_layer_metrics, signal_metrics,
    spectrum_metrics, Aggregation, AnalysisConfig, HiddenAlignment, LaplacianSpectrum,
    LaplacianVariant, LayerMetrics, TokenGraph,
};
pub use stress::{delta_profile, early_window_mean, stress_table, DeltaProfile, LayerWindow, Metric, StressTable};

/// Tool version embedded in every report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
