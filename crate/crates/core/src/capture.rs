// SPDX-License-Identifier: MIT OR Apache-2.0

//! Capture bundles: a `manifest.json` plus raw tensor blobs.
//!
//! Blobs are headerless binary32 little-endian arrays in row-major order.
//! Attention blobs have shape `[L][H][N][N]`, hidden-state blobs
//! `[L+1][N][d]` where hidden layer 0 is the embedding output. Every shape
//! is taken from the manifest; nothing in a blob describes itself.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Format tag written to and required from every manifest.
pub const FORMAT_VERSION: &str = "atnb-1";

/// Row-sum tolerance admitting half-precision captures.
pub const DEFAULT_ROW_TOLERANCE: f64 = 1e-3;

/// Row-sum tolerance used by `--strict-stochastic`.
pub const STRICT_ROW_TOLERANCE: f64 = 1e-6;

const MANIFEST_FILE: &str = "manifest.json";

const MANIFEST_FIELDS: &[&str] = &[
    "format_version",
    "model_id",
    "num_layers",
    "num_heads",
    "hidden_dim",
    "samples",
];

const SAMPLE_FIELDS: &[&str] = &[
    "id",
    "text",
    "language",
    "construction",
    "role",
    "pair_id",
    "token_count",
    "attention_blob",
    "hidden_blob",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    Active,
    Passive,
    WhQuestion,
    ComplexClause,
    DativeShift,
    AdverbialFronting,
    OodGibberish,
    OodRepetition,
    OodCodeNoise,
    OodMathNoise,
}

impl Construction {
    pub fn as_str(self) -> &'static str {
        match self {
            Construction::Active => "active",
            Construction::Passive => "passive",
            Construction::WhQuestion => "wh_question",
            Construction::ComplexClause => "complex_clause",
            Construction::DativeShift => "dative_shift",
            Construction::AdverbialFronting => "adverbial_fronting",
            Construction::OodGibberish => "ood_gibberish",
            Construction::OodRepetition => "ood_repetition",
            Construction::OodCodeNoise => "ood_code_noise",
            Construction::OodMathNoise => "ood_math_noise",
        }
    }
}

impl std::fmt::Display for Construction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Canonical,
    Stressed,
}

/// One stimulus and the location of its tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub text: String,
    /// ISO-639-1 code.
    pub language: String,
    pub construction: Construction,
    pub role: Role,
    pub pair_id: String,
    pub token_count: usize,
    /// Relative to the bundle directory.
    pub attention_blob: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_blob: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    pub format_version: String,
    pub model_id: String,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub samples: Vec<SampleRecord>,
}

impl CaptureManifest {
    fn check_invariants(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version.clone(),
                expected: FORMAT_VERSION,
            });
        }
        for (name, value) in [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("hidden_dim", self.hidden_dim),
        ] {
            if value == 0 {
                return Err(Error::Manifest(format!("{name} must be positive")));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample id {:?}", s.id)));
            }
            if s.token_count < 2 {
                return Err(Error::Manifest(format!(
                    "sample {:?} declares token_count {} (< 2)",
                    s.id, s.token_count
                )));
            }
        }
        Ok(())
    }
}

/// Post-softmax attention of one sample, layout `[layer][head][query][key]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    layers: usize,
    heads: usize,
    tokens: usize,
    values: Vec<f32>,
}

impl AttentionTensor {
    pub fn new(layers: usize, heads: usize, tokens: usize, values: Vec<f32>) -> Result<Self> {
        let expected = layers * heads * tokens * tokens;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "attention tensor".into(),
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            layers,
            heads,
            tokens,
            values,
        })
    }

    /// Builds a tensor from per-layer, per-head `N×N` matrices.
    pub fn from_matrices(layers: &[Vec<DMatrix<f64>>]) -> Result<Self> {
        let num_layers = layers.len();
        let heads = layers.first().map_or(0, Vec::len);
        let tokens = layers
            .first()
            .and_then(|l| l.first())
            .map_or(0, DMatrix::nrows);
        let mut values = Vec::with_capacity(num_layers * heads * tokens * tokens);
        for layer in layers {
            if layer.len() != heads {
                return Err(Error::InvalidInput("ragged head count across layers".into()));
            }
            for m in layer {
                if m.nrows() != tokens || m.ncols() != tokens {
                    return Err(Error::InvalidInput("attention matrices must all be N×N".into()));
                }
                for i in 0..tokens {
                    for j in 0..tokens {
                        values.push(m[(i, j)] as f32);
                    }
                }
            }
        }
        Self::new(num_layers, heads, tokens, values)
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_heads(&self) -> usize {
        self.heads
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// Raw row-major slice of one head, `layer` and `head` zero-based.
    pub fn head(&self, layer: usize, head: usize) -> &[f32] {
        let nn = self.tokens * self.tokens;
        let start = (layer * self.heads + head) * nn;
        &self.values[start..start + nn]
    }

    /// All heads of a zero-based layer as `f64` matrices.
    pub fn layer_heads(&self, layer: usize) -> Vec<DMatrix<f64>> {
        let n = self.tokens;
        (0..self.heads)
            .map(|h| {
                let raw = self.head(layer, h);
                DMatrix::from_fn(n, n, |i, j| f64::from(raw[i * n + j]))
            })
            .collect()
    }
}

/// Hidden states of one sample, layout `[layer 0..=L][token][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenTensor {
    layers: usize,
    tokens: usize,
    dim: usize,
    values: Vec<f32>,
}

impl HiddenTensor {
    /// `layers` counts every stored layer including the embedding output (L+1).
    pub fn new(layers: usize, tokens: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        let expected = layers * tokens * dim;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "hidden tensor".into(),
                expected,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "hidden tensor has a non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self {
            layers,
            tokens,
            dim,
            values,
        })
    }

    pub fn from_matrices(layers: &[DMatrix<f64>]) -> Result<Self> {
        let tokens = layers.first().map_or(0, DMatrix::nrows);
        let dim = layers.first().map_or(0, DMatrix::ncols);
        let mut values = Vec::with_capacity(layers.len() * tokens * dim);
        for m in layers {
            if m.nrows() != tokens || m.ncols() != dim {
                return Err(Error::InvalidInput("hidden matrices must all be N×d".into()));
            }
            for i in 0..tokens {
                for j in 0..dim {
                    values.push(m[(i, j)] as f32);
                }
            }
        }
        Self::new(layers.len(), tokens, dim, values)
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    /// `N×d` hidden states at a stored layer index (0 = embeddings).
    pub fn layer(&self, index: usize) -> DMatrix<f64> {
        let (n, d) = (self.tokens, self.dim);
        let start = index * n * d;
        let raw = &self.values[start..start + n * d];
        DMatrix::from_fn(n, d, |i, j| f64::from(raw[i * d + j]))
    }
}

/// A manifest record together with its loaded tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedSample {
    pub record: SampleRecord,
    pub attention: AttentionTensor,
    pub hidden: Option<HiddenTensor>,
}

/// A fully validated, immutable bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBundle {
    manifest: CaptureManifest,
    samples: Vec<CapturedSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoadOptions {
    /// Maximum allowed |row sum − 1| for attention rows.
    pub row_tolerance: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            row_tolerance: DEFAULT_ROW_TOLERANCE,
        }
    }
}

impl LoadOptions {
    pub fn strict() -> Self {
        Self {
            row_tolerance: STRICT_ROW_TOLERANCE,
        }
    }
}

impl CaptureBundle {
    /// Assembles a bundle from in-memory samples, applying the same checks
    /// as [`load_bundle`].
    pub fn from_parts(
        manifest: CaptureManifest,
        samples: Vec<CapturedSample>,
        options: LoadOptions,
    ) -> Result<Self> {
        manifest.check_invariants()?;
        if manifest.samples.len() != samples.len() {
            return Err(Error::Manifest(
                "manifest sample list does not match supplied tensors".into(),
            ));
        }
        for (declared, sample) in manifest.samples.iter().zip(&samples) {
            if declared != &sample.record {
                return Err(Error::Manifest(format!(
                    "sample {:?} differs from its manifest entry",
                    sample.record.id
                )));
            }
            check_sample_shapes(&manifest, sample)?;
            let report = validate_attention(&sample.attention, options.row_tolerance);
            if !report.is_clean() {
                return Err(Error::Validation(format!(
                    "sample {:?}: {}",
                    sample.record.id,
                    report.summary()
                )));
            }
        }
        Ok(Self { manifest, samples })
    }

    pub fn manifest(&self) -> &CaptureManifest {
        &self.manifest
    }

    pub fn model_id(&self) -> &str {
        &self.manifest.model_id
    }

    pub fn samples(&self) -> &[CapturedSample] {
        &self.samples
    }

    pub fn sample(&self, id: &str) -> Option<&CapturedSample> {
        self.samples.iter().find(|s| s.record.id == id)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `manifest.json` and every blob under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for sample in &self.samples {
            write_blob(&dir.join(&sample.record.attention_blob), sample.attention.as_slice())?;
            if let (Some(rel), Some(hidden)) = (&sample.record.hidden_blob, &sample.hidden) {
                write_blob(&dir.join(rel), hidden.as_slice())?;
            }
        }
        // Manifest last, so a partially written directory never looks complete.
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn check_sample_shapes(manifest: &CaptureManifest, sample: &CapturedSample) -> Result<()> {
    let r = &sample.record;
    let a = &sample.attention;
    if a.num_layers() != manifest.num_layers
        || a.num_heads() != manifest.num_heads
        || a.num_tokens() != r.token_count
    {
        return Err(Error::ShapeMismatch {
            what: format!("attention of sample {:?}", r.id),
            expected: manifest.num_layers * manifest.num_heads * r.token_count * r.token_count,
            found: a.as_slice().len(),
        });
    }
    match (&r.hidden_blob, &sample.hidden) {
        (None, None) => Ok(()),
        (Some(_), Some(h)) => {
            if h.num_layers() != manifest.num_layers + 1
                || h.num_tokens() != r.token_count
                || h.dim() != manifest.hidden_dim
            {
                return Err(Error::ShapeMismatch {
                    what: format!("hidden states of sample {:?}", r.id),
                    expected: (manifest.num_layers + 1) * r.token_count * manifest.hidden_dim,
                    found: h.as_slice().len(),
                });
            }
            Ok(())
        }
        _ => Err(Error::Manifest(format!(
            "sample {:?}: hidden_blob declaration and hidden tensor disagree",
            r.id
        ))),
    }
}

fn write_blob(path: &Path, values: &[f32]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_blob(path: &Path, expected_len: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::ShapeMismatch {
            what: format!("{what} blob {}", path.display()),
            expected: expected_len * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn warn_unknown_fields(value: &serde_json::Value) {
    let Some(obj) = value.as_object() else { return };
    for key in obj.keys() {
        if !MANIFEST_FIELDS.contains(&key.as_str()) {
            log::warn!("manifest: ignoring unknown field {key:?}");
        }
    }
    if let Some(samples) = obj.get("samples").and_then(|s| s.as_array()) {
        for (i, s) in samples.iter().enumerate() {
            for key in s.as_object().into_iter().flat_map(|o| o.keys()) {
                if !SAMPLE_FIELDS.contains(&key.as_str()) {
                    log::warn!("manifest: sample {i}: ignoring unknown field {key:?}");
                }
            }
        }
    }
}

/// Reads and parses `manifest.json` without touching blobs.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CaptureManifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    warn_unknown_fields(&value);
    if let Some(v) = value.get("format_version").and_then(|v| v.as_str()) {
        if v != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: v.to_string(),
                expected: FORMAT_VERSION,
            });
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Manifest(e.to_string()))
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>, options: LoadOptions) -> Result<CaptureBundle> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    manifest.check_invariants()?;
    let (l, h, d) = (manifest.num_layers, manifest.num_heads, manifest.hidden_dim);
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for record in &manifest.samples {
        let n = record.token_count;
        let attention = read_blob(&dir.join(&record.attention_blob), l * h * n * n, "attention")?;
        let attention = AttentionTensor::new(l, h, n, attention)?;
        let hidden = match &record.hidden_blob {
            Some(rel) => {
                let raw = read_blob(&dir.join(rel), (l + 1) * n * d, "hidden")?;
                Some(HiddenTensor::new(l + 1, n, d, raw)?)
            }
            None => None,
        };
        samples.push(CapturedSample {
            record: record.clone(),
            attention,
            hidden,
        });
    }
    CaptureBundle::from_parts(manifest, samples, options)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RowViolation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub row_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntryViolation {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Row-stochasticity audit of an attention tensor. Indices are zero-based.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub tolerance: f64,
    pub row_violations: Vec<RowViolation>,
    /// Negative or non-finite entries.
    pub entry_violations: Vec<EntryViolation>,
    pub max_row_deviation: f64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.row_violations.is_empty() && self.entry_violations.is_empty()
    }

    pub fn summary(&self) -> String {
        let mut msg = format!(
            "{} row-sum violation(s) and {} bad entr(y/ies) at tolerance {:e}",
            self.row_violations.len(),
            self.entry_violations.len(),
            self.tolerance
        );
        if let Some(v) = self.row_violations.first() {
            msg.push_str(&format!(
                "; first row violation at layer {} head {} row {} (sum {})",
                v.layer, v.head, v.row, v.row_sum
            ));
        }
        msg
    }
}

/// Lists every row whose sum deviates from 1 by more than `tol`, and every
/// negative or non-finite entry.
pub fn validate_attention(t: &AttentionTensor, tol: f64) -> ValidationReport {
    let n = t.num_tokens();
    let mut report = ValidationReport {
        tolerance: tol,
        ..Default::default()
    };
    for layer in 0..t.num_layers() {
        for head in 0..t.num_heads() {
            let raw = t.head(layer, head);
            for row in 0..n {
                let entries = &raw[row * n..(row + 1) * n];
                let mut sum = 0.0f64;
                for (col, &v) in entries.iter().enumerate() {
                    let v = f64::from(v);
                    if !v.is_finite() || v < 0.0 {
                        report.entry_violations.push(EntryViolation {
                            layer,
                            head,
                            row,
                            col,
                            value: v,
                        });
                    }
                    sum += v;
                }
                let dev = (sum - 1.0).abs();
                if dev.is_nan() || dev > report.max_row_deviation {
                    report.max_row_deviation = dev;
                }
                if !(dev <= tol) {
                    report.row_violations.push(RowViolation {
                        layer,
                        head,
                        row,
                        row_sum: sum,
                    });
                }
            }
        }
    }
    report
}

/// One canonical sample matched with one stressed sample.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PairedSample {
    pub pair_id: String,
    pub canonical: String,
    pub stressed: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Pairing {
    pub pairs: Vec<PairedSample>,
    /// Sample ids that could not be paired, sorted.
    pub orphans: Vec<String>,
}

/// Star pairing: each pair_id's canonical sample is matched with every
/// stressed sample sharing that pair_id.
pub fn pair_samples(bundle: &CaptureBundle) -> Result<Pairing> {
    let mut groups: BTreeMap<&str, (Vec<&str>, BTreeSet<&str>)> = BTreeMap::new();
    for s in &bundle.manifest.samples {
        let entry = groups.entry(s.pair_id.as_str()).or_default();
        match s.role {
            Role::Canonical => entry.0.push(s.id.as_str()),
            Role::Stressed => {
                entry.1.insert(s.id.as_str());
            }
        }
    }
    let mut pairing = Pairing::default();
    for (pair_id, (canonical, stressed)) in groups {
        match canonical.as_slice() {
            [] => pairing.orphans.extend(stressed.iter().map(|s| s.to_string())),
            [c] if stressed.is_empty() => pairing.orphans.push(c.to_string()),
            [c] => pairing
                .pairs
                .extend(stressed.iter().map(|s| PairedSample {
                    pair_id: pair_id.to_string(),
                    canonical: c.to_string(),
                    stressed: s.to_string(),
                })),
            _ => {
                let mut ids = canonical.clone();
                ids.sort_unstable();
                return Err(Error::Validation(format!(
                    "pair_id {pair_id:?} has {} canonical samples ({})",
                    ids.len(),
                    ids.join(", ")
                )));
            }
        }
    }
    pairing.pairs.sort();
    pairing.orphans.sort();
    Ok(pairing)
}
