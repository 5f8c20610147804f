// SPDX-License-Identifier: MIT OR Apache-2.0

//! Fiedler-gradient head importance, head ablation and steering vectors.
//!
//! For the combinatorial Laplacian with simple λ₂ and unit Fiedler vector
//! `v`, `λ₂ = Σ_{i<j} W_ij (v_i − v_j)²`, so
//! `G_ij = ½ (v_i − v_j)²` (zero diagonal) satisfies `dλ₂ = Σ_ij G_ij dW_ij`
//! for symmetric perturbations. Heads are scored by chaining `G` through
//! the head aggregation, by default down to the pre-softmax logits.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::capture::{pair_samples, CaptureBundle, CapturedSample};
use crate::error::{Error, Result};
use crate::graph::{
    aggregate_heads, aggregate_heads_excluding, build_laplacian, Aggregation, HiddenAlignment,
    LaplacianSpectrum, LaplacianVariant, TokenGraph, DEGENERATE_GAP,
};
use crate::stats::{compensated_sum, rng::stream};

/// Gradient of λ₂ with respect to the (symmetrised) weights.
///
/// Refuses when λ₂ is not simple at `gap_tolerance` or when the spectrum is
/// not of the combinatorial Laplacian.
pub fn fiedler_gradient_with(
    g: &TokenGraph,
    spectrum: &LaplacianSpectrum,
    gap_tolerance: f64,
) -> Result<DMatrix<f64>> {
    if spectrum.variant != LaplacianVariant::Combinatorial {
        return Err(Error::InvalidInput(
            "Fiedler gradient is defined for the combinatorial Laplacian only".into(),
        ));
    }
    let n = g.num_tokens();
    if spectrum.num_tokens() != n {
        return Err(Error::ShapeMismatch {
            what: "spectrum vs graph tokens".into(),
            expected: n,
            found: spectrum.num_tokens(),
        });
    }
    if !spectrum.fiedler_is_simple(gap_tolerance) {
        return Err(Error::DegenerateFiedler {
            gap: spectrum.fiedler_separation(),
            tolerance: gap_tolerance,
        });
    }
    let v = spectrum.fiedler_vector();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let d = v[i] - v[j];
        0.5 * d * d
    }))
}

/// [`fiedler_gradient_with`] at the default gap tolerance.
pub fn fiedler_gradient(g: &TokenGraph, spectrum: &LaplacianSpectrum) -> Result<DMatrix<f64>> {
    fiedler_gradient_with(g, spectrum, DEGENERATE_GAP)
}

/// Variable the per-head gradient is taken with respect to.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSpace {
    /// Pre-softmax scores, through the row-wise softmax Jacobian.
    #[default]
    Logits,
    /// Post-softmax attention entries.
    Attention,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    Frobenius,
    /// Largest singular value.
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientOptions {
    pub aggregation: Aggregation,
    pub space: GradientSpace,
    /// Also differentiate the mass weights α_h (mass-weighted mode only).
    pub differentiate_mass: bool,
    pub norm: NormKind,
    pub gap_tolerance: f64,
}

impl Default for GradientOptions {
    fn default() -> Self {
        Self {
            aggregation: Aggregation::MassWeighted,
            space: GradientSpace::Logits,
            differentiate_mass: false,
            norm: NormKind::Frobenius,
            gap_tolerance: DEGENERATE_GAP,
        }
    }
}

/// Per-head gradients of λ₂ for one layer.
pub fn head_gradients(heads: &[DMatrix<f64>], opts: &GradientOptions) -> Result<Vec<DMatrix<f64>>> {
    let g = aggregate_heads(heads, opts.aggregation)?;
    let spectrum = build_laplacian(&g, LaplacianVariant::Combinatorial)?;
    let grad = fiedler_gradient_with(&g, &spectrum, opts.gap_tolerance)?;

    // ∂λ₂/∂α_k = Σ_ij G_ij ½(A_k + A_kᵀ)_ij = Σ_ij G_ij A_k,ij by symmetry of G.
    let mass_term: Option<Vec<f64>> = (opts.differentiate_mass
        && opts.aggregation == Aggregation::MassWeighted)
        .then(|| {
            let total: f64 = heads
                .iter()
                .zip(&g.head_weights)
                .filter(|(_, &a)| a > 0.0)
                .map(|(m, _)| m.sum())
                .sum();
            let c: Vec<f64> = heads.iter().map(|a| grad.component_mul(a).sum()).collect();
            let weighted: f64 = c.iter().zip(&g.head_weights).map(|(c, a)| c * a).sum();
            c.iter().map(|ck| (ck - weighted) / total).collect()
        });

    Ok(heads
        .iter()
        .enumerate()
        .map(|(h, a)| {
            let alpha = g.head_weights[h];
            let mut d_attn = &grad * alpha;
            if let Some(extra) = &mass_term {
                if alpha > 0.0 {
                    d_attn.add_scalar_mut(extra[h]);
                }
            }
            match opts.space {
                GradientSpace::Attention => d_attn,
                GradientSpace::Logits => softmax_pullback(a, &d_attn),
            }
        })
        .collect())
}

/// `∂/∂z_ij = A_ij (g_ij − Σ_k A_ik g_ik)` for row-wise softmax.
fn softmax_pullback(a: &DMatrix<f64>, upstream: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = DMatrix::zeros(n, n);
    for i in 0..n {
        let row_dot: f64 = (0..n).map(|k| a[(i, k)] * upstream[(i, k)]).sum();
        for j in 0..n {
            out[(i, j)] = a[(i, j)] * (upstream[(i, j)] - row_dot);
        }
    }
    out
}

fn matrix_norm(m: &DMatrix<f64>, kind: NormKind) -> f64 {
    match kind {
        NormKind::Frobenius => m.norm(),
        NormKind::Spectral => m.singular_values().max(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadScore {
    /// 1-based.
    pub layer: usize,
    /// 0-based.
    pub head: usize,
    pub importance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeadImportance {
    /// In head order.
    pub scores: Vec<HeadScore>,
    pub samples_used: usize,
    /// Samples whose λ₂ was not simple.
    pub samples_skipped: usize,
    pub options: GradientOptions,
}

impl HeadImportance {
    /// Head indices by descending importance; ties keep the lower index first.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].importance.total_cmp(&self.scores[a].importance));
        order
    }
}

/// Mean per-head gradient norm over samples, one entry of `samples` per
/// sample holding that sample's heads at `layer`.
pub fn head_importance(
    samples: &[Vec<DMatrix<f64>>],
    layer: usize,
    opts: &GradientOptions,
) -> Result<HeadImportance> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidInput("head importance needs at least one sample".into()));
    };
    let h = first.len();
    let mut per_head: Vec<Vec<f64>> = vec![Vec::with_capacity(samples.len()); h];
    let mut skipped = 0;
    for heads in samples {
        if heads.len() != h {
            return Err(Error::ShapeMismatch {
                what: "heads per sample".into(),
                expected: h,
                found: heads.len(),
            });
        }
        match head_gradients(heads, opts) {
            Ok(grads) => {
                for (acc, g) in per_head.iter_mut().zip(&grads) {
                    acc.push(matrix_norm(g, opts.norm));
                }
            }
            Err(Error::DegenerateFiedler { gap, .. }) => {
                log::debug!("layer {layer}: skipping sample with λ₂ gap {gap:e}");
                skipped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let used = samples.len() - skipped;
    if used == 0 {
        return Err(Error::Degenerate(format!(
            "layer {layer}: λ₂ is degenerate in all {} samples",
            samples.len()
        )));
    }
    let scores = per_head
        .iter()
        .enumerate()
        .map(|(head, norms)| HeadScore {
            layer,
            head,
            importance: compensated_sum(norms.iter().copied()) / used as f64,
        })
        .collect();
    Ok(HeadImportance {
        scores,
        samples_used: used,
        samples_skipped: skipped,
        options: *opts,
    })
}

/// [`head_importance`] over the named samples of a bundle.
pub fn bundle_head_importance(
    bundle: &CaptureBundle,
    sample_ids: &[String],
    layer: usize,
    opts: &GradientOptions,
) -> Result<HeadImportance> {
    let samples = sample_ids
        .iter()
        .map(|id| layer_heads_of(bundle, id, layer))
        .collect::<Result<Vec<_>>>()?;
    head_importance(&samples, layer, opts)
}

/// Heads of a 1-based layer of the named sample.
pub fn layer_heads_of(bundle: &CaptureBundle, id: &str, layer: usize) -> Result<Vec<DMatrix<f64>>> {
    let sample = bundle
        .sample(id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown sample {id:?}")))?;
    check_layer(layer, sample.attention.num_layers())?;
    Ok(sample.attention.layer_heads(layer - 1))
}

fn check_layer(layer: usize, num_layers: usize) -> Result<()> {
    if layer == 0 || layer > num_layers {
        return Err(Error::InvalidInput(format!(
            "layer {layer} outside 1..={num_layers}"
        )));
    }
    Ok(())
}

/// λ₂ of the combinatorial Laplacian with the 0-based `excluded` heads removed.
pub fn ablate_heads(heads: &[DMatrix<f64>], excluded: &[usize], aggregation: Aggregation) -> Result<f64> {
    let g = aggregate_heads_excluding(heads, aggregation, excluded)?;
    Ok(build_laplacian(&g, LaplacianVariant::Combinatorial)?.fiedler_value())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Remove the top-k heads by importance.
    Targeted,
    /// Remove uniformly random k-subsets.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub gradient: GradientOptions,
    pub n_random_repeats: usize,
    pub seed: u64,
    /// Mixed into the random-subset streams, typically the sample id.
    pub stream_label: String,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            gradient: GradientOptions::default(),
            n_random_repeats: 20,
            seed: 0,
            stream_label: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCurve {
    pub mode: AblationMode,
    pub layer: usize,
    pub k_values: Vec<usize>,
    pub lambda2_at_k: Vec<f64>,
    /// Standard error over random repeats; zero for targeted curves.
    pub stderr_at_k: Vec<f64>,
    pub n_random_repeats: usize,
    pub seed: u64,
    /// Observed, never assumed.
    pub monotone_non_increasing: bool,
    /// Head order used for targeted removal.
    pub ranking: Option<Vec<usize>>,
}

/// Ablation curve for one sample's heads at `layer`.
///
/// Targeted mode ranks heads by this sample's own importance; use
/// [`ablation_curve_with_ranking`] to supply a ranking computed elsewhere.
pub fn ablation_curve(
    heads: &[DMatrix<f64>],
    layer: usize,
    mode: AblationMode,
    k_values: &[usize],
    cfg: &AblationConfig,
) -> Result<AblationCurve> {
    let ranking = match mode {
        AblationMode::Targeted => {
            Some(head_importance(&[heads.to_vec()], layer, &cfg.gradient)?.ranking())
        }
        AblationMode::Random => None,
    };
    ablation_curve_with_ranking(heads, layer, mode, k_values, ranking, cfg)
}

pub fn ablation_curve_with_ranking(
    heads: &[DMatrix<f64>],
    layer: usize,
    mode: AblationMode,
    k_values: &[usize],
    ranking: Option<Vec<usize>>,
    cfg: &AblationConfig,
) -> Result<AblationCurve> {
    let h = heads.len();
    if let Some(&k) = k_values.iter().find(|&&k| k > h) {
        return Err(Error::InvalidInput(format!("cannot ablate {k} of {h} heads")));
    }
    let aggregation = cfg.gradient.aggregation;
    let mut lambda2_at_k = Vec::with_capacity(k_values.len());
    let mut stderr_at_k = Vec::with_capacity(k_values.len());
    match mode {
        AblationMode::Targeted => {
            let ranking = ranking
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("targeted ablation needs a head ranking".into()))?;
            if ranking.len() != h {
                return Err(Error::ShapeMismatch {
                    what: "head ranking".into(),
                    expected: h,
                    found: ranking.len(),
                });
            }
            for &k in k_values {
                lambda2_at_k.push(ablate_heads(heads, &ranking[..k], aggregation)?);
                stderr_at_k.push(0.0);
            }
        }
        AblationMode::Random => {
            let repeats = cfg.n_random_repeats;
            if repeats == 0 {
                return Err(Error::InvalidInput("random ablation needs at least one repeat".into()));
            }
            for &k in k_values {
                let values = (0..repeats)
                    .map(|r| {
                        let mut rng = stream(
                            cfg.seed,
                            &format!("ablation/{}/layer{layer}/k{k}/r{r}", cfg.stream_label),
                        );
                        let subset = index::sample(&mut rng, h, k).into_vec();
                        ablate_heads(heads, &subset, aggregation)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let m = compensated_sum(values.iter().copied()) / repeats as f64;
                let se = if repeats > 1 {
                    let var = compensated_sum(values.iter().map(|v| (v - m) * (v - m)))
                        / (repeats - 1) as f64;
                    (var / repeats as f64).sqrt()
                } else {
                    0.0
                };
                lambda2_at_k.push(m);
                stderr_at_k.push(se);
            }
        }
    }
    let mut order: Vec<usize> = (0..k_values.len()).collect();
    order.sort_by_key(|&i| k_values[i]);
    let monotone_non_increasing = order
        .windows(2)
        .all(|w| lambda2_at_k[w[1]] <= lambda2_at_k[w[0]]);
    Ok(AblationCurve {
        mode,
        layer,
        k_values: k_values.to_vec(),
        lambda2_at_k,
        stderr_at_k,
        n_random_repeats: if mode == AblationMode::Random { cfg.n_random_repeats } else { 0 },
        seed: cfg.seed,
        monotone_non_increasing,
        ranking,
    })
}

/// Default injection strengths handed to the extractor.
pub const ALPHA_GRID: [f64; 6] = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0];

const STEERING_FORMAT: &str = "steer-1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SteeringOptions {
    /// Drop token position 1 before pooling.
    pub exclude_first_token: bool,
    pub hidden_alignment: HiddenAlignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    /// 1-based graph layer.
    pub layer: usize,
    pub values: Vec<f64>,
    pub calibration_size: usize,
    pub alpha_grid: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SteeringHeader {
    format: String,
    layer: usize,
    d: usize,
    calibration_size: usize,
    alpha_grid: Vec<f64>,
}

/// Mean over tokens of an N×d hidden-state matrix.
pub fn mean_pool(x: &DMatrix<f64>, exclude_first_token: bool) -> Result<DVector<f64>> {
    let skip = usize::from(exclude_first_token);
    let rows = x.nrows().saturating_sub(skip);
    if rows == 0 {
        return Err(Error::InvalidInput("no tokens left to pool".into()));
    }
    let d = x.ncols();
    Ok(DVector::from_fn(d, |c, _| {
        compensated_sum((skip..x.nrows()).map(|r| x[(r, c)])) / rows as f64
    }))
}

fn pooled(sample: &CapturedSample, layer: usize, opts: &SteeringOptions) -> Result<DVector<f64>> {
    let hidden = sample.hidden.as_ref().ok_or_else(|| {
        Error::InvalidInput(format!("sample {:?} has no hidden states", sample.record.id))
    })?;
    mean_pool(&hidden.layer(opts.hidden_alignment.hidden_index(layer)), opts.exclude_first_token)
}

/// Mean over calibration pairs of (pooled canonical − pooled stressed)
/// hidden states at `layer`. An empty `pair_ids` selects every pair.
pub fn steering_vector(
    bundle: &CaptureBundle,
    layer: usize,
    pair_ids: &[String],
    opts: &SteeringOptions,
) -> Result<SteeringVector> {
    check_layer(layer, bundle.manifest().num_layers)?;
    let pairing = pair_samples(bundle)?;
    let pairs: Vec<_> = pairing
        .pairs
        .iter()
        .filter(|p| pair_ids.is_empty() || pair_ids.contains(&p.pair_id))
        .collect();
    if let Some(missing) = pair_ids
        .iter()
        .find(|id| !pairing.pairs.iter().any(|p| &p.pair_id == *id))
    {
        return Err(Error::InvalidInput(format!("calibration pair {missing:?} not found")));
    }
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty calibration set".into()));
    }
    let d = bundle.manifest().hidden_dim;
    let mut diffs: Vec<DVector<f64>> = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let get = |id: &str| bundle.sample(id).expect("paired ids exist in bundle");
        let c = pooled(get(&p.canonical), layer, opts)?;
        let s = pooled(get(&p.stressed), layer, opts)?;
        diffs.push(c - s);
    }
    let n = diffs.len() as f64;
    let values = (0..d)
        .map(|c| compensated_sum(diffs.iter().map(|v| v[c])) / n)
        .collect();
    Ok(SteeringVector {
        layer,
        values,
        calibration_size: pairs.len(),
        alpha_grid: ALPHA_GRID.to_vec(),
    })
}

impl SteeringVector {
    /// Layout: u64 LE header length, UTF-8 JSON header, then `d` binary32 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = SteeringHeader {
            format: STEERING_FORMAT.into(),
            layer: self.layer,
            d: self.values.len(),
            calibration_size: self.calibration_size,
            alpha_grid: self.alpha_grid.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(8 + json.len() + 4 * self.values.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::InvalidInput(format!("steering file: {msg}"));
        let len_bytes: [u8; 8] = bytes
            .get(..8)
            .ok_or_else(|| bad("truncated header length"))?
            .try_into()
            .expect("8 bytes");
        let hlen = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| bad("header too long"))?;
        let json = bytes
            .get(8..8usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: SteeringHeader =
            serde_json::from_slice(json).map_err(|e| bad(&format!("header: {e}")))?;
        if header.format != STEERING_FORMAT {
            return Err(Error::FormatVersion {
                found: header.format,
                expected: STEERING_FORMAT,
            });
        }
        let payload = &bytes[8 + hlen..];
        if payload.len() != 4 * header.d {
            return Err(Error::ShapeMismatch {
                what: "steering payload bytes".into(),
                expected: 4 * header.d,
                found: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Ok(Self {
            layer: header.layer,
            values,
            calibration_size: header.calibration_size,
            alpha_grid: header.alpha_grid,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
