// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic attention with known spectral structure.
//!
//! These builders back the test suites, the benches and the CLI demos. All
//! randomised builders take an explicit seed.

use std::path::PathBuf;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::capture::{
    AttentionTensor, CaptureBundle, CaptureManifest, CapturedSample, Construction, HiddenTensor,
    LoadOptions, Role, SampleRecord, FORMAT_VERSION,
};
use crate::error::Result;

/// `h` heads of uniform attention over `n` tokens.
pub fn uniform_heads(h: usize, n: usize) -> Vec<DMatrix<f64>> {
    vec![DMatrix::from_element(n, n, 1.0 / n as f64); h]
}

/// Unit-weight path graph on `n` vertices.
pub fn path_weights(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if i.abs_diff(j) == 1 { 1.0 } else { 0.0 })
}

/// Block-diagonal weights with constant weight inside each block.
pub fn block_diagonal_weights(sizes: &[usize], weight: f64) -> DMatrix<f64> {
    let labels = block_labels(sizes);
    let n = labels.len();
    DMatrix::from_fn(n, n, |i, j| if labels[i] == labels[j] { weight } else { 0.0 })
}

/// Row-stochastic attention where each token attends uniformly inside its block.
pub fn block_attention(sizes: &[usize]) -> DMatrix<f64> {
    let labels = block_labels(sizes);
    let n = labels.len();
    DMatrix::from_fn(n, n, |i, j| {
        if labels[i] == labels[j] {
            1.0 / sizes[labels[i]] as f64
        } else {
            0.0
        }
    })
}

fn block_labels(sizes: &[usize]) -> Vec<usize> {
    sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &s)| std::iter::repeat_n(b, s))
        .collect()
}

/// Fills `row` (restricted to `cols`) with positive random weights summing to `mass`.
fn scatter_row(row: &mut [f64], cols: &[usize], mass: f64, rng: &mut impl Rng) {
    let draws: Vec<f64> = cols.iter().map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = draws.iter().sum();
    for (&c, d) in cols.iter().zip(draws) {
        row[c] += mass * d / total;
    }
}

fn from_rows(rows: Vec<Vec<f64>>) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// A head attending with random positive weights to every token.
pub fn dense_head(n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let all: Vec<usize> = (0..n).collect();
    from_rows(
        (0..n)
            .map(|_| {
                let mut row = vec![0.0; n];
                scatter_row(&mut row, &all, 1.0, rng);
                row
            })
            .collect(),
    )
}

/// A head attending mostly inside token blocks, leaking `leak` of each
/// row's mass uniformly at random to other blocks.
pub fn clustered_head(sizes: &[usize], leak: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let labels = block_labels(sizes);
    let n = labels.len();
    from_rows(
        (0..n)
            .map(|i| {
                let inside: Vec<usize> = (0..n).filter(|&j| labels[j] == labels[i]).collect();
                let outside: Vec<usize> = (0..n).filter(|&j| labels[j] != labels[i]).collect();
                let mut row = vec![0.0; n];
                if outside.is_empty() || leak == 0.0 {
                    scatter_row(&mut row, &inside, 1.0, rng);
                } else {
                    scatter_row(&mut row, &inside, 1.0 - leak, rng);
                    scatter_row(&mut row, &outside, leak, rng);
                }
                row
            })
            .collect(),
    )
}

/// Multi-head attention over two token clusters in which only the
/// designated bridge heads attend across clusters.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedBridge {
    pub cluster_sizes: [usize; 2],
    pub num_heads: usize,
    /// Zero-based head indices.
    pub bridge_heads: Vec<usize>,
    /// Fraction of each bridge-head row spent on the other cluster.
    pub bridge_mass: f64,
}

impl Default for PlantedBridge {
    fn default() -> Self {
        Self {
            cluster_sizes: [4, 4],
            num_heads: 32,
            bridge_heads: vec![3, 19, 31],
            bridge_mass: 0.3,
        }
    }
}

impl PlantedBridge {
    pub fn num_tokens(&self) -> usize {
        self.cluster_sizes[0] + self.cluster_sizes[1]
    }

    /// One layer of heads, randomised within clusters by `seed`.
    pub fn layer(&self, seed: u64) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.num_heads)
            .map(|h| {
                let leak = if self.bridge_heads.contains(&h) {
                    self.bridge_mass
                } else {
                    0.0
                };
                clustered_head(&self.cluster_sizes, leak, &mut rng)
            })
            .collect()
    }
}

/// Manifest record with conventional blob names.
pub fn sample_record(
    id: &str,
    language: &str,
    construction: Construction,
    role: Role,
    pair_id: &str,
    token_count: usize,
) -> SampleRecord {
    SampleRecord {
        id: id.to_string(),
        text: format!("synthetic sample {id}"),
        language: language.to_string(),
        construction,
        role,
        pair_id: pair_id.to_string(),
        token_count,
        attention_blob: PathBuf::from(format!("blobs/{id}.attn.f32")),
        hidden_blob: None,
    }
}

/// Assembles an in-memory [`CaptureBundle`] from matrices.
#[derive(Debug)]
pub struct BundleBuilder {
    manifest: CaptureManifest,
    samples: Vec<CapturedSample>,
    errors: Vec<crate::Error>,
}

impl BundleBuilder {
    pub fn new(model_id: &str, num_layers: usize, num_heads: usize, hidden_dim: usize) -> Self {
        Self {
            manifest: CaptureManifest {
                format_version: FORMAT_VERSION.to_string(),
                model_id: model_id.to_string(),
                num_layers,
                num_heads,
                hidden_dim,
                samples: Vec::new(),
            },
            samples: Vec::new(),
            errors: Vec::new(),
        }
    }

    /// `layers[l][h]` is head `h` of zero-based layer `l`; `hidden`, when
    /// given, holds the L+1 stored hidden layers.
    pub fn push(
        &mut self,
        mut record: SampleRecord,
        layers: Vec<Vec<DMatrix<f64>>>,
        hidden: Option<Vec<DMatrix<f64>>>,
    ) -> &mut Self {
        if hidden.is_some() && record.hidden_blob.is_none() {
            record.hidden_blob = Some(PathBuf::from(format!("blobs/{}.hidden.f32", record.id)));
        }
        if hidden.is_none() {
            record.hidden_blob = None;
        }
        let attention = AttentionTensor::from_matrices(&layers);
        let hidden = hidden.map(|h| HiddenTensor::from_matrices(&h)).transpose();
        match (attention, hidden) {
            (Ok(attention), Ok(hidden)) => {
                self.manifest.samples.push(record.clone());
                self.samples.push(CapturedSample {
                    record,
                    attention,
                    hidden,
                });
            }
            (Err(e), _) | (_, Err(e)) => self.errors.push(e),
        }
        self
    }

    pub fn build(&self) -> Result<CaptureBundle> {
        self.build_with(LoadOptions::default())
    }

    pub fn build_with(&self, options: LoadOptions) -> Result<CaptureBundle> {
        if let Some(e) = self.errors.first() {
            return Err(crate::Error::InvalidInput(e.to_string()));
        }
        CaptureBundle::from_parts(self.manifest.clone(), self.samples.clone(), options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_sums_are_one(m: &DMatrix<f64>) -> bool {
        m.row_iter().all(|r| (r.sum() - 1.0).abs() < 1e-12)
    }

    #[test]
    fn generated_heads_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(row_sums_are_one(&dense_head(6, &mut rng)));
        assert!(row_sums_are_one(&clustered_head(&[3, 4], 0.1, &mut rng)));
        assert!(row_sums_are_one(&block_attention(&[2, 3])));
        for h in PlantedBridge::default().layer(7) {
            assert!(row_sums_are_one(&h));
        }
    }

    #[test]
    fn block_heads_never_cross_clusters() {
        let bridge = PlantedBridge::default();
        let heads = bridge.layer(3);
        let [a, _] = bridge.cluster_sizes;
        for (h, m) in heads.iter().enumerate() {
            let cross: f64 = m.view((0, a), (a, bridge.num_tokens() - a)).sum();
            if bridge.bridge_heads.contains(&h) {
                assert!(cross > 0.0);
            } else {
                assert_eq!(cross, 0.0);
            }
        }
    }
}
