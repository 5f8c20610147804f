// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic workloads shared by the benchmarks.

use spectral_scope::fixtures::PlantedBridge;
use spectral_scope::nalgebra::DMatrix;

/// One layer of `heads` heads over `tokens` tokens, two clusters joined by
/// a few bridge heads.
pub fn layer(heads: usize, tokens: usize, seed: u64) -> Vec<DMatrix<f64>> {
    let fx = PlantedBridge {
        cluster_sizes: [tokens / 2, tokens - tokens / 2],
        num_heads: heads,
        bridge_heads: (0..heads).step_by(8).collect(),
        bridge_mass: 0.3,
    };
    fx.layer(seed)
}
