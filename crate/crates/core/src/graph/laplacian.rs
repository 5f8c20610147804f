// SPDX-License-Identifier: MIT OR Apache-2.0

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::TokenGraph;
use crate::error::{Error, Result};

/// Spectral gaps below this make the Fiedler vector non-unique.
pub const DEGENERATE_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaplacianVariant {
    /// `L = D − W`.
    #[default]
    Combinatorial,
    /// `I − D⁻¹W`, diagonalised through its similar symmetric form.
    RandomWalk,
    /// `I − D^{-1/2} W D^{-1/2}`.
    Symmetric,
}

/// Ascending eigen-decomposition of a token graph's Laplacian.
///
/// Eigenvalues are indexed 1-based in documentation (λ₁ ≤ λ₂ ≤ …); in code
/// `eigenvalues[1]` is the Fiedler value. For both normalised variants the
/// eigenvectors are those of the symmetric form, so they stay orthonormal.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSpectrum {
    pub variant: LaplacianVariant,
    pub eigenvalues: Vec<f64>,
    /// Columns aligned with `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// λ₃ − λ₂; infinite when N = 2.
    pub spectral_gap: f64,
    /// `D − W` of the source graph, used for Dirichlet energies whatever
    /// the variant.
    pub combinatorial: DMatrix<f64>,
}

impl LaplacianSpectrum {
    pub fn num_tokens(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn fiedler_value(&self) -> f64 {
        self.eigenvalues[1]
    }

    pub fn fiedler_vector(&self) -> nalgebra::DVectorView<'_, f64> {
        self.eigenvectors.column(1)
    }

    /// Distance from λ₂ to its nearest neighbour, min(λ₂ − λ₁, λ₃ − λ₂).
    pub fn fiedler_separation(&self) -> f64 {
        (self.eigenvalues[1] - self.eigenvalues[0]).min(self.spectral_gap)
    }

    /// Whether λ₂ is simple at the given gap tolerance.
    pub fn fiedler_is_simple(&self, tolerance: f64) -> bool {
        self.fiedler_separation() > tolerance
    }
}

/// `D − W` with the diagonal of `W` ignored, so self-loops cancel exactly.
pub fn combinatorial_laplacian(w: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut degree = 0.0;
        for j in 0..n {
            if i != j {
                degree += w[(i, j)];
                l[(i, j)] = -w[(i, j)];
            }
        }
        l[(i, i)] = degree;
    }
    l
}

fn normalized_laplacian(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = w.nrows();
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d: f64 = w.row(i).sum();
        if !(d > 0.0) {
            return Err(Error::Degenerate(format!(
                "vertex {i} has zero degree; normalised Laplacian undefined"
            )));
        }
        inv_sqrt.push(1.0 / d.sqrt());
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let scaled = w[(i, j)] * (inv_sqrt[i] * inv_sqrt[j]);
        if i == j {
            1.0 - scaled
        } else {
            -scaled
        }
    }))
}

pub fn build_laplacian(g: &TokenGraph, variant: LaplacianVariant) -> Result<LaplacianSpectrum> {
    let n = g.num_tokens();
    if n < 2 {
        return Err(Error::InvalidInput(format!("graph has {n} token(s); need at least 2")));
    }
    let combinatorial = combinatorial_laplacian(&g.weights);
    let operator = match variant {
        LaplacianVariant::Combinatorial => combinatorial.clone(),
        LaplacianVariant::RandomWalk | LaplacianVariant::Symmetric => {
            normalized_laplacian(&g.weights)?
        }
    };
    let eig = SymmetricEigen::new(operator);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    // The operator is positive semi-definite; round-off below zero is clamped.
    let eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k].max(0.0)).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        // First component of largest magnitude is made positive.
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        eigenvectors.set_column(dst, &col);
    }
    let spectral_gap = if n > 2 {
        eigenvalues[2] - eigenvalues[1]
    } else {
        f64::INFINITY
    };
    Ok(LaplacianSpectrum {
        variant,
        eigenvalues,
        eigenvectors,
        spectral_gap,
        combinatorial,
    })
}
