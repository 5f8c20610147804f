// SPDX-License-Identifier: MIT OR Apache-2.0

//! Independent oracles for integration tests. Nothing here calls the
//! library's numerical code.

#![allow(dead_code, clippy::needless_range_loop)]

use rand::Rng;

/// Dense row-major symmetric matrix.
pub type Dense = Vec<Vec<f64>>;

/// Cyclic Jacobi eigenvalues of a symmetric matrix, ascending.
pub fn jacobi_eigenvalues(a: &Dense) -> Vec<f64> {
    let n = a.len();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    ev.sort_by(f64::total_cmp);
    ev
}

/// `D − W`, ignoring the diagonal of `W`.
pub fn laplacian(w: &Dense) -> Dense {
    let n = w.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l[i][j] = -w[i][j];
                l[i][i] += w[i][j];
            }
        }
    }
    l
}

/// `I − D^{-1/2} W D^{-1/2}` with degrees including the diagonal.
pub fn symmetric_laplacian(w: &Dense) -> Option<Dense> {
    let n = w.len();
    let d: Vec<f64> = w.iter().map(|r| r.iter().sum()).collect();
    if d.iter().any(|&x| x <= 0.0) {
        return None;
    }
    Some(
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let v = w[i][j] / (d[i] * d[j]).sqrt();
                        if i == j {
                            1.0 - v
                        } else {
                            -v
                        }
                    })
                    .collect()
            })
            .collect(),
    )
}

pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.parent[r] != r {
            r = self.parent[r];
        }
        let mut c = x;
        while self.parent[c] != r {
            let next = self.parent[c];
            self.parent[c] = r;
            c = next;
        }
        r
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Whether the off-diagonal support of `w` is connected.
pub fn connected(w: &Dense) -> bool {
    let n = w.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in 0..n {
            if i != j && w[i][j] > 0.0 {
                uf.union(i, j);
            }
        }
    }
    let root = uf.find(0);
    (1..n).all(|i| uf.find(i) == root)
}

/// Symmetric non-negative matrix; each off-diagonal pair is present with
/// probability `density`, weights uniform in [0.05, 1).
pub fn random_symmetric(n: usize, density: f64, rng: &mut impl Rng) -> Dense {
    let mut w = vec![vec![0.0; n]; n];
    for i in 0..n {
        if rng.random_bool(0.5) {
            w[i][i] = rng.random_range(0.0..1.0);
        }
        for j in 0..i {
            if rng.random_bool(density) {
                let v = rng.random_range(0.05..1.0);
                w[i][j] = v;
                w[j][i] = v;
            }
        }
    }
    w
}

pub fn to_nalgebra(w: &Dense) -> spectral_scope::nalgebra::DMatrix<f64> {
    let n = w.len();
    spectral_scope::nalgebra::DMatrix::from_fn(n, n, |i, j| w[i][j])
}

/// λ₂ of `D − W` by the oracle eigensolver.
pub fn oracle_fiedler(w: &Dense) -> f64 {
    jacobi_eigenvalues(&laplacian(w))[1]
}

/// Exhaustive two-sided sign-flip p-value on integer deltas, exact.
pub fn exhaustive_p_int(deltas: &[i64]) -> (u64, u64) {
    let n = deltas.len();
    let observed: i64 = deltas.iter().sum::<i64>().abs();
    let total = 1u64 << n;
    let hits = (0..total)
        .filter(|mask| {
            let s: i64 = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            s.abs() >= observed
        })
        .count() as u64;
    (hits, total)
}

/// Exhaustive two-sided sign-flip p-value on real deltas with a relative
/// tie tolerance.
pub fn exhaustive_p_real(deltas: &[f64]) -> (u64, u64) {
    let n = deltas.len();
    let scale: f64 = deltas.iter().map(|d| d.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    let observed = deltas.iter().sum::<f64>().abs();
    let total = 1u64 << n;
    let hits = (0..total)
        .filter(|mask| {
            let s: f64 = deltas
                .iter()
                .enumerate()
                .map(|(i, d)| if mask >> i & 1 == 1 { -d } else { *d })
                .sum();
            s.abs() >= observed - 1e-9 * scale
        })
        .count() as u64;
    (hits, total)
}
