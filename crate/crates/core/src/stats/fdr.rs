// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdrOutcome {
    /// In input order.
    pub reject: Vec<bool>,
    /// BH-adjusted p-values in input order.
    pub adjusted: Vec<f64>,
}

/// Benjamini–Hochberg step-up procedure at level `q`.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<FdrOutcome> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable: ties keep input order.
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]));

    let mut cutoff = 0;
    for (rank, &idx) in order.iter().enumerate() {
        if p_values[idx] <= (rank + 1) as f64 * q / m as f64 {
            cutoff = rank + 1;
        }
    }
    let mut reject = vec![false; m];
    for &idx in &order[..cutoff] {
        reject[idx] = true;
    }

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        running = running.min(p_values[idx] * m as f64 / (rank + 1) as f64);
        adjusted[idx] = running.max(p_values[idx]);
    }
    Ok(FdrOutcome { reject, adjusted })
}
