// SPDX-License-Identifier: MIT OR Apache-2.0

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::{compensated_sum, mean, require_finite, ResamplingConfig, TestResult};
use crate::error::{Error, Result};

/// Pearson r with a Fisher-z confidence interval and a two-sided t-test p.
pub fn pearson_r_ci(x: &[f64], y: &[f64], cfg: &ResamplingConfig) -> Result<TestResult> {
    cfg.validate()?;
    require_finite(x, "x")?;
    require_finite(y, "y")?;
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!(
            "correlation inputs differ in length ({} vs {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidInput("correlation needs at least 3 points".into()));
    }
    let (mx, my) = (mean(x), mean(y));
    let sxy = compensated_sum(x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)));
    let sxx = compensated_sum(x.iter().map(|a| (a - mx) * (a - mx)));
    let syy = compensated_sum(y.iter().map(|b| (b - my) * (b - my)));
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("correlation undefined for constant input".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);

    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };

    let ci = if r.abs() == 1.0 {
        (r, r)
    } else if n == 3 {
        (-1.0, 1.0)
    } else {
        let z = r.atanh();
        let se = 1.0 / ((n - 3) as f64).sqrt();
        let crit = Normal::standard().inverse_cdf(0.5 + cfg.ci_level / 2.0);
        ((z - crit * se).tanh(), (z + crit * se).tanh())
    };

    Ok(TestResult {
        statistic: r,
        p_value,
        p_adjusted: None,
        ci: Some(ci),
        effect_size_g: None,
        effect_size_d: None,
        method: "pearson r, fisher-z interval".into(),
        exhaustive: false,
    })
}
