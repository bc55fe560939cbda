//! Maxent feature expansion: linear, quadratic, hinge, threshold and
//! pairwise product features over normalized environmental variables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxentConfig {
    /// Hinge knots sit at `lo + k (hi − lo) / n_hinge_knots` for
    /// `k = 1..n_hinge_knots`, strictly inside the range. Each knot gives one
    /// forward and one reverse hinge.
    pub n_hinge_knots: usize,
    /// Interior thresholds per variable at `lo + k (hi − lo) / (n + 1)`.
    pub n_thresholds: usize,
    /// Input indices of variables with a non-degenerate train range.
    pub kept: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Default for MaxentConfig {
    fn default() -> Self {
        Self {
            n_hinge_knots: 10,
            n_thresholds: 10,
            kept: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        }
    }
}

/// Fits per-variable train ranges. Constant variables are excluded.
pub fn fit_maxent(rows: &[Vec<f64>], n_hinge_knots: usize, n_thresholds: usize) -> Result<MaxentConfig> {
    if n_hinge_knots < 2 {
        return Err(Error::Config("need at least two hinge knots".into()));
    }
    let n_env = rows.first().map_or(0, Vec::len);
    let mut cfg = MaxentConfig {
        n_hinge_knots,
        n_thresholds,
        ..Default::default()
    };
    for v in 0..n_env {
        let (lo, hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
            (lo.min(r[v]), hi.max(r[v]))
        });
        if hi > lo {
            cfg.kept.push(v);
            cfg.lo.push(lo);
            cfg.hi.push(hi);
        }
    }
    Ok(cfg)
}

impl MaxentConfig {
    pub fn features_per_variable(&self) -> usize {
        2 + 2 * (self.n_hinge_knots - 1) + self.n_thresholds
    }

    pub fn n_features(&self) -> usize {
        let d = self.kept.len();
        d * self.features_per_variable() + d * d.saturating_sub(1) / 2
    }

    fn knot(&self, j: usize, k: usize) -> f64 {
        self.lo[j] + (self.hi[j] - self.lo[j]) * k as f64 / self.n_hinge_knots as f64
    }

    pub fn threshold(&self, j: usize, k: usize) -> f64 {
        self.lo[j] + (self.hi[j] - self.lo[j]) * k as f64 / (self.n_thresholds + 1) as f64
    }

    /// Expands one normalized env vector. Inputs are clamped to the train range first.
    pub fn expand(&self, x: &[f64]) -> Vec<f64> {
        let d = self.kept.len();
        let v: Vec<f64> = self
            .kept
            .iter()
            .enumerate()
            .map(|(j, &i)| x[i].clamp(self.lo[j], self.hi[j]))
            .collect();
        let mut out = Vec::with_capacity(self.n_features());
        for j in 0..d {
            let (lo, hi, vj) = (self.lo[j], self.hi[j], v[j]);
            out.push(vj);
            out.push(vj * vj);
            for k in 1..self.n_hinge_knots {
                let t = self.knot(j, k);
                out.push(((vj - t) / (hi - t)).clamp(0.0, 1.0));
            }
            for k in 1..self.n_hinge_knots {
                let t = self.knot(j, k);
                out.push(((t - vj) / (t - lo)).clamp(0.0, 1.0));
            }
            for k in 1..=self.n_thresholds {
                out.push(if vj > self.threshold(j, k) { 1.0 } else { 0.0 });
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                out.push(v[i] * v[j]);
            }
        }
        out
    }
}
