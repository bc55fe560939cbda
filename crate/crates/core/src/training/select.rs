use serde::{Deserialize, Serialize};

use crate::metrics::EvalReport;

/// Validation metric for one species group under the dual rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMetric {
    Topk,
    Auc,
}

impl SelectMetric {
    pub fn of(self, report: &EvalReport) -> Option<f64> {
        match self {
            SelectMetric::Topk => report.aggregates.topk_pct,
            SelectMetric::Auc => report.aggregates.auc_pct,
        }
    }
}

/// Strictly better on both metrics at once.
pub(crate) fn dual_improves(a: Option<f64>, b: Option<f64>, inc_a: Option<f64>, inc_b: Option<f64>) -> bool {
    match (a, b, inc_a, inc_b) {
        (Some(a), Some(b), Some(ia), Some(ib)) => a > ia && b > ib,
        (Some(a), Some(b), None, None) => a.is_finite() && b.is_finite(),
        _ => false,
    }
}

/// Epoch kept by the dual-dataset rule, given per-epoch validation metrics
/// for datasets A and B (index 0 is the initial incumbent). A later epoch
/// replaces the incumbent only when it is strictly better on both.
pub fn select_checkpoint_dual(history_a: &[f64], history_b: &[f64]) -> usize {
    let n = history_a.len().min(history_b.len());
    let mut best = 0;
    for e in 1..n {
        if dual_improves(
            Some(history_a[e]),
            Some(history_b[e]),
            Some(history_a[best]),
            Some(history_b[best]),
        ) {
            best = e;
        }
    }
    best
}
