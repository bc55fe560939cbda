//! Evaluation metrics over (location × species) prediction tables.
//!
//! Tables are flat row-major slices with one row per location and one column
//! per species. A boolean cell mask selects the scored cells: target species
//! whose ground truth is available at that location.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mann–Whitney AUC with midranks for tied scores. `None` unless both
/// classes are present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie block i..=j shares the mean rank
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

fn check_lengths(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<()> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape {
            op: "metric",
            left: vec![pred.len()],
            right: vec![truth.len(), mask.len()],
        });
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    mean_over(pred, truth, mask, |d| d.abs())
}

pub fn mse(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    mean_over(pred, truth, mask, |d| d * d)
}

fn mean_over(pred: &[f64], truth: &[f64], mask: &[bool], f: impl Fn(f64) -> f64) -> Result<f64> {
    check_lengths(pred, truth, mask)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            sum += f(p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("no scored cells".into()));
    }
    Ok(sum / n as f64)
}

/// Indices of the `k` highest predictions among `candidates`, ties broken
/// by lower species index.
fn top_indices(pred_row: &[f64], candidates: &[usize], k: usize) -> Vec<usize> {
    let mut c = candidates.to_vec();
    c.sort_by(|&a, &b| pred_row[b].total_cmp(&pred_row[a]).then(a.cmp(&b)));
    c.truncate(k);
    c
}

struct TopScore {
    mean_pct: Option<f64>,
    skipped: usize,
}

fn top_generic(pred: &[f64], truth: &[f64], mask: &[bool], n_species: usize, fixed: Option<usize>) -> Result<TopScore> {
    check_lengths(pred, truth, mask)?;
    if n_species == 0 || !pred.len().is_multiple_of(n_species) {
        return Err(Error::Contract(format!(
            "table of {} cells is not a multiple of {n_species} species",
            pred.len()
        )));
    }
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut skipped = 0usize;
    for loc in 0..pred.len() / n_species {
        let row = loc * n_species..(loc + 1) * n_species;
        let (p, t, m) = (&pred[row.clone()], &truth[row.clone()], &mask[row]);
        let candidates: Vec<usize> = (0..n_species).filter(|&c| m[c]).collect();
        let positives = candidates.iter().filter(|&&c| t[c] > 0.0).count();
        if positives == 0 {
            skipped += 1;
            continue;
        }
        let k = fixed.unwrap_or(positives);
        let hits = top_indices(p, &candidates, k)
            .into_iter()
            .filter(|&c| t[c] > 0.0)
            .count();
        total += hits as f64 / k.min(positives) as f64;
        scored += 1;
    }
    Ok(TopScore {
        mean_pct: (scored > 0).then(|| 100.0 * total / scored as f64),
        skipped,
    })
}

/// Adaptive top-k accuracy in percent: per location, k is the number of
/// scored species with non-zero truth. Locations with k = 0 are skipped.
/// Returns `(percent, skipped_locations)`; percent is `None` when every
/// location was skipped.
pub fn topk_adaptive(pred: &[f64], truth: &[f64], mask: &[bool], n_species: usize) -> Result<(Option<f64>, usize)> {
    let s = top_generic(pred, truth, mask, n_species, None)?;
    Ok((s.mean_pct, s.skipped))
}

/// Fixed top-n accuracy in percent, normalized by `min(n, #positives)`.
/// `n_targets` is the number of target species; `n` larger than it is an error.
pub fn topn_fixed(
    pred: &[f64],
    truth: &[f64],
    mask: &[bool],
    n_species: usize,
    n_targets: usize,
    n: usize,
) -> Result<Option<f64>> {
    if n > n_targets {
        return Err(Error::Contract(format!(
            "top-{n} requested with only {n_targets} target species"
        )));
    }
    Ok(top_generic(pred, truth, mask, n_species, Some(n))?.mean_pct)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeciesMetrics {
    pub species: String,
    pub cells: usize,
    pub auc: Option<f64>,
    pub mae: Option<f64>,
    pub mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Macro AUC over species with both classes present, in percent.
    pub auc_pct: Option<f64>,
    pub mae_x100: f64,
    pub mse_x100: f64,
    pub topk_pct: Option<f64>,
    pub top10_pct: Option<f64>,
    pub top30_pct: Option<f64>,
}

/// Per-species and aggregate metrics for one named protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub conditioned: bool,
    pub locations: usize,
    pub per_species: Vec<SpeciesMetrics>,
    pub aggregates: Aggregates,
    pub skipped_auc_species: usize,
    pub skipped_topk_locations: usize,
}

impl EvalReport {
    /// Scores the cells selected by `mask`. `targets` lists the target species
    /// columns; `names` covers every column.
    pub fn compute(
        protocol: &str,
        conditioned: bool,
        names: &[String],
        pred: &[f64],
        truth: &[f64],
        mask: &[bool],
        targets: &[usize],
    ) -> Result<Self> {
        check_lengths(pred, truth, mask)?;
        let n_species = names.len();
        let locations = pred.len() / n_species.max(1);
        let mut per_species = Vec::with_capacity(targets.len());
        let mut aucs = Vec::new();
        let mut skipped_auc = 0;
        for &c in targets {
            let mut s = Vec::new();
            let mut l = Vec::new();
            let (mut abs, mut sq) = (0.0, 0.0);
            for loc in 0..locations {
                let i = loc * n_species + c;
                if mask[i] {
                    s.push(pred[i]);
                    l.push(truth[i] > 0.0);
                    abs += (pred[i] - truth[i]).abs();
                    sq += (pred[i] - truth[i]).powi(2);
                }
            }
            let a = auc(&s, &l);
            match a {
                Some(v) => aucs.push(v),
                None => skipped_auc += 1,
            }
            let n = s.len();
            per_species.push(SpeciesMetrics {
                species: names[c].clone(),
                cells: n,
                auc: a,
                mae: (n > 0).then(|| abs / n as f64),
                mse: (n > 0).then(|| sq / n as f64),
            });
        }
        let (topk, skipped_topk) = topk_adaptive(pred, truth, mask, n_species)?;
        let top_n = |n: usize| -> Result<Option<f64>> {
            if n > targets.len() {
                Ok(None)
            } else {
                topn_fixed(pred, truth, mask, n_species, targets.len(), n)
            }
        };
        let aggregates = Aggregates {
            auc_pct: (!aucs.is_empty()).then(|| 100.0 * aucs.iter().sum::<f64>() / aucs.len() as f64),
            mae_x100: 100.0 * mae(pred, truth, mask)?,
            mse_x100: 100.0 * mse(pred, truth, mask)?,
            topk_pct: topk,
            top10_pct: top_n(10)?,
            top30_pct: top_n(30)?,
        };
        Ok(Self {
            protocol: protocol.to_string(),
            conditioned,
            locations,
            per_species,
            aggregates,
            skipped_auc_species: skipped_auc,
            skipped_topk_locations: skipped_topk,
        })
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

/// Plain-text table: one row per `(label, report)` in the column layout
/// AUC (%) | MAE [×10²] | MSE [×10²] | Top-k (%) | Top-10 (%) | Top-30 (%).
pub fn format_table(rows: &[(String, &EvalReport)]) -> String {
    let mut out = format!(
        "{:<28} {:>8} {:>10} {:>10} {:>9} {:>10} {:>10}\n",
        "Model", "AUC(%)", "MAE[x100]", "MSE[x100]", "Top-k(%)", "Top-10(%)", "Top-30(%)"
    );
    for (label, r) in rows {
        let a = &r.aggregates;
        out.push_str(&format!(
            "{:<28} {:>8} {:>10.2} {:>10.2} {:>9} {:>10} {:>10}\n",
            label,
            cell(a.auc_pct),
            a.mae_x100,
            a.mse_x100,
            cell(a.topk_pct),
            cell(a.top10_pct),
            cell(a.top30_pct)
        ));
    }
    out
}
