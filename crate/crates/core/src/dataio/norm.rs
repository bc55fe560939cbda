use serde::{Deserialize, Serialize};

use super::LocationRecord;
use crate::error::{Error, Result};

const MIN_STD: f64 = 1e-12;

/// Train-split normalization statistics for the environmental variables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    /// Indices of retained variables in the raw env vector.
    pub kept: Vec<usize>,
    /// Raw indices dropped for zero variance.
    pub dropped: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Missing cells seen per retained variable in the fitting rows.
    pub imputed: Vec<usize>,
}

/// Fits mean and population standard deviation per variable over `rows`,
/// ignoring missing (`NaN`) cells. Zero-variance variables are dropped.
pub fn fit_norm(records: &[LocationRecord], rows: &[usize], names: &[String]) -> Result<NormStats> {
    if rows.is_empty() {
        return Err(Error::Contract("cannot fit normalization on zero rows".into()));
    }
    let n_env = names.len();
    let mut stats = NormStats {
        names: Vec::new(),
        kept: Vec::new(),
        dropped: Vec::new(),
        mean: Vec::new(),
        std: Vec::new(),
        imputed: Vec::new(),
    };
    for v in 0..n_env {
        let vals: Vec<f64> = rows
            .iter()
            .map(|&i| records[i].env[v])
            .filter(|x| !x.is_nan())
            .collect();
        let missing = rows.len() - vals.len();
        if vals.is_empty() {
            stats.dropped.push(v);
            continue;
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let std = var.sqrt();
        if std < MIN_STD {
            stats.dropped.push(v);
            continue;
        }
        stats.names.push(names[v].clone());
        stats.kept.push(v);
        stats.mean.push(mean);
        stats.std.push(std);
        stats.imputed.push(missing);
    }
    if !stats.dropped.is_empty() {
        log::info!("normalization dropped {} constant variables", stats.dropped.len());
    }
    Ok(stats)
}

impl NormStats {
    pub fn n_out(&self) -> usize {
        self.kept.len()
    }

    /// `(x − mean) / std` on retained variables; missing cells take the train mean (→ 0).
    pub fn apply(&self, env: &[f64]) -> Vec<f64> {
        self.kept
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                let x = env[v];
                if x.is_nan() {
                    0.0
                } else {
                    (x - self.mean[j]) / self.std[j]
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(cols: &[&[f64]]) -> Vec<LocationRecord> {
        (0..cols[0].len())
            .map(|i| LocationRecord {
                id: i.to_string(),
                lat: 0.0,
                lon: 0.0,
                env: cols.iter().map(|c| c[i]).collect(),
                targets: vec![],
                available: vec![],
            })
            .collect()
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("env_{i}")).collect()
    }

    #[test]
    fn zero_two_maps_to_minus_one_one() {
        let r = recs(&[&[0.0, 2.0], &[5.0, 5.0]]);
        let s = fit_norm(&r, &[0, 1], &names(2)).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        assert_eq!(s.dropped, vec![1]);
        assert_eq!(s.apply(&r[0].env), vec![-1.0]);
        assert_eq!(s.apply(&r[1].env), vec![1.0]);
    }

    #[test]
    fn held_out_rows_use_train_stats() {
        let r = recs(&[&[0.0, 2.0, 100.0]]);
        let s = fit_norm(&r, &[0, 1], &names(1)).unwrap();
        assert_eq!(s.apply(&r[2].env), vec![99.0]);
    }

    #[test]
    fn missing_imputed_to_mean() {
        let r = recs(&[&[0.0, f64::NAN, 2.0]]);
        let s = fit_norm(&r, &[0, 1, 2], &names(1)).unwrap();
        assert_eq!(s.imputed, vec![1]);
        assert_eq!(s.apply(&r[1].env), vec![0.0]);
    }

    #[test]
    fn refit_after_apply_is_standard() {
        let r = recs(&[&[3.0, 7.0, -1.0, 4.5, 10.0]]);
        let rows: Vec<usize> = (0..5).collect();
        let s = fit_norm(&r, &rows, &names(1)).unwrap();
        let normed: Vec<LocationRecord> = r
            .iter()
            .map(|x| LocationRecord {
                env: s.apply(&x.env),
                ..x.clone()
            })
            .collect();
        let s2 = fit_norm(&normed, &rows, &names(1)).unwrap();
        assert!(s2.mean[0].abs() < 1e-9 && (s2.std[0] - 1.0).abs() < 1e-9);
    }
}
