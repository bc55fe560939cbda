use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{state_of, Rows};
use crate::dataio::{Dataset, LocationRecord, NormStats, Split};
use crate::encoding::SpeciesState;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::Model;

/// Which species are revealed and which are scored, on which split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub name: String,
    pub condition: Vec<usize>,
    pub targets: Vec<usize>,
    pub split: Split,
}

impl EvalProtocol {
    pub fn new(name: &str, condition: Vec<usize>, targets: Vec<usize>, split: Split) -> Result<Self> {
        if let Some(c) = condition.iter().find(|c| targets.contains(c)) {
            return Err(Error::Contract(format!(
                "protocol `{name}` both reveals and scores species {c}"
            )));
        }
        if targets.is_empty() {
            return Err(Error::Contract(format!("protocol `{name}` scores no species")));
        }
        Ok(Self {
            name: name.to_string(),
            condition,
            targets,
            split,
        })
    }

    /// Scores every species without revealing any.
    pub fn unconditioned(name: &str, n_species: usize, split: Split) -> Result<Self> {
        Self::new(name, Vec::new(), (0..n_species).collect(), split)
    }

    /// Builds the masks from named species groups. Empty `targets` means
    /// every species not revealed.
    pub fn from_groups(
        ds: &Dataset,
        name: &str,
        condition: &[String],
        targets: &[String],
        split: Split,
    ) -> Result<Self> {
        let union = |groups: &[String]| -> Result<Vec<bool>> {
            let mut m = vec![false; ds.n_species()];
            for g in groups {
                for (c, &v) in ds.group(g)?.iter().enumerate() {
                    m[c] |= v;
                }
            }
            Ok(m)
        };
        let cond = union(condition)?;
        let tgt = if targets.is_empty() {
            cond.iter().map(|&c| !c).collect()
        } else {
            union(targets)?
        };
        let pick = |m: &[bool]| (0..m.len()).filter(|&i| m[i]).collect::<Vec<_>>();
        Self::new(name, pick(&cond), pick(&tgt), split)
    }

    pub fn is_conditioned(&self) -> bool {
        !self.condition.is_empty()
    }
}

/// Report plus the raw predictions it was computed from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Dataset record indices, one per prediction row.
    pub records: Vec<usize>,
    pub predictions: Vec<Vec<f64>>,
    /// Cells that entered the metrics, row-major like `predictions`.
    pub scored: Vec<Vec<bool>>,
}

fn check_inputs(model: &Model, norm: &NormStats, n_species: usize) -> Result<()> {
    if model.spec.n_env != norm.n_out() {
        return Err(Error::Schema(format!(
            "model expects {} env variables, normalization provides {}",
            model.spec.n_env,
            norm.n_out()
        )));
    }
    if model.spec.n_species != n_species {
        return Err(Error::Schema(format!(
            "model has {} species, dataset has {n_species}",
            model.spec.n_species
        )));
    }
    Ok(())
}

/// Revealed states for one record: condition species at their observed value
/// when available, everything else Unknown.
fn reveal(model: &Model, record: &LocationRecord, condition: &[usize], n_species: usize) -> Result<Vec<SpeciesState>> {
    let mut st = vec![SpeciesState::Unknown; n_species];
    if record.targets.len() != n_species {
        return Ok(st);
    }
    for &c in condition {
        if record.available[c] {
            st[c] = state_of(record.targets[c], model.spec.encoding)?;
        }
    }
    Ok(st)
}

pub fn evaluate(model: &Model, norm: &NormStats, ds: &Dataset, protocol: &EvalProtocol) -> Result<Evaluation> {
    let c = ds.n_species();
    check_inputs(model, norm, c)?;
    if let Some(&bad) = protocol.condition.iter().chain(&protocol.targets).find(|&&s| s >= c) {
        return Err(Error::Contract(format!("protocol species index {bad} out of range")));
    }
    let idx = ds.indices(protocol.split)?;
    if idx.is_empty() {
        return Err(Error::Split(format!("{} split is empty", protocol.split.as_str())));
    }
    let rows = Rows::build(ds, norm, &idx);
    let mut states = Vec::with_capacity(idx.len() * c);
    for &i in &idx {
        states.extend(reveal(model, &ds.records[i], &protocol.condition, c)?);
    }
    let predictions = model.predict(&rows.env, Some(&states))?;
    let is_target: Vec<bool> = (0..c).map(|s| protocol.targets.contains(&s)).collect();
    let scored: Vec<Vec<bool>> = rows
        .available
        .iter()
        .map(|a| (0..c).map(|s| a[s] && is_target[s]).collect())
        .collect();
    let pred: Vec<f64> = predictions.iter().flatten().copied().collect();
    let truth: Vec<f64> = rows.targets.iter().flatten().copied().collect();
    let mask: Vec<bool> = scored.iter().flatten().copied().collect();
    let report = EvalReport::compute(
        &protocol.name,
        protocol.is_conditioned(),
        &ds.species,
        &pred,
        &truth,
        &mask,
        &protocol.targets,
    )?;
    Ok(Evaluation {
        report,
        records: idx,
        predictions,
        scored,
    })
}

pub fn write_predictions_csv(path: &Path, ds: &Dataset, eval: &Evaluation) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id", "species", "prediction", "truth", "scored"])?;
    for (row, &i) in eval.records.iter().enumerate() {
        let r = &ds.records[i];
        for (s, name) in ds.species.iter().enumerate() {
            let truth = if r.available[s] {
                r.targets[s].to_string()
            } else {
                String::new()
            };
            w.write_record([
                r.id.as_str(),
                name.as_str(),
                &eval.predictions[row][s].to_string(),
                &truth,
                if eval.scored[row][s] { "1" } else { "0" },
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub species: String,
    /// Mean of conditioned minus unconditioned prediction.
    pub mean_delta: f64,
    pub locations: usize,
    /// The target is the revealed source itself.
    pub revealed: bool,
}

/// Mean change in each target's prediction when the source species' observed
/// state is revealed, over `split` locations where the source is present.
pub fn conditioning_delta(
    model: &Model,
    norm: &NormStats,
    ds: &Dataset,
    source: usize,
    targets: &[usize],
    split: Split,
) -> Result<Vec<DeltaRow>> {
    let c = ds.n_species();
    check_inputs(model, norm, c)?;
    if source >= c {
        return Err(Error::Contract(format!("source index {source} out of range")));
    }
    let idx: Vec<usize> = ds
        .indices(split)?
        .into_iter()
        .filter(|&i| ds.records[i].available[source] && ds.records[i].targets[source] > 0.0)
        .collect();
    if idx.is_empty() {
        return Err(Error::Contract(format!(
            "species `{}` has no positive {} locations",
            ds.species[source],
            split.as_str()
        )));
    }
    let rows = Rows::build(ds, norm, &idx);
    let mut states = Vec::with_capacity(idx.len() * c);
    for &i in &idx {
        states.extend(reveal(model, &ds.records[i], &[source], c)?);
    }
    let base = model.predict(&rows.env, None)?;
    let cond = model.predict(&rows.env, Some(&states))?;
    Ok(targets
        .iter()
        .map(|&t| {
            let sum: f64 = base.iter().zip(&cond).map(|(b, k)| k[t] - b[t]).sum();
            DeltaRow {
                species: ds.species[t].clone(),
                mean_delta: sum / idx.len() as f64,
                locations: idx.len(),
                revealed: t == source,
            }
        })
        .collect())
}

pub fn write_delta_csv(path: &Path, source: &str, rows: &[DeltaRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "species", "mean_delta", "locations", "revealed"])?;
    for r in rows {
        w.write_record([
            source,
            r.species.as_str(),
            &r.mean_delta.to_string(),
            &r.locations.to_string(),
            if r.revealed { "1" } else { "0" },
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapRow {
    pub lat: f64,
    pub lon: f64,
    pub species: String,
    pub prediction: f64,
}

/// Predictions for every grid cell and species. Species in `condition` are
/// revealed where the grid record carries an observation for them.
pub fn predict_map(
    model: &Model,
    norm: &NormStats,
    species: &[String],
    grid: &[LocationRecord],
    condition: &[usize],
) -> Result<Vec<MapRow>> {
    let c = species.len();
    check_inputs(model, norm, c)?;
    let env: Vec<Vec<f64>> = grid.iter().map(|r| norm.apply(&r.env)).collect();
    if env.is_empty() {
        return Ok(Vec::new());
    }
    let mut states = Vec::with_capacity(grid.len() * c);
    for r in grid {
        states.extend(reveal(model, r, condition, c)?);
    }
    let pred = model.predict(&env, Some(&states))?;
    let mut out = Vec::with_capacity(grid.len() * c);
    for (r, p) in grid.iter().zip(&pred) {
        for (s, name) in species.iter().enumerate() {
            out.push(MapRow {
                lat: r.lat,
                lon: r.lon,
                species: name.clone(),
                prediction: p[s],
            });
        }
    }
    Ok(out)
}

pub fn write_map_csv(path: &Path, rows: &[MapRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
