//! Asymmetric geospatial co-location of two datasets: each location of
//! dataset A takes the species vector of its nearest dataset-B location
//! within a great-circle radius.

mod balltree;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, LocationRecord, Split, TargetKind};
use crate::error::{Error, Result};

pub use balltree::{BallTree, GeoPoint};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Great-circle distance in kilometres between two `(lat, lon)` degree pairs.
pub fn haversine_km(p: (f64, f64), q: (f64, f64)) -> f64 {
    let (lat1, lon1) = (p.0.to_radians(), p.1.to_radians());
    let (lat2, lon2) = (q.0.to_radians(), q.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoLocation {
    pub a_id: String,
    pub b_id: String,
    pub a_index: usize,
    pub b_index: usize,
    pub distance_km: f64,
}

fn points(records: &[LocationRecord]) -> Vec<GeoPoint> {
    records
        .iter()
        .map(|r| GeoPoint {
            id: r.id.clone(),
            lat: r.lat,
            lon: r.lon,
        })
        .collect()
}

/// For each A location (in A order), the closest B location within
/// `radius_km` (closed ball). Ties go to the smaller B id.
pub fn colocate(a: &Dataset, b: &Dataset, radius_km: f64) -> Vec<CoLocation> {
    colocate_points(&points(&a.records), &points(&b.records), radius_km)
}

pub fn colocate_points(a: &[GeoPoint], b: &[GeoPoint], radius_km: f64) -> Vec<CoLocation> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let tree = BallTree::build(b.to_vec());
    a.iter()
        .enumerate()
        .filter_map(|(ai, p)| {
            tree.nearest_within((p.lat, p.lon), radius_km)
                .map(|(bi, d)| CoLocation {
                    a_id: p.id.clone(),
                    b_id: b[bi].id.clone(),
                    a_index: ai,
                    b_index: bi,
                    distance_km: d,
                })
        })
        .collect()
}

/// Builds the combined dataset: roster is A's species followed by B's.
/// Paired A records carry B's targets verbatim; unpaired ones have B
/// unavailable. Validation and test keep only paired A records. When
/// `include_b_train` is set, B training records that no A record claimed are
/// added with A's species unavailable. Two groups named `a_label` and
/// `b_label` mark each side's species.
pub fn attach(
    a: &Dataset,
    b: &Dataset,
    pairs: &[CoLocation],
    labels: (&str, &str),
    include_b_train: bool,
) -> Result<Dataset> {
    let a_names: BTreeSet<&String> = a.species.iter().collect();
    if let Some(dup) = b.species.iter().find(|s| a_names.contains(s)) {
        return Err(Error::Schema(format!("species `{dup}` appears in both datasets")));
    }
    if a.n_env() != b.n_env() && include_b_train {
        return Err(Error::Schema("datasets disagree on environmental variables".into()));
    }
    let (na, nb) = (a.n_species(), b.n_species());
    let mut paired: Vec<Option<&CoLocation>> = vec![None; a.records.len()];
    for p in pairs {
        if p.a_index >= a.records.len() || p.b_index >= b.records.len() {
            return Err(Error::Contract(format!("pair {}→{} out of range", p.a_id, p.b_id)));
        }
        paired[p.a_index] = Some(p);
    }

    let mut records = Vec::new();
    let mut tags = Vec::new();
    for (i, r) in a.records.iter().enumerate() {
        let tag = a.split.as_ref().map(|s| s[i]);
        if paired[i].is_none() && matches!(tag, Some(Split::Val | Split::Test)) {
            continue;
        }
        let mut rec = r.clone();
        match paired[i] {
            Some(p) => {
                let br = &b.records[p.b_index];
                rec.targets.extend_from_slice(&br.targets);
                rec.available.extend_from_slice(&br.available);
            }
            None => {
                rec.targets.extend(std::iter::repeat_n(0.0, nb));
                rec.available.extend(std::iter::repeat_n(false, nb));
            }
        }
        records.push(rec);
        tags.push(tag.unwrap_or(Split::Train));
    }

    if include_b_train {
        let used: BTreeSet<usize> = pairs.iter().map(|p| p.b_index).collect();
        let b_tags = b
            .split
            .as_ref()
            .ok_or_else(|| Error::Split("dataset B has no split tags".into()))?;
        let a_ids: BTreeSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
        let mut extra = Vec::new();
        for (j, r) in b.records.iter().enumerate() {
            if b_tags[j] != Split::Train || used.contains(&j) {
                continue;
            }
            let id = if a_ids.contains(r.id.as_str()) {
                format!("{}:{}", labels.1, r.id)
            } else {
                r.id.clone()
            };
            let mut targets = vec![0.0; na];
            targets.extend_from_slice(&r.targets);
            let mut available = vec![false; na];
            available.extend_from_slice(&r.available);
            extra.push(LocationRecord {
                id,
                lat: r.lat,
                lon: r.lon,
                env: r.env.clone(),
                targets,
                available,
            });
        }
        tags.extend(std::iter::repeat_n(Split::Train, extra.len()));
        records.extend(extra);
    }

    let mut groups = std::collections::BTreeMap::new();
    for (g, m) in &a.groups {
        let mut v = m.clone();
        v.extend(std::iter::repeat_n(false, nb));
        groups.insert(g.clone(), v);
    }
    for (g, m) in &b.groups {
        let mut v = vec![false; na];
        v.extend_from_slice(m);
        groups.insert(g.clone(), v);
    }
    let side = |first: bool| -> Vec<bool> { (0..na + nb).map(|c| (c < na) == first).collect() };
    groups.insert(labels.0.to_string(), side(true));
    groups.insert(labels.1.to_string(), side(false));

    let kind = if a.kind == TargetKind::Binary && b.kind == TargetKind::Binary {
        TargetKind::Binary
    } else {
        TargetKind::Rate
    };
    let ds = Dataset {
        species: a.species.iter().chain(&b.species).cloned().collect(),
        env_names: a.env_names.clone(),
        groups,
        kind,
        records,
        split: (a.split.is_some() || include_b_train).then_some(tags),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes `a_id,b_id,distance_km`.
pub fn write_pairs(path: &std::path::Path, pairs: &[CoLocation]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["a_id", "b_id", "distance_km"])?;
    for p in pairs {
        w.write_record([p.a_id.as_str(), p.b_id.as_str(), &format!("{}", p.distance_km)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
