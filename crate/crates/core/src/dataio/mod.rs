//! Dataset schema, CSV ingestion, species-name merging, spatial splits and
//! environmental normalization.

mod csvio;
mod fuzzy;
mod norm;
mod split;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use csvio::{config_of, load_dataset, read_config, write_bundle, write_dataset, LoadSummary};
pub use fuzzy::{fuzzy_merge_species, indel_similarity, MergeProposal};
pub use norm::{fit_norm, NormStats};
pub use split::{assign_blocks, block_of, spatial_block_split, SplitFile, SplitFractions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Binary presence/absence or continuous encounter rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Binary,
    Rate,
}

/// One site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationRecord {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Raw environmental values; `NaN` marks a missing cell until imputation.
    pub env: Vec<f64>,
    /// Per-species target in `[0, 1]`; meaningful only where `available`.
    pub targets: Vec<f64>,
    pub available: Vec<bool>,
}

impl LocationRecord {
    pub fn n_available(&self) -> usize {
        self.available.iter().filter(|&&a| a).count()
    }
}

/// Sidecar JSON describing roster order, species groups and target kind.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Canonical roster order. When absent, header order is used.
    #[serde(default)]
    pub species: Option<Vec<String>>,
    /// Named species groups, e.g. `{"tree": [...], "non-tree": [...]}`.
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<String>>,
    /// When absent, inferred: binary iff every available target is 0 or 1.
    #[serde(default)]
    pub kind: Option<TargetKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub species: Vec<String>,
    pub env_names: Vec<String>,
    pub groups: BTreeMap<String, Vec<bool>>,
    pub kind: TargetKind,
    pub records: Vec<LocationRecord>,
    /// One tag per record once assigned.
    pub split: Option<Vec<Split>>,
}

impl Dataset {
    pub fn n_species(&self) -> usize {
        self.species.len()
    }

    pub fn n_env(&self) -> usize {
        self.env_names.len()
    }

    pub fn species_index(&self, name: &str) -> Result<usize> {
        self.species
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownSpecies(name.to_string()))
    }

    pub fn group(&self, name: &str) -> Result<&[bool]> {
        self.groups
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownGroup(name.to_string()))
    }

    /// Record indices carrying the given split tag.
    pub fn indices(&self, split: Split) -> Result<Vec<usize>> {
        let tags = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Split("dataset has no split tags".into()))?;
        Ok(tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == split)
            .map(|(i, _)| i)
            .collect())
    }

    /// Counts of available presences (`target > 0`) per species.
    pub fn presence_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_species()];
        for r in &self.records {
            for (c, count) in counts.iter_mut().enumerate() {
                if r.available[c] && r.targets[c] > 0.0 {
                    *count += 1;
                }
            }
        }
        counts
    }

    /// Keeps only the species at `keep` (in that order) across roster,
    /// records and group masks.
    pub fn select_species(&self, keep: &[usize]) -> Dataset {
        let pick_f = |v: &[f64]| keep.iter().map(|&c| v[c]).collect::<Vec<_>>();
        let pick_b = |v: &[bool]| keep.iter().map(|&c| v[c]).collect::<Vec<_>>();
        Dataset {
            species: keep.iter().map(|&c| self.species[c].clone()).collect(),
            env_names: self.env_names.clone(),
            groups: self.groups.iter().map(|(k, m)| (k.clone(), pick_b(m))).collect(),
            kind: self.kind,
            records: self
                .records
                .iter()
                .map(|r| LocationRecord {
                    id: r.id.clone(),
                    lat: r.lat,
                    lon: r.lon,
                    env: r.env.clone(),
                    targets: pick_f(&r.targets),
                    available: pick_b(&r.available),
                })
                .collect(),
            split: self.split.clone(),
        }
    }

    pub fn subset_records(&self, idx: &[usize]) -> Dataset {
        Dataset {
            species: self.species.clone(),
            env_names: self.env_names.clone(),
            groups: self.groups.clone(),
            kind: self.kind,
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            split: self.split.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Checks structural invariants: vector lengths, target range, split cover.
    pub fn validate(&self) -> Result<()> {
        let (nc, ne) = (self.n_species(), self.n_env());
        for r in &self.records {
            if r.env.len() != ne || r.targets.len() != nc || r.available.len() != nc {
                return Err(Error::Row {
                    id: r.id.clone(),
                    msg: "vector lengths disagree with roster".into(),
                });
            }
            for (c, (&t, &a)) in r.targets.iter().zip(&r.available).enumerate() {
                if a && !(0.0..=1.0).contains(&t) {
                    return Err(Error::Row {
                        id: r.id.clone(),
                        msg: format!("target for `{}` outside [0, 1]: {t}", self.species[c]),
                    });
                }
            }
        }
        for (name, m) in &self.groups {
            if m.len() != nc {
                return Err(Error::Schema(format!("group `{name}` has wrong length")));
            }
        }
        if let Some(s) = &self.split {
            if s.len() != self.records.len() {
                return Err(Error::Split(format!(
                    "{} tags for {} records",
                    s.len(),
                    self.records.len()
                )));
            }
        }
        Ok(())
    }

    /// Drops species with fewer than `min_count` available presences.
    pub fn filter_min_presences(&self, min_count: usize) -> Result<Dataset> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        let counts = self.presence_counts();
        let keep: Vec<usize> = (0..self.n_species()).filter(|&c| counts[c] >= min_count).collect();
        if keep.is_empty() {
            return Err(Error::Config(format!("no species has at least {min_count} presences")));
        }
        Ok(self.select_species(&keep))
    }

    /// Merges each approved `(keep, drop)` pair into `keep`. Binary targets
    /// merge by logical OR, rates by max; availability is the OR of both.
    pub fn merge_targets(&self, pairs: &[(String, String)]) -> Result<Dataset> {
        let mut ds = self.clone();
        for (keep_name, drop_name) in pairs {
            let keep = ds.species_index(keep_name)?;
            let drop = ds.species_index(drop_name)?;
            if keep == drop {
                return Err(Error::Config(format!("cannot merge `{keep_name}` with itself")));
            }
            for r in &mut ds.records {
                let (ak, ad) = (r.available[keep], r.available[drop]);
                let (tk, td) = (r.targets[keep], r.targets[drop]);
                r.targets[keep] = match (ak, ad) {
                    (true, true) => tk.max(td),
                    (false, true) => td,
                    _ => tk,
                };
                r.available[keep] = ak || ad;
            }
            for m in ds.groups.values_mut() {
                m[keep] = m[keep] || m[drop];
            }
            let rest: Vec<usize> = (0..ds.n_species()).filter(|&c| c != drop).collect();
            ds = ds.select_species(&rest);
        }
        Ok(ds)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn toy(records: Vec<(f64, f64, Vec<Option<f64>>)>, species: &[&str]) -> Dataset {
        Dataset {
            species: species.iter().map(|s| s.to_string()).collect(),
            env_names: vec!["env_0".into()],
            groups: BTreeMap::new(),
            kind: TargetKind::Rate,
            records: records
                .into_iter()
                .enumerate()
                .map(|(i, (lat, lon, t))| LocationRecord {
                    id: format!("r{i}"),
                    lat,
                    lon,
                    env: vec![i as f64],
                    available: t.iter().map(Option::is_some).collect(),
                    targets: t.iter().map(|v| v.unwrap_or(0.0)).collect(),
                })
                .collect(),
            split: None,
        }
    }

    #[test]
    fn merge_rules() {
        let ds = toy(
            vec![
                (0.0, 0.0, vec![Some(1.0), Some(0.0), Some(0.3)]),
                (0.0, 0.0, vec![Some(0.3), Some(0.5), None]),
                (0.0, 0.0, vec![Some(0.2), None, None]),
                (0.0, 0.0, vec![None, Some(0.7), None]),
            ],
            &["a", "b", "c"],
        );
        let m = ds.merge_targets(&[("a".into(), "b".into())]).unwrap();
        assert_eq!(m.species, vec!["a", "c"]);
        assert_eq!(m.records[0].targets[0], 1.0);
        assert_eq!(m.records[1].targets[0], 0.5);
        assert_eq!((m.records[2].available[0], m.records[2].targets[0]), (true, 0.2));
        assert_eq!((m.records[3].available[0], m.records[3].targets[0]), (true, 0.7));
        assert!(matches!(
            ds.merge_targets(&[("a".into(), "zz".into())]),
            Err(Error::UnknownSpecies(_))
        ));
    }

    #[test]
    fn filter_boundary_is_inclusive() {
        let mut recs = Vec::new();
        for i in 0..100 {
            recs.push((0.0, 0.0, vec![Some(1.0), Some(if i == 0 { 1.0 } else { 0.0 })]));
        }
        let ds = toy(recs, &["common", "rare"]);
        let f = ds.filter_min_presences(100).unwrap();
        assert_eq!(f.species, vec!["common"]);
        assert!(ds.filter_min_presences(101).is_err());
        assert!(ds.filter_min_presences(0).is_err());
    }
}
