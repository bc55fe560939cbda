use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LocationRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    fn as_array(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

/// Grid cell `(floor(lat / deg), floor(lon / deg))`.
pub fn block_of(lat: f64, lon: f64, block_deg: f64) -> (i64, i64) {
    ((lat / block_deg).floor() as i64, (lon / block_deg).floor() as i64)
}

/// Assigns whole blocks to splits: blocks are shuffled with `seed`, then each
/// goes to the split with the largest remaining record deficit (ties to the
/// earlier split). Never fails; warns when a split ends up empty.
pub fn assign_blocks(records: &[LocationRecord], block_deg: f64, fractions: SplitFractions, seed: u64) -> Vec<Split> {
    let mut blocks: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        blocks.entry(block_of(r.lat, r.lon, block_deg)).or_default().push(i);
    }
    let mut order: Vec<Vec<usize>> = blocks.into_values().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let n = records.len() as f64;
    let target = fractions.as_array().map(|f| f * n);
    let mut filled = [0.0f64; 3];
    let mut tags = vec![Split::Train; records.len()];
    for members in order {
        let mut best = 0;
        for s in 1..3 {
            if target[s] - filled[s] > target[best] - filled[best] {
                best = s;
            }
        }
        filled[best] += members.len() as f64;
        for i in members {
            tags[i] = Split::ALL[best];
        }
    }
    for (s, f) in filled.iter().enumerate() {
        if *f == 0.0 {
            log::warn!("spatial split: `{}` received no blocks", Split::ALL[s].as_str());
        }
    }
    tags
}

/// Spatial block cross-validation split. Requires at least three non-empty
/// blocks so every split can receive one.
pub fn spatial_block_split(
    records: &[LocationRecord],
    block_deg: f64,
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<Split>> {
    if !(block_deg > 0.0) {
        return Err(Error::Split(format!("block size must be positive, got {block_deg}")));
    }
    let sum: f64 = fractions.as_array().iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.as_array().iter().any(|&f| f < 0.0) {
        return Err(Error::Split(format!(
            "fractions must be non-negative and sum to 1, got {sum}"
        )));
    }
    let mut keys: Vec<(i64, i64)> = records.iter().map(|r| block_of(r.lat, r.lon, block_deg)).collect();
    keys.sort_unstable();
    keys.dedup();
    if keys.len() < 3 {
        return Err(Error::Split(format!(
            "{} non-empty blocks; at least 3 are needed",
            keys.len()
        )));
    }
    Ok(assign_blocks(records, block_deg, fractions, seed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTag {
    pub id: String,
    pub split: Split,
}

/// Split tags as serialized next to datasets and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub tags: Vec<SplitTag>,
}

impl SplitFile {
    pub fn from_tags(ds: &Dataset, tags: &[Split]) -> Self {
        Self {
            tags: ds
                .records
                .iter()
                .zip(tags)
                .map(|(r, &split)| SplitTag {
                    id: r.id.clone(),
                    split,
                })
                .collect(),
        }
    }

    /// Tags aligned with `ds.records` by id.
    pub fn apply(&self, ds: &Dataset) -> Result<Vec<Split>> {
        let map: BTreeMap<&str, Split> = self.tags.iter().map(|t| (t.id.as_str(), t.split)).collect();
        ds.records
            .iter()
            .map(|r| {
                map.get(r.id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Split(format!("no split tag for record `{}`", r.id)))
            })
            .collect()
    }
}
