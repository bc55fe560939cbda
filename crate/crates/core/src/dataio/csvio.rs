use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use super::{Dataset, DatasetConfig, LocationRecord, Split, SplitFile, TargetKind};
use crate::error::{Error, Result};

const SPECIES_PREFIX: &str = "sp_";
const ENV_PREFIX: &str = "env_";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadSummary {
    pub loaded: usize,
    /// Rows dropped for out-of-range coordinates.
    pub rejected_coordinates: usize,
}

pub fn read_config(path: &Path) -> Result<DatasetConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn parse_f64(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok()
}

/// Reads the dataset CSV: `id,lat,lon,env_*...,sp_<name>...`, optionally
/// with a `split` column. An empty species cell marks the target as
/// unavailable; an empty env cell is kept as `NaN` for later imputation.
pub fn load_dataset(path: &Path, config: &DatasetConfig) -> Result<(Dataset, LoadSummary)> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();

    let missing: Vec<&str> = ["id", "lat", "lon"]
        .into_iter()
        .filter(|c| !header.iter().any(|h| h == c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing required columns: {}",
            missing.join(", ")
        )));
    }
    let col = |name: &str| header.iter().position(|h| h == name);
    let (id_col, lat_col, lon_col) = (col("id").unwrap(), col("lat").unwrap(), col("lon").unwrap());
    let split_col = col("split");
    let env_cols: Vec<usize> = (0..header.len())
        .filter(|&i| header[i].starts_with(ENV_PREFIX))
        .collect();
    let sp_cols: Vec<(String, usize)> = (0..header.len())
        .filter(|&i| header[i].starts_with(SPECIES_PREFIX))
        .map(|i| (header[i][SPECIES_PREFIX.len()..].to_string(), i))
        .collect();
    if sp_cols.is_empty() {
        return Err(Error::Schema("no `sp_<name>` species columns".into()));
    }

    let header_species: Vec<String> = sp_cols.iter().map(|(n, _)| n.clone()).collect();
    let roster = match &config.species {
        Some(r) => {
            let a: BTreeSet<&String> = r.iter().collect();
            let b: BTreeSet<&String> = header_species.iter().collect();
            if a != b || r.len() != header_species.len() {
                let only_cfg: Vec<_> = a.difference(&b).map(|s| s.as_str()).collect();
                let only_hdr: Vec<_> = b.difference(&a).map(|s| s.as_str()).collect();
                return Err(Error::Schema(format!(
                    "species roster mismatch; config only: [{}], header only: [{}]",
                    only_cfg.join(", "),
                    only_hdr.join(", ")
                )));
            }
            r.clone()
        }
        None => header_species.clone(),
    };
    // column index for each roster position
    let roster_cols: Vec<usize> = roster
        .iter()
        .map(|n| sp_cols.iter().find(|(h, _)| h == n).unwrap().1)
        .collect();

    let mut records = Vec::new();
    let mut split_tags = Vec::new();
    let mut summary = LoadSummary::default();
    for row in rdr.records() {
        let row = row?;
        let id = row.get(id_col).unwrap_or("").to_string();
        let num = |i: usize, what: &str| -> Result<f64> {
            parse_f64(row.get(i).unwrap_or("")).ok_or_else(|| Error::Row {
                id: id.clone(),
                msg: format!("non-numeric {what} `{}`", row.get(i).unwrap_or("")),
            })
        };
        let lat = num(lat_col, "lat")?;
        let lon = num(lon_col, "lon")?;
        if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
            summary.rejected_coordinates += 1;
            continue;
        }
        let mut env = Vec::with_capacity(env_cols.len());
        for &c in &env_cols {
            let cell = row.get(c).unwrap_or("");
            if cell.is_empty() {
                env.push(f64::NAN);
            } else {
                let v = num(c, &header[c])?;
                if !v.is_finite() {
                    return Err(Error::Row {
                        id: id.clone(),
                        msg: format!("non-finite {}", header[c]),
                    });
                }
                env.push(v);
            }
        }
        let mut targets = Vec::with_capacity(roster.len());
        let mut available = Vec::with_capacity(roster.len());
        for &c in &roster_cols {
            let cell = row.get(c).unwrap_or("");
            if cell.is_empty() {
                targets.push(0.0);
                available.push(false);
            } else {
                let v = num(c, &header[c])?;
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Row {
                        id: id.clone(),
                        msg: format!("{} = {v} outside [0, 1]", header[c]),
                    });
                }
                targets.push(v);
                available.push(true);
            }
        }
        if let Some(sc) = split_col {
            let cell = row.get(sc).unwrap_or("");
            let tag = Split::parse(cell).ok_or_else(|| Error::Row {
                id: id.clone(),
                msg: format!("unknown split tag `{cell}`"),
            })?;
            split_tags.push(tag);
        }
        records.push(LocationRecord {
            id,
            lat,
            lon,
            env,
            targets,
            available,
        });
    }
    if summary.rejected_coordinates > 0 {
        log::warn!(
            "{}: rejected {} rows with out-of-range coordinates",
            path.display(),
            summary.rejected_coordinates
        );
    }
    summary.loaded = records.len();

    let kind = config.kind.unwrap_or_else(|| {
        let binary = records.iter().all(|r| {
            r.targets
                .iter()
                .zip(&r.available)
                .all(|(&t, &a)| !a || t == 0.0 || t == 1.0)
        });
        if binary {
            TargetKind::Binary
        } else {
            TargetKind::Rate
        }
    });

    let mut groups = BTreeMap::new();
    for (g, members) in &config.groups {
        let mut mask = vec![false; roster.len()];
        for m in members {
            let i = roster
                .iter()
                .position(|s| s == m)
                .ok_or_else(|| Error::Schema(format!("group `{g}` names unknown species `{m}`")))?;
            mask[i] = true;
        }
        groups.insert(g.clone(), mask);
    }

    let ds = Dataset {
        species: roster,
        env_names: env_cols.iter().map(|&c| header[c].clone()).collect(),
        groups,
        kind,
        records,
        split: split_col.map(|_| split_tags),
    };
    ds.validate()?;
    Ok((ds, summary))
}

fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

/// Writes the CSV form read by [`load_dataset`], including a `split`
/// column when tags exist.
pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Schema(format!("{other:?}")),
    })?;
    let mut header = vec!["id".to_string(), "lat".into(), "lon".into()];
    header.extend(ds.env_names.iter().cloned());
    header.extend(ds.species.iter().map(|s| format!("{SPECIES_PREFIX}{s}")));
    if ds.split.is_some() {
        header.push("split".into());
    }
    w.write_record(&header)?;
    for (i, r) in ds.records.iter().enumerate() {
        let mut row = vec![r.id.clone(), fmt_f64(r.lat), fmt_f64(r.lon)];
        row.extend(r.env.iter().map(|&v| fmt_f64(v)));
        row.extend(
            r.targets
                .iter()
                .zip(&r.available)
                .map(|(&t, &a)| if a { fmt_f64(t) } else { String::new() }),
        );
        if let Some(s) = &ds.split {
            row.push(s[i].as_str().to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Sidecar config reproducing the dataset's roster, groups and kind.
pub fn config_of(ds: &Dataset) -> DatasetConfig {
    DatasetConfig {
        species: Some(ds.species.clone()),
        groups: ds
            .groups
            .iter()
            .map(|(g, m)| {
                (
                    g.clone(),
                    m.iter()
                        .zip(&ds.species)
                        .filter(|(&b, _)| b)
                        .map(|(_, s)| s.clone())
                        .collect(),
                )
            })
            .collect(),
        kind: Some(ds.kind),
    }
}

/// Writes `dataset.csv`, `dataset.json` and, when tagged, `splits.json` into `dir`.
pub fn write_bundle(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_dataset(&dir.join("dataset.csv"), ds)?;
    let cfg = serde_json::to_string_pretty(&config_of(ds))?;
    fs::write(dir.join("dataset.json"), cfg).map_err(|e| Error::io(dir, e))?;
    if let Some(tags) = &ds.split {
        let sf = SplitFile::from_tags(ds, tags);
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&sf)?).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}
