//! Command-line entry point. Every command computes its results first and
//! only then moves them into `--out-dir`, next to a `manifest.json`.

mod ablate;
mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::colocate::{attach, colocate, write_pairs};
use crate::dataio::{
    fit_norm, fuzzy_merge_species, spatial_block_split, write_bundle, Dataset, LocationRecord, Split, SplitFile,
    SplitFractions,
};
use crate::error::{Error, Result};
use crate::metrics::format_table;
use crate::models::Checkpoint;
use crate::synth::{generate, oracle_report, SynthSpec};
use crate::training::{
    conditioning_delta, derive_seed, evaluate, predict_map, train, write_delta_csv, write_history, write_map_csv,
    write_predictions_csv, EvalProtocol, Preset,
};

pub use ablate::{run_ablation, AblationConfig, AblationTables};
pub use config::{open_dataset, ModelOverrides, ProtocolConfig, RunConfig, TrainOverrides};

const STAGE_SPLIT: u64 = 10;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Splotopen,
    Satbird,
    Across,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Splotopen => Preset::Splotopen,
            PresetArg::Satbird => Preset::Satbird,
            PresetArg::Across => Preset::Across,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "ciso",
    version,
    about = "Multi-species distribution models conditioned on partial observations"
)]
struct Cli {
    /// Seed for every random stage of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory receiving the command's outputs.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct DatasetArgs {
    /// Dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    /// Sidecar JSON with roster order and groups (default: dataset.json next to the CSV).
    #[arg(long)]
    dataset_config: Option<PathBuf>,
    /// Split tags (default: splits.json next to the CSV).
    #[arg(long)]
    splits: Option<PathBuf>,
}

impl DatasetArgs {
    fn open(&self) -> Result<Dataset> {
        open_dataset(&self.dataset, self.dataset_config.as_deref(), self.splits.as_deref())
    }
}

#[derive(Debug, Args)]
struct ProtocolArgs {
    /// Protocol name used in reports.
    #[arg(long)]
    name: Option<String>,
    /// Reveal nothing and score every species.
    #[arg(long, conflicts_with_all = ["condition_groups", "condition_species"])]
    unconditioned: bool,
    /// Comma-separated groups whose species are revealed.
    #[arg(long, value_delimiter = ',')]
    condition_groups: Vec<String>,
    /// Comma-separated groups to score (default: every unrevealed species).
    #[arg(long, value_delimiter = ',')]
    target_groups: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    condition_species: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    target_species: Vec<String>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    split: Split,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split `{s}`"))
}

fn non_empty(v: &[String]) -> Vec<String> {
    v.iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().to_string())
        .collect()
}

impl ProtocolArgs {
    fn to_config(&self) -> ProtocolConfig {
        let condition_groups = non_empty(&self.condition_groups);
        let condition_species = non_empty(&self.condition_species);
        let conditioned = !self.unconditioned && !(condition_groups.is_empty() && condition_species.is_empty());
        let name = self.name.clone().unwrap_or_else(|| {
            if conditioned {
                "conditioned".into()
            } else {
                "unconditioned".into()
            }
        });
        ProtocolConfig {
            name,
            condition_groups,
            target_groups: non_empty(&self.target_groups),
            condition_species,
            target_species: non_empty(&self.target_species),
            split: self.split,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, merge, filter and split a dataset; fit normalization on its train split.
    Prepare {
        #[command(flatten)]
        data: DatasetArgs,
        /// CSV of approved merges `keep,drop` (no header).
        #[arg(long)]
        merge: Option<PathBuf>,
        /// Also write fuzzy-match merge proposals above this score.
        #[arg(long)]
        propose_merges: Option<f64>,
        #[arg(long)]
        min_presences: Option<usize>,
        /// Spatial block size in degrees.
        #[arg(long, default_value_t = 1.0)]
        block_deg: f64,
        /// Replace existing split tags with a fresh block split.
        #[arg(long)]
        resplit: bool,
    },
    /// Attach dataset B's species to the nearest dataset-A location within a radius.
    Colocate {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        a_config: Option<PathBuf>,
        #[arg(long)]
        b_config: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        radius_km: f64,
        /// Group names for A's and B's species, e.g. `plants,birds`.
        #[arg(long, default_value = "a,b", value_delimiter = ',', num_args = 1..=2)]
        labels: Vec<String>,
        /// Also keep B training locations no A location claimed.
        #[arg(long)]
        include_b_train: bool,
    },
    /// Train a model from a run configuration (`--config`).
    Train,
    /// Evaluate a checkpoint under one protocol, or the list in `--config`.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[command(flatten)]
        protocol: ProtocolArgs,
    },
    /// Mean prediction change per species when one species' observations are revealed.
    Delta {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long)]
        source: String,
        /// Comma-separated target species (default: all).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Predictions over a grid of locations, as plot-ready CSV.
    Map {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Grid CSV: `lat,lon,env_*` plus optional `sp_<name>` observations.
        #[arg(long)]
        grid: PathBuf,
        /// Comma-separated species to reveal where the grid observes them.
        #[arg(long, value_delimiter = ',')]
        condition_species: Vec<String>,
    },
    /// Generate a synthetic dataset (spec from `--config` or flags) with its oracle report.
    Synth {
        #[arg(long, default_value_t = 5)]
        pairs: usize,
        #[arg(long, default_value_t = 5)]
        n_env: usize,
        #[arg(long, default_value_t = 5000)]
        locations: usize,
        #[arg(long, default_value_t = 4.0)]
        weight: f64,
        #[arg(long)]
        missingness: Option<f64>,
    },
    /// Encoding, depth and hidden-size sweeps in the layout of the ablation tables.
    Ablate {
        #[command(flatten)]
        data: DatasetArgs,
        #[arg(long, value_enum, default_value = "all")]
        study: ablate::Study,
    },
}

/// Metadata written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub version: &'static str,
    pub threads: usize,
    pub wall_clock_secs: f64,
}

/// Worker thread cap from `CISO_THREADS`. Kernels run on one thread; the
/// value is validated and recorded.
fn thread_cap() -> Result<usize> {
    match std::env::var("CISO_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("CISO_THREADS must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

/// Files written to a hidden sibling directory and moved into place on success.
struct Staging {
    target: PathBuf,
    tmp: PathBuf,
    committed: bool,
}

impl Staging {
    fn new(target: &Path) -> Result<Self> {
        let parent = target
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        let name = target
            .file_name()
            .map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
        let tmp = parent.join(format!(".{name}.staging-{}", std::process::id()));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        Ok(Self {
            target: target.to_path_buf(),
            tmp,
            committed: false,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)?)
    }

    fn files(&self) -> Result<Vec<String>> {
        let mut names: Vec<String> = fs::read_dir(&self.tmp)
            .map_err(|e| Error::io(&self.tmp, e))?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        names.sort();
        Ok(names)
    }

    fn commit(mut self, mut manifest: RunManifest, started: Instant) -> Result<()> {
        manifest.outputs = self.files()?;
        manifest.outputs.push("manifest.json".into());
        manifest.wall_clock_secs = started.elapsed().as_secs_f64();
        self.write_json("manifest.json", &manifest)?;
        fs::create_dir_all(&self.target).map_err(|e| Error::io(&self.target, e))?;
        for name in self.files()? {
            let dest = self.target.join(&name);
            fs::rename(self.tmp.join(&name), &dest).map_err(|e| Error::io(&dest, e))?;
        }
        self.committed = true;
        fs::remove_dir_all(&self.tmp).map_err(|e| Error::io(&self.tmp, e))
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref()
        .ok_or_else(|| Error::Config(format!("`{flag}` is required for this command")))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, crate::models::Model)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

/// The dataset's roster and env columns must match the checkpoint's.
fn check_compatible(ck: &Checkpoint, ds: &Dataset) -> Result<()> {
    if ck.species != ds.species {
        return Err(Error::Schema("dataset roster differs from the checkpoint's".into()));
    }
    if ck.norm.names != ds.env_names {
        return Err(Error::Schema(format!(
            "dataset env columns {:?} differ from the checkpoint's {:?}",
            ds.env_names, ck.norm.names
        )));
    }
    Ok(())
}

/// Reads `lat,lon,env_*` rows plus any `sp_<name>` observations for `roster`.
fn read_grid(path: &Path, env_names: &[String], roster: &[String]) -> Result<Vec<LocationRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let col = |n: &str| header.iter().position(|h| h == n);
    let missing: Vec<&str> = ["lat", "lon"]
        .into_iter()
        .chain(env_names.iter().map(String::as_str))
        .filter(|n| col(n).is_none())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!(
            "missing required columns: {}",
            missing.join(", ")
        )));
    }
    let env_cols: Vec<usize> = env_names.iter().map(|n| col(n).unwrap()).collect();
    let sp_cols: Vec<Option<usize>> = roster.iter().map(|s| col(&format!("sp_{s}"))).collect();
    let id_col = col("id");
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = id_col.map_or_else(|| format!("row{row}"), |c| rec[c].to_string());
        let num = |c: usize| -> Result<f64> {
            let f = rec[c].trim();
            if f.is_empty() {
                return Ok(f64::NAN);
            }
            f.parse().map_err(|_| Error::Row {
                id: id.clone(),
                msg: format!("non-numeric value `{f}` in column `{}`", header[c]),
            })
        };
        let lat = num(col("lat").unwrap())?;
        let lon = num(col("lon").unwrap())?;
        let env = env_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let mut targets = vec![0.0; roster.len()];
        let mut available = vec![false; roster.len()];
        for (s, c) in sp_cols.iter().enumerate() {
            if let Some(c) = *c {
                let v = num(c)?;
                if v.is_finite() {
                    targets[s] = v;
                    available[s] = true;
                }
            }
        }
        out.push(LocationRecord {
            id,
            lat,
            lon,
            env,
            targets,
            available,
        });
    }
    Ok(out)
}

/// Reads `keep,drop` merge pairs.
fn read_merges(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    rdr.records()
        .map(|r| {
            let r = r?;
            match (r.get(0), r.get(1)) {
                (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => Ok((a.to_string(), b.to_string())),
                _ => Err(Error::Schema(format!(
                    "{}: merge rows need two species",
                    path.display()
                ))),
            }
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Config(e.to_string()))?;
    execute(cli)
}

/// Binary entry point: returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let threads = thread_cap()?;
    let out_dir = require(&cli.out_dir, "--out-dir")?.clone();
    let manifest = |command: &str, config: serde_json::Value, seed: Option<u64>, inputs: Vec<PathBuf>| RunManifest {
        command: command.to_string(),
        config,
        seed,
        inputs,
        outputs: Vec::new(),
        version: env!("CARGO_PKG_VERSION"),
        threads,
        wall_clock_secs: 0.0,
    };
    let preset = cli.preset.map(Preset::from);

    match &cli.command {
        Command::Prepare {
            data,
            merge,
            propose_merges,
            min_presences,
            block_deg,
            resplit,
        } => {
            let seed = cli.seed.unwrap_or(0);
            let mut ds = data.open()?;
            let stage = Staging::new(&out_dir)?;
            if let Some(th) = propose_merges {
                if !(0.0..=100.0).contains(th) {
                    return Err(Error::Config(format!("merge threshold {th} outside [0, 100]")));
                }
                let mut w = csv::Writer::from_path(stage.path("merge_proposals.csv"))?;
                w.write_record(["first", "second", "score"])?;
                for p in fuzzy_merge_species(&ds.species, *th) {
                    w.write_record([p.first.as_str(), p.second.as_str(), &format!("{:.2}", p.score)])?;
                }
                w.flush().map_err(|e| Error::io(&out_dir, e))?;
            }
            if let Some(path) = merge {
                ds = ds.merge_targets(&read_merges(path)?)?;
            }
            if let Some(m) = min_presences {
                if *m == 0 {
                    return Err(Error::Config("--min-presences must be at least 1".into()));
                }
                ds = ds.filter_min_presences(*m)?;
            }
            if ds.split.is_none() || *resplit {
                ds.split = Some(spatial_block_split(
                    &ds.records,
                    *block_deg,
                    SplitFractions::default(),
                    derive_seed(seed, STAGE_SPLIT),
                )?);
            }
            ds.validate()?;
            let train_idx = ds.indices(Split::Train)?;
            let norm = fit_norm(&ds.records, &train_idx, &ds.env_names)?;
            write_bundle(&stage.tmp, &ds)?;
            stage.write_json("norm.json", &norm)?;
            let counts: Vec<usize> = Split::ALL
                .iter()
                .map(|&s| ds.indices(s).map_or(0, |v| v.len()))
                .collect();
            let cfg = json!({
                "merge": merge, "propose_merges": propose_merges, "min_presences": min_presences,
                "block_deg": block_deg, "resplit": resplit,
                "species": ds.n_species(), "records": ds.records.len(),
                "split_counts": {"train": counts[0], "val": counts[1], "test": counts[2]},
                "dropped_env": norm.dropped,
            });
            let mut inputs = vec![data.dataset.clone()];
            inputs.extend(merge.clone());
            stage.commit(manifest("prepare", cfg, Some(seed), inputs), started)
        }

        Command::Colocate {
            a,
            b,
            a_config,
            b_config,
            radius_km,
            labels,
            include_b_train,
        } => {
            if !(*radius_km > 0.0) {
                return Err(Error::Config(format!("radius {radius_km} must be positive")));
            }
            if labels.len() != 2 || labels[0] == labels[1] {
                return Err(Error::Config(format!(
                    "--labels needs two distinct names, got {labels:?}"
                )));
            }
            let da = open_dataset(a, a_config.as_deref(), None)?;
            let db = open_dataset(b, b_config.as_deref(), None)?;
            let pairs = colocate(&da, &db, *radius_km);
            let combined = attach(&da, &db, &pairs, (&labels[0], &labels[1]), *include_b_train)?;
            let stage = Staging::new(&out_dir)?;
            write_pairs(&stage.path("pairs.csv"), &pairs)?;
            write_bundle(&stage.tmp, &combined)?;
            let cfg = json!({
                "radius_km": radius_km, "labels": labels, "include_b_train": include_b_train,
                "pairs": pairs.len(), "records": combined.records.len(),
            });
            stage.commit(manifest("colocate", cfg, None, vec![a.clone(), b.clone()]), started)
        }

        Command::Train => {
            let cfg_path = require(&cli.config, "--config")?;
            let run = RunConfig::read(cfg_path)?;
            let seed = cli.seed.or(run.seed).unwrap_or(0);
            let preset = preset.or(run.preset).unwrap_or(Preset::Satbird);
            let ds = open_dataset(&run.dataset, run.dataset_config.as_deref(), run.splits.as_deref())?;
            let spec = run.model.build(run.family, Some(preset), ds.n_species(), ds.n_env());
            let tcfg = run.train.build(preset, seed);
            for p in &run.protocols {
                p.resolve(&ds)?;
            }
            let out = train(&ds, spec, &tcfg)?;
            let stage = Staging::new(&out_dir)?;
            out.checkpoint.save(&stage.path("checkpoint.json"))?;
            write_history(&stage.path("history.csv"), &out.history)?;
            stage.write_json("norm.json", &out.checkpoint.norm)?;
            if let Some(tags) = &ds.split {
                stage.write_json("splits.json", &SplitFile::from_tags(&ds, tags))?;
            }
            let mut reports = Vec::new();
            for p in &run.protocols {
                let proto = p.resolve(&ds)?;
                let ev = evaluate(&out.model, &out.checkpoint.norm, &ds, &proto)?;
                stage.write_json(&format!("report_{}.json", proto.name), &ev.report)?;
                reports.push((proto.name.clone(), ev.report));
            }
            if !reports.is_empty() {
                let rows: Vec<(String, &_)> = reports.iter().map(|(n, r)| (n.clone(), r)).collect();
                stage.write("table.txt", format_table(&rows))?;
            }
            let cfg = json!({
                "run": run, "preset": preset, "model": out.checkpoint.spec, "train": tcfg,
                "best_epoch": out.best_epoch, "params": out.model.param_count(),
            });
            stage.commit(
                manifest("train", cfg, Some(seed), vec![cfg_path.clone(), run.dataset.clone()]),
                started,
            )
        }

        Command::Eval {
            checkpoint,
            data,
            protocol,
        } => {
            let (ck, model) = load_checkpoint(checkpoint)?;
            let ds = data.open()?;
            check_compatible(&ck, &ds)?;
            let protocols: Vec<ProtocolConfig> = match &cli.config {
                Some(p) => read_json(p)?,
                None => vec![protocol.to_config()],
            };
            let resolved: Vec<EvalProtocol> = protocols.iter().map(|p| p.resolve(&ds)).collect::<Result<_>>()?;
            let mut evals = Vec::new();
            for p in &resolved {
                evals.push(evaluate(&model, &ck.norm, &ds, p)?);
            }
            let stage = Staging::new(&out_dir)?;
            for (p, ev) in resolved.iter().zip(&evals) {
                stage.write_json(&format!("report_{}.json", p.name), &ev.report)?;
                write_predictions_csv(&stage.path(&format!("predictions_{}.csv", p.name)), &ds, ev)?;
            }
            let rows: Vec<(String, &_)> = resolved
                .iter()
                .zip(&evals)
                .map(|(p, e)| (format!("{} {}", ck.spec.family.name(), p.name), &e.report))
                .collect();
            let table = format_table(&rows);
            print!("{table}");
            stage.write("table.txt", table)?;
            let cfg = json!({ "protocols": resolved });
            stage.commit(
                manifest("eval", cfg, None, vec![checkpoint.clone(), data.dataset.clone()]),
                started,
            )
        }

        Command::Delta {
            checkpoint,
            data,
            source,
            targets,
            split,
        } => {
            let (ck, model) = load_checkpoint(checkpoint)?;
            let ds = data.open()?;
            check_compatible(&ck, &ds)?;
            let src = ds.species_index(source)?;
            let names = non_empty(targets);
            let tgt: Vec<usize> = if names.is_empty() {
                (0..ds.n_species()).collect()
            } else {
                names.iter().map(|n| ds.species_index(n)).collect::<Result<_>>()?
            };
            let rows = conditioning_delta(&model, &ck.norm, &ds, src, &tgt, *split)?;
            let stage = Staging::new(&out_dir)?;
            write_delta_csv(&stage.path("delta.csv"), source, &rows)?;
            let cfg = json!({ "source": source, "targets": tgt.len(), "split": split });
            stage.commit(
                manifest("delta", cfg, None, vec![checkpoint.clone(), data.dataset.clone()]),
                started,
            )
        }

        Command::Map {
            checkpoint,
            grid,
            condition_species,
        } => {
            let (ck, model) = load_checkpoint(checkpoint)?;
            let records = read_grid(grid, &ck.norm.names, &ck.species)?;
            let condition: Vec<usize> = non_empty(condition_species)
                .iter()
                .map(|n| {
                    ck.species
                        .iter()
                        .position(|s| s == n)
                        .ok_or_else(|| Error::UnknownSpecies(n.clone()))
                })
                .collect::<Result<_>>()?;
            let rows = predict_map(&model, &ck.norm, &ck.species, &records, &condition)?;
            let stage = Staging::new(&out_dir)?;
            write_map_csv(&stage.path("map.csv"), &rows)?;
            let cfg = json!({ "condition_species": condition_species, "cells": records.len() });
            stage.commit(
                manifest("map", cfg, None, vec![checkpoint.clone(), grid.clone()]),
                started,
            )
        }

        Command::Synth {
            pairs,
            n_env,
            locations,
            weight,
            missingness,
        } => {
            let mut spec: SynthSpec = match &cli.config {
                Some(p) => read_json(p)?,
                None => SynthSpec::paired(*pairs, *n_env, *locations, *weight, 0),
            };
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            if let Some(m) = missingness {
                spec.missingness = *m;
            }
            let ds = generate(&spec)?;
            let stage = Staging::new(&out_dir)?;
            write_bundle(&stage.tmp, &ds)?;
            stage.write_json("synth_spec.json", &spec)?;
            if spec.n_species <= crate::synth::MAX_ORACLE_SPECIES {
                let (condition, targets) = match (spec.groups.get("roots"), spec.groups.get("children")) {
                    (Some(r), Some(c)) => (r.clone(), c.clone()),
                    _ => (Vec::new(), (0..spec.n_species).collect()),
                };
                let report = oracle_report(&spec, &ds, Split::Test, &condition, &targets)?;
                stage.write_json("oracle.json", &report)?;
            }
            let cfg = serde_json::to_value(&spec)?;
            stage.commit(manifest("synth", cfg, Some(spec.seed), Vec::new()), started)
        }

        Command::Ablate { data, study } => {
            let seed = cli.seed.unwrap_or(0);
            let ds = data.open()?;
            let mut acfg: AblationConfig = match &cli.config {
                Some(p) => read_json(p)?,
                None => AblationConfig::default(),
            };
            if let Some(p) = preset {
                acfg.preset = p;
            }
            let tables = run_ablation(&ds, &acfg, *study, seed)?;
            let stage = Staging::new(&out_dir)?;
            tables.write(&stage.tmp)?;
            let cfg = json!({ "ablation": acfg, "study": format!("{study:?}").to_lowercase() });
            stage.commit(manifest("ablate", cfg, Some(seed), vec![data.dataset.clone()]), started)
        }
    }
}
