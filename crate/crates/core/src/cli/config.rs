use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{load_dataset, read_config, Dataset, DatasetConfig, Split, SplitFile};
use crate::encoding::EncodingMode;
use crate::error::{Error, Result};
use crate::models::{Family, ModelSpec};
use crate::training::{preset_encoding, EvalProtocol, Preset, Selection, TrainConfig};

/// Optional architecture fields; unset ones keep the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub hidden_dim: Option<usize>,
    pub mlp_layers: Option<usize>,
    /// Total linear layers of the MLP, for the depth ablation.
    pub depth: Option<usize>,
    pub hidden_widths: Option<Vec<usize>>,
    pub transformer_layers: Option<usize>,
    pub heads: Option<usize>,
    pub ff_mult: Option<usize>,
    pub encoding: Option<EncodingMode>,
    pub dropout: Option<f64>,
}

impl ModelOverrides {
    pub fn build(&self, family: Family, preset: Option<Preset>, n_species: usize, n_env: usize) -> ModelSpec {
        let mut s = ModelSpec::new(family, n_species, n_env);
        if let Some(p) = preset {
            s.encoding = preset_encoding(p);
        }
        if let Some(v) = self.hidden_dim {
            s.hidden_dim = v;
        }
        if let Some(v) = self.mlp_layers {
            s.mlp_layers = v;
        }
        if let Some(v) = self.depth {
            s = s.mlp_depth(v);
        }
        if let Some(v) = &self.hidden_widths {
            s.hidden_widths = Some(v.clone());
        }
        if let Some(v) = self.transformer_layers {
            s.transformer_layers = v;
        }
        if let Some(v) = self.heads {
            s.heads = v;
        }
        if let Some(v) = self.ff_mult {
            s.ff_mult = v;
        }
        if let Some(v) = self.encoding {
            s.encoding = v;
        }
        if let Some(v) = self.dropout {
            s.dropout = v;
        }
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub mask_cap_fraction: Option<f64>,
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub target_groups: Vec<String>,
    pub selection: Option<Selection>,
}

impl TrainOverrides {
    pub fn build(&self, preset: Preset, seed: u64) -> TrainConfig {
        let mut c = TrainConfig::preset(preset);
        c.seed = seed;
        if let Some(v) = self.lr {
            c.lr = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.mask_cap_fraction {
            c.mask_cap_fraction = v;
        }
        if let Some(v) = self.weight_decay {
            c.weight_decay = v;
        }
        c.target_groups = self.target_groups.clone();
        if let Some(v) = &self.selection {
            c.selection = v.clone();
        }
        c
    }
}

/// Named protocol over species groups or explicit species names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: String,
    #[serde(default)]
    pub condition_groups: Vec<String>,
    #[serde(default)]
    pub target_groups: Vec<String>,
    #[serde(default)]
    pub condition_species: Vec<String>,
    #[serde(default)]
    pub target_species: Vec<String>,
    #[serde(default = "default_split")]
    pub split: Split,
}

fn default_split() -> Split {
    Split::Test
}

impl ProtocolConfig {
    pub fn resolve(&self, ds: &Dataset) -> Result<EvalProtocol> {
        let mut condition = Vec::new();
        for g in &self.condition_groups {
            condition.extend(ds.group(g)?.iter().enumerate().filter(|(_, &m)| m).map(|(c, _)| c));
        }
        for s in &self.condition_species {
            condition.push(ds.species_index(s)?);
        }
        condition.sort_unstable();
        condition.dedup();
        let mut targets: Vec<usize> = if self.target_groups.is_empty() && self.target_species.is_empty() {
            (0..ds.n_species()).filter(|c| !condition.contains(c)).collect()
        } else {
            let mut t = Vec::new();
            for g in &self.target_groups {
                t.extend(ds.group(g)?.iter().enumerate().filter(|(_, &m)| m).map(|(c, _)| c));
            }
            for s in &self.target_species {
                t.push(ds.species_index(s)?);
            }
            t
        };
        targets.sort_unstable();
        targets.dedup();
        EvalProtocol::new(&self.name, condition, targets, self.split)
    }
}

/// The `train` run configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset CSV; relative paths resolve against the config file.
    pub dataset: PathBuf,
    #[serde(default)]
    pub dataset_config: Option<PathBuf>,
    /// Split tags to apply when the CSV carries none.
    #[serde(default)]
    pub splits: Option<PathBuf>,
    pub family: Family,
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub protocols: Vec<ProtocolConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.dataset = base.join(&cfg.dataset);
        cfg.dataset_config = cfg.dataset_config.map(|p| base.join(p));
        cfg.splits = cfg.splits.map(|p| base.join(p));
        Ok(cfg)
    }
}

/// Loads a dataset CSV with an optional sidecar config and split file. A
/// sidecar `dataset.json` / `splits.json` next to the CSV is picked up when
/// no explicit path is given.
pub fn open_dataset(csv: &Path, config: Option<&Path>, splits: Option<&Path>) -> Result<Dataset> {
    let dir = csv.parent().unwrap_or(Path::new("."));
    let sidecar = |given: Option<&Path>, name: &str| -> Option<PathBuf> {
        given.map(Path::to_path_buf).or_else(|| {
            let p = dir.join(name);
            p.exists().then_some(p)
        })
    };
    let cfg = match sidecar(config, "dataset.json") {
        Some(p) => read_config(&p)?,
        None => DatasetConfig::default(),
    };
    let (mut ds, summary) = load_dataset(csv, &cfg)?;
    if summary.rejected_coordinates > 0 {
        log::warn!(
            "{}: rejected {} rows with out-of-range coordinates",
            csv.display(),
            summary.rejected_coordinates
        );
    }
    if ds.split.is_none() {
        if let Some(p) = sidecar(splits, "splits.json") {
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let sf: SplitFile = serde_json::from_str(&text)?;
            ds.split = Some(sf.apply(&ds)?);
        }
    }
    Ok(ds)
}
