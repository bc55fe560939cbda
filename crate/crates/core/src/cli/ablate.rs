use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, Split, TargetKind};
use crate::encoding::EncodingMode;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::models::{Family, Model, ModelSpec};
use crate::numerics::ParamStore;
use crate::training::{evaluate, preset_encoding, train, EvalProtocol, Preset, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    All,
    Encoding,
    Depth,
    Dims,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub preset: Preset,
    /// Overrides the preset's epoch count.
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    /// Hidden size for the encoding and depth studies.
    pub hidden_dim: usize,
    pub ff_mult: Option<usize>,
    pub encodings: Vec<EncodingMode>,
    pub depths: Vec<usize>,
    pub dims: Vec<usize>,
    /// The two species groups scored against each other; defaults to the
    /// dataset's first two groups.
    pub groups: Option<[String; 2]>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Satbird,
            epochs: None,
            lr: None,
            batch_size: None,
            hidden_dim: 256,
            ff_mult: None,
            encodings: vec![
                EncodingMode::Discrete { n_bins: 4 },
                EncodingMode::Discrete { n_bins: 1 },
                EncodingMode::Periodic,
                EncodingMode::Linear,
            ],
            depths: vec![3, 5, 6, 7],
            dims: vec![64, 128, 256],
            groups: None,
        }
    }
}

/// Scores for groups A and B under one setting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScores {
    pub mae_x100: [f64; 2],
    pub topk_pct: [Option<f64>; 2],
    pub auc_pct: [Option<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingRow {
    pub label: String,
    pub unconditioned: GroupScores,
    pub conditioned: GroupScores,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DepthRow {
    pub setting: String,
    pub model: String,
    pub auc_pct: [Option<f64>; 2],
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTables {
    pub groups: [String; 2],
    pub encoding: Option<Vec<SettingRow>>,
    pub depth: Option<Vec<DepthRow>>,
    pub dims: Option<Vec<SettingRow>>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.4}"))
}

fn setting_csv(first: &str, groups: &[String; 2], rows: &[SettingRow]) -> String {
    let [a, b] = groups;
    let mut s = first.to_string();
    for set in ["uncond", "cond"] {
        write!(
            s,
            ",{set}_mae_x100_{a},{set}_mae_x100_{b},{set}_topk_{a},{set}_topk_{b}"
        )
        .unwrap();
    }
    s.push('\n');
    for r in rows {
        s.push_str(&r.label);
        for g in [&r.unconditioned, &r.conditioned] {
            write!(
                s,
                ",{:.4},{:.4},{},{}",
                g.mae_x100[0],
                g.mae_x100[1],
                opt(g.topk_pct[0]),
                opt(g.topk_pct[1])
            )
            .unwrap();
        }
        s.push('\n');
    }
    s
}

impl AblationTables {
    pub fn encoding_csv(&self) -> Option<String> {
        self.encoding.as_ref().map(|r| setting_csv("encoding", &self.groups, r))
    }

    pub fn dims_csv(&self) -> Option<String> {
        self.dims.as_ref().map(|r| setting_csv("hidden_dim", &self.groups, r))
    }

    pub fn depth_csv(&self) -> Option<String> {
        self.depth.as_ref().map(|rows| {
            let [a, b] = &self.groups;
            let mut s = format!("setting,model,auc_{a},auc_{b},params\n");
            for r in rows {
                writeln!(
                    s,
                    "{},{},{},{},{}",
                    r.setting,
                    r.model,
                    opt(r.auc_pct[0]),
                    opt(r.auc_pct[1]),
                    r.params
                )
                .unwrap();
            }
            s
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, body) in [
            ("encoding.csv", self.encoding_csv()),
            ("depth.csv", self.depth_csv()),
            ("dims.csv", self.dims_csv()),
        ] {
            if let Some(body) = body {
                let p = dir.join(name);
                fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
            }
        }
        Ok(())
    }
}

struct Harness<'a> {
    ds: &'a Dataset,
    cfg: &'a AblationConfig,
    seed: u64,
    members: [Vec<usize>; 2],
}

impl Harness<'_> {
    fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::preset(self.cfg.preset);
        t.seed = self.seed;
        if let Some(v) = self.cfg.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.cfg.lr {
            t.lr = v;
        }
        if let Some(v) = self.cfg.batch_size {
            t.batch_size = v;
        }
        t
    }

    fn spec(&self, family: Family, hidden_dim: usize) -> ModelSpec {
        let mut s = ModelSpec::new(family, self.ds.n_species(), self.ds.n_env());
        s.hidden_dim = hidden_dim;
        s.encoding = match self.ds.kind {
            TargetKind::Binary => EncodingMode::Discrete { n_bins: 1 },
            TargetKind::Rate => preset_encoding(self.cfg.preset),
        };
        if let Some(f) = self.cfg.ff_mult {
            s.ff_mult = f;
        }
        s
    }

    fn fit(&self, spec: ModelSpec) -> Result<(Model, crate::dataio::NormStats)> {
        let out = train(self.ds, spec, &self.train_config())?;
        Ok((out.model, out.checkpoint.norm))
    }

    /// Scores each group, revealing nothing or the other group.
    fn scores(&self, model: &Model, norm: &crate::dataio::NormStats, conditioned: bool) -> Result<GroupScores> {
        let mut reports: Vec<EvalReport> = Vec::with_capacity(2);
        for g in 0..2 {
            let condition = if conditioned {
                self.members[1 - g].clone()
            } else {
                Vec::new()
            };
            let name = if conditioned { "conditioned" } else { "unconditioned" };
            let p = EvalProtocol::new(name, condition, self.members[g].clone(), Split::Test)?;
            reports.push(evaluate(model, norm, self.ds, &p)?.report);
        }
        Ok(GroupScores {
            mae_x100: [reports[0].aggregates.mae_x100, reports[1].aggregates.mae_x100],
            topk_pct: [reports[0].aggregates.topk_pct, reports[1].aggregates.topk_pct],
            auc_pct: [reports[0].aggregates.auc_pct, reports[1].aggregates.auc_pct],
        })
    }

    fn setting_row(&self, label: String, spec: ModelSpec) -> Result<SettingRow> {
        let (model, norm) = self.fit(spec)?;
        Ok(SettingRow {
            label,
            unconditioned: self.scores(&model, &norm, false)?,
            conditioned: self.scores(&model, &norm, true)?,
        })
    }
}

fn param_count(model: &Model) -> usize {
    let p: &ParamStore = &model.params;
    p.count()
}

/// Runs the requested sweeps. Every model is trained on all species and
/// evaluated on the test split per group.
pub fn run_ablation(ds: &Dataset, cfg: &AblationConfig, study: Study, seed: u64) -> Result<AblationTables> {
    let groups: [String; 2] = match &cfg.groups {
        Some(g) => g.clone(),
        None => {
            let names: Vec<&String> = ds.groups.keys().take(2).collect();
            if names.len() < 2 {
                return Err(Error::Config("ablation needs two species groups in the dataset".into()));
            }
            [names[0].clone(), names[1].clone()]
        }
    };
    let members = [0, 1].map(|g| -> Result<Vec<usize>> {
        let m = ds.group(&groups[g])?;
        Ok((0..m.len()).filter(|&c| m[c]).collect())
    });
    let [ma, mb] = members;
    let (ma, mb) = (ma?, mb?);
    if ma.iter().any(|c| mb.contains(c)) {
        return Err(Error::Config(format!(
            "groups `{}` and `{}` overlap",
            groups[0], groups[1]
        )));
    }
    let h = Harness {
        ds,
        cfg,
        seed,
        members: [ma, mb],
    };
    let wants = |s: Study| study == Study::All || study == s;

    let encoding = if wants(Study::Encoding) {
        let mut rows = Vec::new();
        for &mode in &cfg.encodings {
            let mut spec = h.spec(Family::Ciso, cfg.hidden_dim);
            spec.encoding = mode;
            log::info!("ablation: encoding {}", mode.label());
            rows.push(h.setting_row(mode.label(), spec)?);
        }
        Some(rows)
    } else {
        None
    };

    let depth = if wants(Study::Depth) {
        let mut rows = Vec::new();
        for &layers in &cfg.depths {
            let spec = h.spec(Family::Mlp, cfg.hidden_dim).mlp_depth(layers);
            log::info!("ablation: MLP-{layers}");
            let (model, norm) = h.fit(spec)?;
            let s = h.scores(&model, &norm, false)?;
            rows.push(DepthRow {
                setting: "MLP".into(),
                model: format!("MLP-{layers}"),
                auc_pct: s.auc_pct,
                params: param_count(&model),
            });
        }
        let mut reference = Vec::new();
        for family in [Family::MlpPlusPlus, Family::Ciso] {
            log::info!("ablation: {}", family.name());
            let (model, norm) = h.fit(h.spec(family, cfg.hidden_dim))?;
            reference.push((
                family,
                h.scores(&model, &norm, false)?,
                h.scores(&model, &norm, true)?,
                param_count(&model),
            ));
        }
        for (setting, conditioned) in [("Unconditioned", false), ("Conditioned", true)] {
            for (family, u, c, params) in &reference {
                rows.push(DepthRow {
                    setting: setting.into(),
                    model: family.name().into(),
                    auc_pct: if conditioned { c.auc_pct } else { u.auc_pct },
                    params: *params,
                });
            }
        }
        Some(rows)
    } else {
        None
    };

    let dims = if wants(Study::Dims) {
        let mut rows = Vec::new();
        for &d in &cfg.dims {
            log::info!("ablation: hidden dim {d}");
            rows.push(h.setting_row(d.to_string(), h.spec(Family::Ciso, d))?);
        }
        Some(rows)
    } else {
        None
    };

    Ok(AblationTables {
        groups,
        encoding,
        depth,
        dims,
    })
}
