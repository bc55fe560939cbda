//! Label Mask Training, checkpoint selection and evaluation protocols.

mod eval;
mod select;

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{fit_norm, Dataset, NormStats, Split, TargetKind};
use crate::encoding::{observed_state, EncodingMode, SpeciesState};
use crate::error::{Error, Result};
use crate::features::{fit_maxent, MaxentConfig};
use crate::metrics::EvalReport;
use crate::models::{Checkpoint, Family, Model, ModelSpec};
use crate::numerics::{AdamW, AdamWConfig, Graph, ParamStore};

pub use eval::{
    conditioning_delta, evaluate, predict_map, write_delta_csv, write_map_csv, write_predictions_csv, DeltaRow,
    EvalProtocol, Evaluation, MapRow,
};
pub use select::{select_checkpoint_dual, SelectMetric};

/// Hyperparameter presets matching the three experimental setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Splotopen,
    Satbird,
    Across,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "splotopen" => Ok(Preset::Splotopen),
            "satbird" => Ok(Preset::Satbird),
            "across" => Ok(Preset::Across),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

fn default_cap() -> f64 {
    0.75
}

fn default_weight_decay() -> f64 {
    0.01
}

/// How the best epoch is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum Selection {
    /// Unconditioned validation metric over all target species: adaptive
    /// top-k for encounter rates, macro-AUC for presence/absence.
    Single,
    /// Strict improvement on both species groups at once.
    Dual {
        group_a: String,
        metric_a: SelectMetric,
        group_b: String,
        metric_b: SelectMetric,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Upper bound on revealed species as a fraction of the roster.
    #[serde(default = "default_cap")]
    pub mask_cap_fraction: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// Groups whose species are supervised; empty means every species.
    #[serde(default)]
    pub target_groups: Vec<String>,
    #[serde(default = "default_selection")]
    pub selection: Selection,
}

fn default_selection() -> Selection {
    Selection::Single
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let (lr, batch_size, epochs) = match p {
            Preset::Splotopen => (1e-3, 64, 20),
            Preset::Satbird | Preset::Across => (1e-4, 128, 50),
        };
        Self {
            lr,
            batch_size,
            epochs,
            seed: 0,
            mask_cap_fraction: default_cap(),
            weight_decay: default_weight_decay(),
            target_groups: Vec::new(),
            selection: Selection::Single,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_cap_fraction) {
            return Err(Error::Config(format!(
                "mask cap fraction {} outside [0, 1]",
                self.mask_cap_fraction
            )));
        }
        Ok(())
    }
}

/// Encoding used by a preset's CISO model: one bin for presence/absence data.
pub fn preset_encoding(p: Preset) -> EncodingMode {
    match p {
        Preset::Splotopen => EncodingMode::Discrete { n_bins: 1 },
        Preset::Satbird | Preset::Across => EncodingMode::Discrete { n_bins: 4 },
    }
}

/// Independent sub-seed for one stage of a run.
pub fn derive_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STAGE_INIT: u64 = 1;
const STAGE_SHUFFLE: u64 = 2;
const STAGE_MASK: u64 = 3;
const STAGE_DROPOUT: u64 = 4;
const STAGE_VAL_REVEAL: u64 = 5;

/// The species revealed to the model for one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnownSetSample {
    /// Sorted species indices.
    pub known: Vec<usize>,
    pub k: usize,
}

/// Draws `k` uniformly from `[0, min(⌊cap·|C|⌋, l)]`, then `k` distinct species
/// uniformly from the `l` available ones.
pub fn sample_known<R: Rng>(available: &[bool], cap_fraction: f64, rng: &mut R) -> KnownSetSample {
    let pool: Vec<usize> = (0..available.len()).filter(|&c| available[c]).collect();
    let cap = (cap_fraction * available.len() as f64).floor() as usize;
    let k_max = cap.min(pool.len());
    let k = rng.random_range(0..=k_max);
    let mut known: Vec<usize> = pool.choose_multiple(rng, k).copied().collect();
    known.sort_unstable();
    KnownSetSample { known, k }
}

/// Model state for an observed value.
pub fn state_of(r: f64, mode: EncodingMode) -> Result<SpeciesState> {
    observed_state(r, mode)
}

/// Normalized inputs and labels for one split.
#[derive(Debug, Clone, Default)]
pub struct Rows {
    pub records: Vec<usize>,
    pub env: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
    pub available: Vec<Vec<bool>>,
}

impl Rows {
    pub fn build(ds: &Dataset, norm: &NormStats, records: &[usize]) -> Self {
        let mut rows = Rows::default();
        for &i in records {
            let r = &ds.records[i];
            rows.records.push(i);
            rows.env.push(norm.apply(&r.env));
            rows.targets.push(r.targets.clone());
            rows.available.push(r.available.clone());
        }
        rows
    }

    pub fn len(&self) -> usize {
        self.env.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env.is_empty()
    }
}

/// Per-epoch training record. Epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub val_mae_unconditioned: f64,
    pub val_mae_conditioned: f64,
    pub val_metric_a: Option<f64>,
    pub val_metric_b: Option<f64>,
    pub selected: bool,
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for h in history {
        w.serialize(h)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub model: Model,
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Species that receive loss and validation scores.
pub fn target_species(ds: &Dataset, groups: &[String]) -> Result<Vec<bool>> {
    if groups.is_empty() {
        return Ok(vec![true; ds.n_species()]);
    }
    let mut t = vec![false; ds.n_species()];
    for g in groups {
        for (c, &m) in ds.group(g)?.iter().enumerate() {
            t[c] |= m;
        }
    }
    Ok(t)
}

fn selection_value(report: &EvalReport, kind: TargetKind) -> f64 {
    let a = &report.aggregates;
    let primary = match kind {
        TargetKind::Rate => a.topk_pct,
        TargetKind::Binary => a.auc_pct,
    };
    primary.unwrap_or(-a.mae_x100)
}

/// One training batch. `states`, `targets` and `mask` are row-major `B × |C|`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub env: Vec<Vec<f64>>,
    pub states: Vec<SpeciesState>,
    pub targets: Vec<f64>,
    /// Loss mask: available, supervised and not revealed.
    pub mask: Vec<bool>,
}

/// Assembles a batch: LMT states for state-aware families, all-Unknown otherwise.
pub fn make_batch<R: Rng>(
    rows: &Rows,
    idx: &[usize],
    family: Family,
    mode: EncodingMode,
    cap: f64,
    supervised: &[bool],
    rng: &mut R,
) -> Result<Batch> {
    let c = supervised.len();
    let mut b = Batch {
        env: Vec::with_capacity(idx.len()),
        states: Vec::with_capacity(idx.len() * c),
        targets: Vec::with_capacity(idx.len() * c),
        mask: Vec::with_capacity(idx.len() * c),
    };
    for &i in idx {
        let avail = &rows.available[i];
        let truth = &rows.targets[i];
        let mut known = vec![false; c];
        if family.uses_states() {
            for s in sample_known(avail, cap, rng).known {
                known[s] = true;
            }
        }
        for sp in 0..c {
            b.states.push(if known[sp] {
                state_of(truth[sp], mode)?
            } else {
                SpeciesState::Unknown
            });
            b.targets.push(if avail[sp] { truth[sp] } else { 0.0 });
            b.mask.push(avail[sp] && supervised[sp] && !known[sp]);
        }
        b.env.push(rows.env[i].clone());
    }
    Ok(b)
}

fn batch_loss(
    model: &Model,
    store: &ParamStore,
    batch: &Batch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let y = model.forward(&mut g, &p, &batch.env, Some(&batch.states), dropout)?;
    let loss = g.bce_masked(y, &batch.targets, &batch.mask)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    let grads = g.backward(loss)?;
    let gs = p
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, store.get(i).len()))
        .collect();
    Ok((value, gs))
}

/// Validation scores for one epoch.
struct Validation {
    metric: f64,
    mae_unconditioned: f64,
    mae_conditioned: f64,
    metric_a: Option<f64>,
    metric_b: Option<f64>,
}

fn validate_epoch(
    model: &Model,
    ds: &Dataset,
    val: &Rows,
    supervised: &[bool],
    cfg: &TrainConfig,
) -> Result<Validation> {
    let c = ds.n_species();
    let n = val.len();
    let targets: Vec<usize> = (0..c).filter(|&s| supervised[s]).collect();
    let uncond = model.predict(&val.env, None)?;
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    let pred_u = flat(&uncond);
    let truth = flat(&val.targets);
    let mask_u: Vec<bool> = (0..n * c)
        .map(|i| val.available[i / c][i % c] && supervised[i % c])
        .collect();
    let report = EvalReport::compute("validation", false, &ds.species, &pred_u, &truth, &mask_u, &targets)?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_VAL_REVEAL));
    let mut states = Vec::with_capacity(n * c);
    let mut mask_c = mask_u.clone();
    for i in 0..n {
        let mut known = vec![false; c];
        if model.spec.family.uses_states() {
            for s in sample_known(&val.available[i], cfg.mask_cap_fraction, &mut rng).known {
                known[s] = true;
            }
        }
        for s in 0..c {
            if known[s] {
                states.push(state_of(val.targets[i][s], model.spec.encoding)?);
                mask_c[i * c + s] = false;
            } else {
                states.push(SpeciesState::Unknown);
            }
        }
    }
    let cond = model.predict(&val.env, Some(&states))?;
    let pred_c = flat(&cond);
    let mae_c = if mask_c.iter().any(|&m| m) {
        crate::metrics::mae(&pred_c, &truth, &mask_c)?
    } else {
        f64::NAN
    };

    let (metric_a, metric_b) = match &cfg.selection {
        Selection::Single => (None, None),
        Selection::Dual {
            group_a,
            metric_a,
            group_b,
            metric_b,
        } => {
            let score = |group: &str, metric: SelectMetric| -> Result<Option<f64>> {
                let members = ds.group(group)?;
                let t: Vec<usize> = (0..c).filter(|&s| members[s]).collect();
                let m: Vec<bool> = mask_u.iter().enumerate().map(|(i, &m)| m && members[i % c]).collect();
                if !m.iter().any(|&v| v) {
                    return Ok(None);
                }
                let r = EvalReport::compute(group, false, &ds.species, &pred_u, &truth, &m, &t)?;
                Ok(metric.of(&r))
            };
            (score(group_a, *metric_a)?, score(group_b, *metric_b)?)
        }
    };
    Ok(Validation {
        metric: selection_value(&report, ds.kind),
        mae_unconditioned: report.aggregates.mae_x100 / 100.0,
        mae_conditioned: mae_c,
        metric_a,
        metric_b,
    })
}

/// Fits normalization (and Maxent features) on the train split.
pub fn fit_inputs(ds: &Dataset, family: Family) -> Result<(NormStats, Option<MaxentConfig>, Vec<usize>)> {
    let train_idx = ds.indices(Split::Train)?;
    if train_idx.is_empty() {
        return Err(Error::Split("train split is empty".into()));
    }
    let norm = fit_norm(&ds.records, &train_idx, &ds.env_names)?;
    let maxent = if family == Family::Maxent {
        let rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| norm.apply(&ds.records[i].env)).collect();
        Some(fit_maxent(&rows, 10, 10)?)
    } else {
        None
    };
    Ok((norm, maxent, train_idx))
}

/// Runs Label Mask Training (plain masked BCE for stateless families) and keeps
/// the best epoch by the configured selection rule. `spec.n_env` is overwritten
/// with the number of retained environmental variables.
pub fn train(ds: &Dataset, mut spec: ModelSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    ds.validate()?;
    let (norm, maxent, train_idx) = fit_inputs(ds, spec.family)?;
    spec.n_env = norm.n_out();
    spec.n_species = ds.n_species();
    let val_idx = ds.indices(Split::Val)?;
    if val_idx.is_empty() {
        return Err(Error::Split("validation split is empty".into()));
    }
    let train_rows = Rows::build(ds, &norm, &train_idx);
    let val_rows = Rows::build(ds, &norm, &val_idx);
    let supervised = target_species(ds, &cfg.target_groups)?;

    let mut model = Model::new(spec, maxent, derive_seed(cfg.seed, STAGE_INIT))?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_SHUFFLE));
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_MASK));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_DROPOUT));
    let family = model.spec.family;
    let mode = model.spec.encoding;

    // Epoch 0: loss of the initial parameters under a fresh mask draw.
    let init_loss = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STAGE_MASK) ^ 1);
        let order: Vec<usize> = (0..train_rows.len()).collect();
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = make_batch(
                &train_rows,
                chunk,
                family,
                mode,
                cfg.mask_cap_fraction,
                &supervised,
                &mut rng,
            )?;
            let mut g = Graph::new();
            let p = model.params.bind(&mut g);
            let y = model.forward(&mut g, &p, &batch.env, Some(&batch.states), None)?;
            let loss = g.bce_masked(y, &batch.targets, &batch.mask)?;
            total += g.value(loss).item() * chunk.len() as f64;
            count += chunk.len();
        }
        total / count as f64
    };
    let v0 = validate_epoch(&model, ds, &val_rows, &supervised, cfg)?;
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: init_loss,
        val_metric: v0.metric,
        val_mae_unconditioned: v0.mae_unconditioned,
        val_mae_conditioned: v0.mae_conditioned,
        val_metric_a: v0.metric_a,
        val_metric_b: v0.metric_b,
        selected: true,
    }];
    let mut best_epoch = 0;
    let mut best_params = model.params.clone();

    let mut order: Vec<usize> = (0..train_rows.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut count = 0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(
                &train_rows,
                chunk,
                family,
                mode,
                cfg.mask_cap_fraction,
                &supervised,
                &mut mask_rng,
            )?;
            if !batch.mask.iter().any(|&m| m) {
                continue;
            }
            let (loss, grads) = batch_loss(&model, &model.params, &batch, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            opt.step(&mut model.params, &grads)?;
            total += loss * chunk.len() as f64;
            count += chunk.len();
        }
        let v = validate_epoch(&model, ds, &val_rows, &supervised, cfg)?;
        let improved = match &cfg.selection {
            Selection::Single => v.metric > history[best_epoch].val_metric,
            Selection::Dual { .. } => {
                let inc = &history[best_epoch];
                select::dual_improves(v.metric_a, v.metric_b, inc.val_metric_a, inc.val_metric_b)
            }
        };
        if improved {
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        log::info!(
            "epoch {epoch}: loss {:.5} val {:.4} mae {:.5}/{:.5}{}",
            total / count.max(1) as f64,
            v.metric,
            v.mae_unconditioned,
            v.mae_conditioned,
            if improved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            train_loss: total / count.max(1) as f64,
            val_metric: v.metric,
            val_mae_unconditioned: v.mae_unconditioned,
            val_mae_conditioned: v.mae_conditioned,
            val_metric_a: v.metric_a,
            val_metric_b: v.metric_b,
            selected: false,
        });
    }
    for h in &mut history {
        h.selected = h.epoch == best_epoch;
    }
    model.params = best_params;
    let checkpoint = Checkpoint::new(&model, norm, ds.species.clone(), ds.kind, best_epoch);
    Ok(TrainOutcome {
        model,
        checkpoint,
        history,
        best_epoch,
    })
}
