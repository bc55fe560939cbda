//! The five model families and their shared parameter plumbing.
//!
//! * `linear`: `sigmoid(W x + b)`
//! * `maxent`: the linear model over Maxent features of `x`
//! * `mlp`: ReLU trunk plus an output layer
//! * `mlp++`: the MLP over `x` concatenated with one-hot species states
//! * `ciso`: the MLP trunk as environmental encoder, followed by a
//!   transformer over `[z, t_1, …, t_|C|]` and a per-species readout

mod checkpoint;
mod ciso;
mod dense;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{onehot_slot, EncodingMode, SpeciesState};
use crate::error::{Error, Result};
use crate::features::MaxentConfig;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use ciso::CisoLayout;
use dense::Dense;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "linear")]
    Linear,
    #[serde(rename = "maxent")]
    Maxent,
    #[serde(rename = "mlp")]
    Mlp,
    #[serde(rename = "mlp++")]
    MlpPlusPlus,
    #[serde(rename = "ciso")]
    Ciso,
}

impl Family {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Family::Linear),
            "maxent" => Ok(Family::Maxent),
            "mlp" => Ok(Family::Mlp),
            "mlp++" | "mlppp" | "mlp_plus_plus" => Ok(Family::MlpPlusPlus),
            "ciso" => Ok(Family::Ciso),
            other => Err(Error::Config(format!("unknown model family `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Linear => "Linear",
            Family::Maxent => "Maxent",
            Family::Mlp => "MLP",
            Family::MlpPlusPlus => "MLP++",
            Family::Ciso => "CISO",
        }
    }

    /// Whether the family takes species states as input.
    pub fn uses_states(self) -> bool {
        matches!(self, Family::MlpPlusPlus | Family::Ciso)
    }
}

fn default_ff_mult() -> usize {
    11
}

fn default_dropout() -> f64 {
    0.1
}

/// Architecture and size of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub hidden_dim: usize,
    /// Hidden layers in the MLP trunk.
    pub mlp_layers: usize,
    /// Explicit trunk widths; overrides `hidden_dim × mlp_layers`.
    #[serde(default)]
    pub hidden_widths: Option<Vec<usize>>,
    pub transformer_layers: usize,
    pub heads: usize,
    /// Feed-forward width inside transformer blocks, as a multiple of `hidden_dim`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    pub encoding: EncodingMode,
    pub n_species: usize,
    pub n_env: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

impl ModelSpec {
    /// Defaults: d = 256, two hidden MLP layers, three transformer blocks with four heads.
    pub fn new(family: Family, n_species: usize, n_env: usize) -> Self {
        Self {
            family,
            hidden_dim: 256,
            mlp_layers: 2,
            hidden_widths: None,
            transformer_layers: 3,
            heads: 4,
            ff_mult: default_ff_mult(),
            encoding: EncodingMode::Discrete { n_bins: 1 },
            n_species,
            n_env,
            dropout: default_dropout(),
        }
    }

    /// MLP with `layers` linear layers in total. Beyond the 3-layer baseline
    /// every hidden layer is twice `hidden_dim` wide.
    pub fn mlp_depth(mut self, layers: usize) -> Self {
        let hidden = layers.saturating_sub(1).max(1);
        self.mlp_layers = hidden;
        self.hidden_widths = if layers <= 3 {
            None
        } else {
            Some(vec![2 * self.hidden_dim; hidden])
        };
        self
    }

    pub fn widths(&self) -> Vec<usize> {
        self.hidden_widths
            .clone()
            .unwrap_or_else(|| vec![self.hidden_dim; self.mlp_layers])
    }

    pub fn n_bins(&self) -> usize {
        match self.encoding {
            EncodingMode::Discrete { n_bins } => n_bins,
            _ => 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_species == 0 || self.hidden_dim == 0 {
            return bad("n_species and hidden_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let EncodingMode::Discrete { n_bins: 0 } = self.encoding {
            return bad("discrete encoding needs at least one bin".into());
        }
        match self.family {
            Family::MlpPlusPlus if !matches!(self.encoding, EncodingMode::Discrete { .. }) => {
                bad("mlp++ supports discrete state encodings only".into())
            }
            Family::Mlp | Family::MlpPlusPlus | Family::Ciso if self.widths().is_empty() => {
                bad("MLP trunk needs at least one hidden layer".into())
            }
            Family::Ciso => {
                if !self.hidden_dim.is_multiple_of(self.heads) || self.heads == 0 {
                    return bad(format!(
                        "hidden_dim {} not divisible by {} heads",
                        self.hidden_dim, self.heads
                    ));
                }
                if self.widths().last() != Some(&self.hidden_dim) {
                    return bad("CISO trunk must end at hidden_dim".into());
                }
                if self.ff_mult == 0 || self.transformer_layers == 0 {
                    return bad("transformer needs layers and a feed-forward width".into());
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    /// Linear, Maxent, MLP and MLP++: a dense stack ending in `|C|` outputs.
    Stack(Dense),
    Ciso(CisoLayout),
}

/// A model with its parameters. Immutable during inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    pub maxent: Option<MaxentConfig>,
    layout: Layout,
}

impl Model {
    /// Initializes parameters from `seed`. Maxent models need the fitted feature config.
    pub fn new(spec: ModelSpec, maxent: Option<MaxentConfig>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = spec.n_species;
        let layout = match spec.family {
            Family::Linear => Layout::Stack(Dense::init(&mut params, "out", &[spec.n_env, c], &mut rng)),
            Family::Maxent => {
                let cfg = maxent
                    .as_ref()
                    .ok_or_else(|| Error::Config("maxent model needs a fitted feature config".into()))?;
                Layout::Stack(Dense::init(&mut params, "out", &[cfg.n_features(), c], &mut rng))
            }
            Family::Mlp | Family::MlpPlusPlus => {
                let in_dim = if spec.family == Family::Mlp {
                    spec.n_env
                } else {
                    spec.n_env + c * (spec.n_bins() + 2)
                };
                let mut dims = vec![in_dim];
                dims.extend(spec.widths());
                dims.push(c);
                Layout::Stack(Dense::init(&mut params, "mlp", &dims, &mut rng))
            }
            Family::Ciso => Layout::Ciso(CisoLayout::init(&spec, &mut params, &mut rng)?),
        };
        let maxent = if spec.family == Family::Maxent { maxent } else { None };
        Ok(Self {
            spec,
            params,
            maxent,
            layout,
        })
    }

    /// Rebuilds a model around stored parameters, checking names and shapes.
    pub fn from_parts(spec: ModelSpec, maxent: Option<MaxentConfig>, params: ParamStore) -> Result<Self> {
        let mut m = Model::new(spec, maxent, 0)?;
        if m.params.len() != params.len() {
            return Err(Error::Schema("checkpoint parameter list does not match model".into()));
        }
        for i in 0..params.len() {
            if m.params.name(i) != params.name(i) || m.params.get(i).shape() != params.get(i).shape() {
                return Err(Error::Schema(format!(
                    "checkpoint parameter `{}` does not match model",
                    params.name(i)
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Input rows for the dense stack: Maxent features, or `[x, onehot(states)]`.
    fn stack_input(&self, env: &[Vec<f64>], states: Option<&[SpeciesState]>) -> Result<Tensor> {
        let b = env.len();
        let rows: Vec<Vec<f64>> = match self.spec.family {
            Family::Maxent => {
                let cfg = self.maxent.as_ref().expect("validated at construction");
                env.iter().map(|x| cfg.expand(x)).collect()
            }
            Family::MlpPlusPlus => {
                let c = self.spec.n_species;
                let nb = self.spec.n_bins();
                let w = nb + 2;
                let unknown;
                let states = match states {
                    Some(s) => s,
                    None => {
                        unknown = vec![SpeciesState::Unknown; b * c];
                        &unknown
                    }
                };
                if states.len() != b * c {
                    return Err(Error::Contract(format!("{} states for {b}×{c} cells", states.len())));
                }
                env.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let mut row = x.clone();
                        let mut oh = vec![0.0; c * w];
                        for sp in 0..c {
                            oh[sp * w + onehot_slot(states[i * c + sp], nb)?] = 1.0;
                        }
                        row.extend(oh);
                        Ok(row)
                    })
                    .collect::<Result<_>>()?
            }
            _ => env.to_vec(),
        };
        if rows.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        Tensor::from_rows(&rows)
    }

    /// Records a forward pass and returns predictions `[B × |C|]` in `(0, 1)`.
    /// `states` is row-major `B × |C|`; `None` means all unknown. Dropout is
    /// active only when `rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        env: &[Vec<f64>],
        states: Option<&[SpeciesState]>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if let Some(bad) = env.iter().find(|x| x.len() != self.spec.n_env) {
            return Err(Error::Shape {
                op: "forward",
                left: vec![self.spec.n_env],
                right: vec![bad.len()],
            });
        }
        match &self.layout {
            Layout::Stack(dense) => {
                let x = self.stack_input(env, states)?;
                let x = g.constant(x);
                let logits = dense.forward(g, params, x)?;
                Ok(g.sigmoid(logits))
            }
            Layout::Ciso(layout) => {
                let x = g.constant(Tensor::from_rows(env)?);
                layout.forward(&self.spec, g, params, x, states, rng, None)
            }
        }
    }

    /// Inference in chunks; returns one prediction row per input row.
    pub fn predict(&self, env: &[Vec<f64>], states: Option<&[SpeciesState]>) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 256;
        let c = self.spec.n_species;
        let mut out = Vec::with_capacity(env.len());
        for start in (0..env.len()).step_by(CHUNK) {
            let end = (start + CHUNK).min(env.len());
            let mut g = Graph::new();
            let p = self.params.bind(&mut g);
            let st = states.map(|s| &s[start * c..end * c]);
            let y = self.forward(&mut g, &p, &env[start..end], st, None)?;
            out.extend(g.value(y).data().chunks(c).map(<[f64]>::to_vec));
        }
        Ok(out)
    }

    /// Per-layer attention maps `[B·heads, L, L]` of a CISO forward pass.
    pub fn attention_maps(&self, env: &[Vec<f64>], states: Option<&[SpeciesState]>) -> Result<Vec<Tensor>> {
        let Layout::Ciso(layout) = &self.layout else {
            return Err(Error::Config("attention maps exist only for CISO".into()));
        };
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(Tensor::from_rows(env)?);
        let mut maps = Vec::new();
        layout.forward(&self.spec, &mut g, &p, x, states, None, Some(&mut maps))?;
        Ok(maps.into_iter().map(|v| g.value(v).clone()).collect())
    }
}
