//! Species identity embeddings, state embeddings and species tokens.
//!
//! A token is `e_c + s_c`: the species' identity vector plus a state vector
//! shared by all species (unknown `u`, absent `a`, or a present-state
//! encoding). Present states are either discrete bins of the encounter rate
//! or a learned linear / periodic projection of the rate itself.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Serialized as `{"mode": ...}`; also read from the `bins:<n>` / `linear` /
/// `periodic` shorthand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", try_from = "EncodingRepr")]
pub enum EncodingMode {
    Discrete { n_bins: usize },
    Linear,
    Periodic,
}

#[derive(Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
enum TaggedEncoding {
    Discrete { n_bins: usize },
    Linear,
    Periodic,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum EncodingRepr {
    Text(String),
    Tagged(TaggedEncoding),
}

impl TryFrom<EncodingRepr> for EncodingMode {
    type Error = Error;

    fn try_from(r: EncodingRepr) -> Result<Self> {
        match r {
            EncodingRepr::Text(s) => EncodingMode::parse(&s),
            EncodingRepr::Tagged(TaggedEncoding::Discrete { n_bins }) => Ok(EncodingMode::Discrete { n_bins }),
            EncodingRepr::Tagged(TaggedEncoding::Linear) => Ok(EncodingMode::Linear),
            EncodingRepr::Tagged(TaggedEncoding::Periodic) => Ok(EncodingMode::Periodic),
        }
    }
}

impl EncodingMode {
    /// Parses `bins:<n>`, `linear` or `periodic`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "linear" => Ok(EncodingMode::Linear),
            "periodic" => Ok(EncodingMode::Periodic),
            _ => s
                .strip_prefix("bins:")
                .and_then(|n| n.parse().ok())
                .filter(|&n: &usize| n > 0)
                .map(|n_bins| EncodingMode::Discrete { n_bins })
                .ok_or_else(|| Error::Config(format!("unknown encoding `{s}`"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EncodingMode::Discrete { n_bins: 1 } => "1 bin".into(),
            EncodingMode::Discrete { n_bins } => format!("{n_bins} bins"),
            EncodingMode::Linear => "Linear".into(),
            EncodingMode::Periodic => "Periodic".into(),
        }
    }
}

/// Revealed state of one species at one location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SpeciesState {
    Unknown,
    Absent,
    /// Discrete bin in `1..=n_bins`.
    Present(usize),
    /// Strictly positive rate, continuous modes only.
    Value(f64),
}

/// Maps a rate to its discrete state: `0 → Absent`, otherwise `Present(⌈r·n_b⌉)`.
pub fn bin_rate(r: f64, n_bins: usize) -> Result<SpeciesState> {
    if !(0.0..=1.0).contains(&r) || n_bins == 0 {
        return Err(Error::Contract(format!(
            "rate {r} outside [0, 1] or zero bins ({n_bins})"
        )));
    }
    if r == 0.0 {
        return Ok(SpeciesState::Absent);
    }
    let b = (r * n_bins as f64).ceil() as usize;
    Ok(SpeciesState::Present(b.clamp(1, n_bins)))
}

/// State for an observed rate under `mode`.
pub fn observed_state(r: f64, mode: EncodingMode) -> Result<SpeciesState> {
    match mode {
        EncodingMode::Discrete { n_bins } => bin_rate(r, n_bins),
        EncodingMode::Linear | EncodingMode::Periodic => {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Contract(format!("rate {r} outside [0, 1]")));
            }
            Ok(if r == 0.0 {
                SpeciesState::Absent
            } else {
                SpeciesState::Value(r)
            })
        }
    }
}

/// One-hot slot for a discrete state: `0` unknown, `1` absent, `1 + b` bin `b`.
pub fn onehot_slot(s: SpeciesState, n_bins: usize) -> Result<usize> {
    match s {
        SpeciesState::Unknown => Ok(0),
        SpeciesState::Absent => Ok(1),
        SpeciesState::Present(b) if (1..=n_bins).contains(&b) => Ok(1 + b),
        other => Err(Error::Contract(format!(
            "state {other:?} has no slot with {n_bins} bins"
        ))),
    }
}

pub(crate) fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Parameter indices of the state-embedding tables inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub mode: EncodingMode,
    pub dim: usize,
    /// Discrete: `[(n_b + 2) × d]` rows u, a, p₁..p_{n_b}. Continuous: `[2 × d]` rows u, a.
    table: usize,
    /// Linear: `W` as `[1 × d]`. Periodic: frequencies `[1 × d/2]`.
    proj: Option<usize>,
    /// Linear: `b₀`. Periodic: output bias.
    proj_bias: Option<usize>,
    /// Periodic only: `[d × d]` map after the sin/cos features.
    periodic_out: Option<usize>,
}

impl StateEncoder {
    /// Registers the state tables. `n_bins` also sets the periodic frequency range `[1, 4·n_bins]`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        mode: EncodingMode,
        dim: usize,
        n_bins: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / (dim as f64).sqrt();
        let rows = match mode {
            EncodingMode::Discrete { n_bins } => n_bins + 2,
            _ => 2,
        };
        let table = store.add("state.table", normal_tensor(rng, &[rows, dim], std), false);
        let mut enc = Self {
            mode,
            dim,
            table,
            proj: None,
            proj_bias: None,
            periodic_out: None,
        };
        match mode {
            EncodingMode::Discrete { .. } => {}
            EncodingMode::Linear => {
                enc.proj = Some(store.add("state.linear.w", normal_tensor(rng, &[1, dim], std), true));
                enc.proj_bias = Some(store.add("state.linear.b", normal_tensor(rng, &[dim], std), false));
            }
            EncodingMode::Periodic => {
                if !dim.is_multiple_of(2) {
                    return Err(Error::Config("periodic encoding needs an even dimension".into()));
                }
                let hi = (4 * n_bins.max(1)) as f64;
                let freqs: Vec<f64> = (0..dim / 2).map(|_| (rng.random::<f64>() * hi.ln()).exp()).collect();
                enc.proj = Some(store.add("state.periodic.freq", Tensor::new(vec![1, dim / 2], freqs)?, false));
                enc.periodic_out = Some(store.add("state.periodic.w", normal_tensor(rng, &[dim, dim], std), true));
                enc.proj_bias = Some(store.add("state.periodic.b", Tensor::zeros(&[dim]), false));
            }
        }
        Ok(enc)
    }

    /// State vectors `[N × d]` for `states` (one per token).
    pub fn encode(&self, g: &mut Graph, params: &[Var], states: &[SpeciesState]) -> Result<Var> {
        let n = states.len();
        let d = self.dim;
        match self.mode {
            EncodingMode::Discrete { n_bins } => {
                let rows = n_bins + 2;
                let mut onehot = vec![0.0; n * rows];
                for (i, &s) in states.iter().enumerate() {
                    onehot[i * rows + onehot_slot(s, n_bins)?] = 1.0;
                }
                let oh = g.constant(Tensor::new(vec![n, rows], onehot)?);
                g.matmul(oh, params[self.table])
            }
            EncodingMode::Linear | EncodingMode::Periodic => {
                let mut onehot = vec![0.0; n * 2];
                let mut rate = vec![0.0; n];
                let mut is_value = vec![0.0; n];
                for (i, &s) in states.iter().enumerate() {
                    match s {
                        SpeciesState::Unknown => onehot[i * 2] = 1.0,
                        SpeciesState::Absent => onehot[i * 2 + 1] = 1.0,
                        SpeciesState::Value(r) if r > 0.0 && r <= 1.0 => {
                            rate[i] = r;
                            is_value[i] = 1.0;
                        }
                        other => {
                            return Err(Error::Contract(format!(
                                "state {other:?} invalid for {:?} encoding",
                                self.mode
                            )))
                        }
                    }
                }
                let oh = g.constant(Tensor::new(vec![n, 2], onehot)?);
                let base = g.matmul(oh, params[self.table])?;
                let ind = g.constant(Tensor::new(vec![n, 1], is_value.clone())?);
                let bias_row = g.reshape(params[self.proj_bias.unwrap()], &[1, d])?;
                let bias = g.matmul(ind, bias_row)?;
                let proj = self.proj.unwrap();
                let value_part = if self.mode == EncodingMode::Linear {
                    let r = g.constant(Tensor::new(vec![n, 1], rate)?);
                    g.matmul(r, params[proj])?
                } else {
                    let two_pi_r = rate.iter().map(|r| 2.0 * std::f64::consts::PI * r).collect();
                    let r = g.constant(Tensor::new(vec![n, 1], two_pi_r)?);
                    let phase = g.matmul(r, params[proj])?;
                    let s = g.sin(phase);
                    let c = g.cos(phase);
                    let feats = g.concat_cols(s, c)?;
                    let mask: Vec<f64> = is_value.iter().flat_map(|&m| std::iter::repeat_n(m, d)).collect();
                    let mask = g.constant(Tensor::new(vec![n, d], mask)?);
                    let feats = g.mul(feats, mask)?;
                    g.matmul(feats, params[self.periodic_out.unwrap()])?
                };
                let v = g.add(value_part, bias)?;
                g.add(base, v)
            }
        }
    }
}

/// Tokens `t = E[species] + S` for `species[i]` paired with state row `i` of `states`.
pub fn species_tokens(g: &mut Graph, embeddings: Var, species: &[usize], states: Var) -> Result<Var> {
    let e = g.gather_rows(embeddings, species)?;
    g.add(e, states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bin_examples() {
        assert_eq!(bin_rate(0.0, 4).unwrap(), SpeciesState::Absent);
        assert_eq!(bin_rate(0.3, 4).unwrap(), SpeciesState::Present(2));
        assert_eq!(bin_rate(1.0, 1).unwrap(), SpeciesState::Present(1));
        assert!(bin_rate(1.2, 4).is_err());
        assert!(bin_rate(-0.1, 4).is_err());
    }

    #[test]
    fn encoding_reads_both_forms() {
        let short: EncodingMode = serde_json::from_str("\"bins:4\"").unwrap();
        let tagged: EncodingMode = serde_json::from_str(r#"{"mode":"discrete","n_bins":4}"#).unwrap();
        assert_eq!(short, EncodingMode::Discrete { n_bins: 4 });
        assert_eq!(short, tagged);
        let written = serde_json::to_string(&EncodingMode::Periodic).unwrap();
        assert_eq!(written, r#"{"mode":"periodic"}"#);
        assert_eq!(
            serde_json::from_str::<EncodingMode>(&written).unwrap(),
            EncodingMode::Periodic
        );
        assert!(serde_json::from_str::<EncodingMode>("\"bins:0\"").is_err());
    }

    #[test]
    fn continuous_zero_is_absent() {
        assert_eq!(observed_state(0.0, EncodingMode::Linear).unwrap(), SpeciesState::Absent);
        assert_eq!(
            observed_state(0.4, EncodingMode::Periodic).unwrap(),
            SpeciesState::Value(0.4)
        );
    }

    fn encode_all(mode: EncodingMode, states: &[SpeciesState]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let enc = StateEncoder::init(&mut store, mode, 8, 4, &mut rng).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let v = enc.encode(&mut g, &p, states).unwrap();
        g.value(v).clone()
    }

    #[test]
    fn discrete_has_n_plus_two_distinct_rows() {
        let states: Vec<SpeciesState> = [SpeciesState::Unknown, SpeciesState::Absent]
            .into_iter()
            .chain((1..=4).map(SpeciesState::Present))
            .collect();
        let t = encode_all(EncodingMode::Discrete { n_bins: 4 }, &states);
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(t.row(i), t.row(j));
            }
        }
    }

    #[test]
    fn unknown_shared_and_linear_zero_differs_from_absent() {
        let t = encode_all(
            EncodingMode::Linear,
            &[
                SpeciesState::Unknown,
                SpeciesState::Unknown,
                SpeciesState::Absent,
                SpeciesState::Value(1e-9),
            ],
        );
        assert_eq!(t.row(0), t.row(1));
        assert_ne!(t.row(2), t.row(3));
    }

    #[test]
    fn periodic_shape() {
        let t = encode_all(
            EncodingMode::Periodic,
            &[SpeciesState::Value(0.3), SpeciesState::Absent],
        );
        assert_eq!(t.shape(), &[2, 8]);
    }

    #[test]
    fn tokens_are_embedding_plus_state() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let zero = g.constant(Tensor::zeros(&[2, 2]));
        let t = species_tokens(&mut g, e, &[1, 0], zero).unwrap();
        assert_eq!(g.value(t).data(), &[3.0, 4.0, 1.0, 2.0]);
    }

    #[test]
    fn bin_grid_matches_ceiling() {
        for &nb in &[1usize, 2, 4, 8] {
            for k in 1..=1000 {
                let r = k as f64 / 1000.0;
                let want = (r * nb as f64).ceil() as usize;
                assert_eq!(bin_rate(r, nb).unwrap(), SpeciesState::Present(want));
            }
            for k in 1..=nb {
                let r = k as f64 / nb as f64;
                assert_eq!(bin_rate(r, nb).unwrap(), SpeciesState::Present(k));
            }
        }
    }
}
