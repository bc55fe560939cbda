use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dense::{uniform_tensor, Dense};
use super::ModelSpec;
use crate::encoding::{normal_tensor, species_tokens, SpeciesState, StateEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn init<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add(
                format!("{name}.w"),
                uniform_tensor(rng, &[fan_in, fan_out], fan_in),
                true,
            ),
            b: store.add(format!("{name}.b"), uniform_tensor(rng, &[fan_out], fan_in), false),
        }
    }

    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.w])?;
        g.add_row(y, p[self.b])
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gamma: usize,
    beta: usize,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.g"), Tensor::full(&[d], 1.0), false),
            beta: store.add(format!("{name}.b"), Tensor::zeros(&[d]), false),
        }
    }

    fn apply(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        g.layer_norm(x, p[self.gamma], p[self.beta])
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct CisoLayout {
    trunk: Dense,
    embed: usize,
    states: StateEncoder,
    blocks: Vec<Block>,
    final_ln: Norm,
    /// Per-species readout: weights `[|C| × d]`, bias `[|C|]`.
    readout_w: usize,
    readout_b: usize,
}

/// Flat gather indices that split `[B·L × d]` into heads `[B·H, L, d/H]`.
fn split_heads_index(b: usize, l: usize, d: usize, h: usize) -> Vec<usize> {
    let dh = d / h;
    let mut idx = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for hi in 0..h {
            for li in 0..l {
                let base = (bi * l + li) * d + hi * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx
}

/// Inverse of [`split_heads_index`].
fn merge_heads_index(b: usize, l: usize, d: usize, h: usize) -> Vec<usize> {
    let dh = d / h;
    let mut idx = Vec::with_capacity(b * l * d);
    for bi in 0..b {
        for li in 0..l {
            for hi in 0..h {
                let base = ((bi * h + hi) * l + li) * dh;
                idx.extend(base..base + dh);
            }
        }
    }
    idx
}

impl CisoLayout {
    pub fn init(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = spec.hidden_dim;
        let c = spec.n_species;
        let mut dims = vec![spec.n_env];
        dims.extend(spec.widths());
        let trunk = Dense::init_trunk(store, "trunk", &dims, rng);
        let std = 1.0 / (d as f64).sqrt();
        let embed = store.add("species.embed", normal_tensor(rng, &[c, d], std), false);
        let states = StateEncoder::init(store, spec.encoding, d, spec.n_bins(), rng)?;
        let ff = d * spec.ff_mult;
        let blocks = (0..spec.transformer_layers)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    ln1: Norm::init(store, &format!("{n}.ln1"), d),
                    q: Linear::init(store, &format!("{n}.attn.q"), d, d, rng),
                    k: Linear::init(store, &format!("{n}.attn.k"), d, d, rng),
                    v: Linear::init(store, &format!("{n}.attn.v"), d, d, rng),
                    o: Linear::init(store, &format!("{n}.attn.o"), d, d, rng),
                    ln2: Norm::init(store, &format!("{n}.ln2"), d),
                    ff1: Linear::init(store, &format!("{n}.ff1"), d, ff, rng),
                    ff2: Linear::init(store, &format!("{n}.ff2"), ff, d, rng),
                }
            })
            .collect();
        let final_ln = Norm::init(store, "final_ln", d);
        let readout_w = store.add("readout.w", uniform_tensor(rng, &[c, d], d), true);
        let readout_b = store.add("readout.b", uniform_tensor(rng, &[c], d), false);
        Ok(Self {
            trunk,
            embed,
            states,
            blocks,
            final_ln,
            readout_w,
            readout_b,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        spec: &ModelSpec,
        g: &mut Graph,
        p: &[Var],
        x: Var,
        states: Option<&[SpeciesState]>,
        mut rng: Option<&mut ChaCha8Rng>,
        mut attention: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let b = g.value(x).rows();
        let c = spec.n_species;
        let d = spec.hidden_dim;
        let h = spec.heads;
        let l = c + 1;
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

        let z = self.trunk.forward(g, p, x)?;
        let species: Vec<usize> = (0..b).flat_map(|_| 0..c).collect();
        let s = self.states.encode(g, p, states)?;
        let tokens = species_tokens(g, p[self.embed], &species, s)?;
        let stacked = g.concat_rows(z, tokens)?;
        let order: Vec<usize> = (0..b)
            .flat_map(|bi| std::iter::once(bi).chain((0..c).map(move |ci| b + bi * c + ci)))
            .collect();
        let mut hs = g.gather_rows(stacked, &order)?;

        let split = split_heads_index(b, l, d, h);
        let merge = merge_heads_index(b, l, d, h);
        let dh = d / h;
        let scale = 1.0 / (dh as f64).sqrt();
        let p_drop = spec.dropout;
        for blk in &self.blocks {
            let n1 = blk.ln1.apply(g, p, hs)?;
            let q = blk.q.apply(g, p, n1)?;
            let k = blk.k.apply(g, p, n1)?;
            let v = blk.v.apply(g, p, n1)?;
            let q = g.gather(q, split.clone(), &[b * h, l, dh])?;
            let k = g.gather(k, split.clone(), &[b * h, l, dh])?;
            let v = g.gather(v, split.clone(), &[b * h, l, dh])?;
            let scores = g.batch_matmul(q, k, true)?;
            let scores = g.scale(scores, scale);
            let mut attn = g.softmax_rows(scores);
            if let Some(maps) = attention.as_deref_mut() {
                maps.push(attn);
            }
            if let Some(r) = rng.as_deref_mut() {
                attn = g.dropout(attn, p_drop, r)?;
            }
            let ctx = g.batch_matmul(attn, v, false)?;
            let ctx = g.gather(ctx, merge.clone(), &[b * l, d])?;
            let mut out = blk.o.apply(g, p, ctx)?;
            if let Some(r) = rng.as_deref_mut() {
                out = g.dropout(out, p_drop, r)?;
            }
            hs = g.add(hs, out)?;

            let n2 = blk.ln2.apply(g, p, hs)?;
            let f = blk.ff1.apply(g, p, n2)?;
            let f = g.gelu(f);
            let mut f = blk.ff2.apply(g, p, f)?;
            if let Some(r) = rng.as_deref_mut() {
                f = g.dropout(f, p_drop, r)?;
            }
            hs = g.add(hs, f)?;
        }
        let hs = self.final_ln.apply(g, p, hs)?;

        let token_rows: Vec<usize> = (0..b).flat_map(|bi| (1..l).map(move |li| bi * l + li)).collect();
        let out = g.gather_rows(hs, &token_rows)?;
        let w = g.gather_rows(p[self.readout_w], &species)?;
        let prod = g.mul(out, w)?;
        let logits = g.row_sum(prod);
        let logits = g.reshape(logits, &[b, c])?;
        let logits = g.add_row(logits, p[self.readout_b])?;
        Ok(g.sigmoid(logits))
    }
}
