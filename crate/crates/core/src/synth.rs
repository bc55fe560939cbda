//! Synthetic communities with planted directed interactions, and the exact
//! Bayes oracle for them.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{spatial_block_split, Dataset, LocationRecord, Split, SplitFractions, TargetKind};
use crate::error::{Error, Result};

/// Largest roster the oracle will enumerate.
pub const MAX_ORACLE_SPECIES: usize = 12;

/// `parent` present adds `weight` to `child`'s logit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub parent: usize,
    pub child: usize,
    pub weight: f64,
}

/// Encounter rates for present species are drawn from `Beta(alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateModel {
    pub alpha: f64,
    pub beta: f64,
}

impl RateModel {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_species: usize,
    pub n_env: usize,
    pub n_locations: usize,
    pub interactions: Vec<Interaction>,
    /// `θ_c`, one row per species.
    pub env_weights: Vec<Vec<f64>>,
    pub intercepts: Vec<f64>,
    /// Standard deviation of Gaussian logit noise, drawn per cell.
    pub noise: f64,
    /// Presence/absence when `None`.
    #[serde(default)]
    pub rates: Option<RateModel>,
    /// Probability that a cell is unavailable.
    #[serde(default)]
    pub missingness: f64,
    #[serde(default)]
    pub groups: BTreeMap<String, Vec<usize>>,
    pub seed: u64,
}

impl SynthSpec {
    /// Roots `0..h` respond to the environment; species `h + i` has root `i`
    /// as its only parent with weight `±weight` (alternating signs) and a
    /// weaker environmental response. Groups `roots` and `children`.
    pub fn paired(n_pairs: usize, n_env: usize, n_locations: usize, weight: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let n = 2 * n_pairs;
        let mut env_weights = Vec::with_capacity(n);
        for c in 0..n {
            let scale = if c < n_pairs { 1.5 } else { 0.75 };
            env_weights.push(
                (0..n_env)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
            );
        }
        let interactions: Vec<Interaction> = (0..n_pairs)
            .map(|i| Interaction {
                parent: i,
                child: n_pairs + i,
                weight: if i % 2 == 0 { weight } else { -weight },
            })
            .collect();
        // Centre each child so that its marginal stays away from 0 and 1.
        let intercepts = (0..n)
            .map(|c| match interactions.iter().find(|e| e.child == c) {
                Some(e) => -e.weight / 2.0,
                None => 0.0,
            })
            .collect();
        let mut groups = BTreeMap::new();
        groups.insert("roots".to_string(), (0..n_pairs).collect());
        groups.insert("children".to_string(), (n_pairs..n).collect());
        Self {
            n_species: n,
            n_env,
            n_locations,
            interactions,
            env_weights,
            intercepts,
            noise: 0.5,
            rates: None,
            missingness: 0.0,
            groups,
            seed,
        }
    }

    /// Species in an order where every parent precedes its children.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.n_species;
        let mut indegree = vec![0usize; n];
        for e in &self.interactions {
            indegree[e.child] += 1;
        }
        let mut ready: Vec<usize> = (0..n).rev().filter(|&c| indegree[c] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(c) = ready.pop() {
            order.push(c);
            for e in self.interactions.iter().filter(|e| e.parent == c) {
                indegree[e.child] -= 1;
                if indegree[e.child] == 0 {
                    ready.push(e.child);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Config("interaction graph has a cycle".into()));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_species;
        if n == 0 {
            return Err(Error::Config("synthetic roster is empty".into()));
        }
        if self.env_weights.len() != n
            || self.intercepts.len() != n
            || self.env_weights.iter().any(|w| w.len() != self.n_env)
        {
            return Err(Error::Config(
                "env weights and intercepts must cover every species".into(),
            ));
        }
        for e in &self.interactions {
            if e.parent >= n || e.child >= n || e.parent == e.child {
                return Err(Error::Config(format!("invalid interaction {} → {}", e.parent, e.child)));
            }
            if !e.weight.is_finite() {
                return Err(Error::Config("interaction weights must be finite".into()));
            }
        }
        if !(0.0..1.0).contains(&self.missingness) || !(self.noise >= 0.0) {
            return Err(Error::Config(
                "missingness must lie in [0, 1) and noise be non-negative".into(),
            ));
        }
        if let Some(r) = self.rates {
            if !(r.alpha > 0.0 && r.beta > 0.0) {
                return Err(Error::Config("Beta parameters must be positive".into()));
            }
        }
        for (g, members) in &self.groups {
            if members.iter().any(|&c| c >= n) {
                return Err(Error::Config(format!("group `{g}` names a species outside the roster")));
            }
        }
        self.topological_order().map(|_| ())
    }

    /// Logit of species `c` before noise, given its parents' presences.
    pub fn logit(&self, c: usize, env: &[f64], present: &[bool]) -> f64 {
        let mut z = self.intercepts[c] + self.env_weights[c].iter().zip(env).map(|(w, x)| w * x).sum::<f64>();
        for e in self.interactions.iter().filter(|e| e.child == c) {
            if present[e.parent] {
                z += e.weight;
            }
        }
        z
    }

    pub fn species_names(&self) -> Vec<String> {
        (0..self.n_species).map(|c| format!("s{c:02}")).collect()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `E[sigmoid(a + σ Z)]` for standard normal `Z`, by the trapezoid rule on `[-8, 8]`.
pub fn smoothed_sigmoid(a: f64, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return sigmoid(a);
    }
    const STEPS: usize = 320;
    let h = 16.0 / STEPS as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = 0.0;
    for i in 0..=STEPS {
        let z = -8.0 + i as f64 * h;
        let w = if i == 0 || i == STEPS { 0.5 } else { 1.0 };
        s += w * norm * (-0.5 * z * z).exp() * sigmoid(a + sigma * z);
    }
    s * h
}

/// Samples a dataset and assigns a 1° spatial block split.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let order = spec.topological_order()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let beta = spec
        .rates
        .map(|r| Beta::new(r.alpha, r.beta).map_err(|e| Error::Config(e.to_string())))
        .transpose()?;
    let n = spec.n_species;
    let mut records = Vec::with_capacity(spec.n_locations);
    for i in 0..spec.n_locations {
        let lat = rng.random_range(30.0..50.0);
        let lon = rng.random_range(-120.0..-70.0);
        let env: Vec<f64> = (0..spec.n_env).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut present = vec![false; n];
        for &c in &order {
            let noise: f64 = rng.sample(StandardNormal);
            let p = sigmoid(spec.logit(c, &env, &present) + spec.noise * noise);
            present[c] = rng.random::<f64>() < p;
        }
        let targets = present
            .iter()
            .map(|&y| match (&beta, y) {
                (_, false) => 0.0,
                (None, true) => 1.0,
                (Some(b), true) => b.sample(&mut rng).max(1e-6),
            })
            .collect();
        let available = (0..n).map(|_| rng.random::<f64>() >= spec.missingness).collect();
        records.push(LocationRecord {
            id: format!("loc{i:05}"),
            lat,
            lon,
            env,
            targets,
            available,
        });
    }
    let species = spec.species_names();
    let groups = spec
        .groups
        .iter()
        .map(|(g, members)| {
            let mut m = vec![false; n];
            for &c in members {
                m[c] = true;
            }
            (g.clone(), m)
        })
        .collect();
    let split = spatial_block_split(&records, 1.0, SplitFractions::default(), spec.seed)?;
    Ok(Dataset {
        species,
        env_names: (0..spec.n_env).map(|j| format!("env_{j}")).collect(),
        groups,
        kind: if spec.rates.is_some() {
            TargetKind::Rate
        } else {
            TargetKind::Binary
        },
        records,
        split: Some(split),
    })
}

/// Exact `P(c present | env, revealed)` for every species, by enumerating
/// all joint presence configurations consistent with `revealed`.
pub fn bayes_conditional(spec: &SynthSpec, env: &[f64], revealed: &[Option<bool>]) -> Result<Vec<f64>> {
    let n = spec.n_species;
    if n > MAX_ORACLE_SPECIES {
        return Err(Error::Config(format!(
            "oracle enumeration supports at most {MAX_ORACLE_SPECIES} species, got {n}"
        )));
    }
    if revealed.len() != n || env.len() != spec.n_env {
        return Err(Error::Contract(
            "oracle inputs do not match the synthetic community".into(),
        ));
    }
    let order = spec.topological_order()?;
    let parents: Vec<Vec<usize>> = (0..n)
        .map(|c| {
            spec.interactions
                .iter()
                .filter(|e| e.child == c)
                .map(|e| e.parent)
                .collect()
        })
        .collect();
    // P(present) per species and parent configuration.
    let tables: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            (0..1usize << parents[c].len())
                .map(|bits| {
                    let mut present = vec![false; n];
                    for (k, &p) in parents[c].iter().enumerate() {
                        present[p] = bits >> k & 1 == 1;
                    }
                    smoothed_sigmoid(spec.logit(c, env, &present), spec.noise)
                })
                .collect()
        })
        .collect();
    let mut total = 0.0;
    let mut marg = vec![0.0; n];
    'configs: for config in 0..1usize << n {
        let y = |c: usize| config >> c & 1 == 1;
        for (c, r) in revealed.iter().enumerate() {
            if matches!(r, Some(v) if *v != y(c)) {
                continue 'configs;
            }
        }
        let mut w = 1.0;
        for &c in &order {
            let bits = parents[c]
                .iter()
                .enumerate()
                .fold(0, |acc, (k, &p)| acc | (y(p) as usize) << k);
            let p = tables[c][bits];
            w *= if y(c) { p } else { 1.0 - p };
        }
        total += w;
        for (c, m) in marg.iter_mut().enumerate() {
            if y(c) {
                *m += w;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::Contract("revealed states have zero probability".into()));
    }
    Ok(marg.into_iter().map(|m| m / total).collect())
}

/// Oracle predictions of the target value (presence probability, or expected
/// encounter rate) for one record.
pub fn oracle_prediction(spec: &SynthSpec, record: &LocationRecord, condition: &[usize]) -> Result<Vec<f64>> {
    let mut revealed = vec![None; spec.n_species];
    for &c in condition {
        if record.available[c] {
            revealed[c] = Some(record.targets[c] > 0.0);
        }
    }
    let p = bayes_conditional(spec, &record.env, &revealed)?;
    let scale = spec.rates.map_or(1.0, |r| r.mean());
    Ok(p.into_iter().map(|v| v * scale).collect())
}

/// Oracle MAEs on one split of a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub split: Split,
    pub condition: Vec<usize>,
    pub targets: Vec<usize>,
    pub cells: usize,
    pub marginal_mae: f64,
    pub conditional_mae: f64,
}

pub fn oracle_report(
    spec: &SynthSpec,
    ds: &Dataset,
    split: Split,
    condition: &[usize],
    targets: &[usize],
) -> Result<OracleReport> {
    let (mut m, mut k, mut cells) = (0.0, 0.0, 0usize);
    for i in ds.indices(split)? {
        let r = &ds.records[i];
        let marginal = oracle_prediction(spec, r, &[])?;
        let conditional = oracle_prediction(spec, r, condition)?;
        for &t in targets {
            if r.available[t] {
                m += (marginal[t] - r.targets[t]).abs();
                k += (conditional[t] - r.targets[t]).abs();
                cells += 1;
            }
        }
    }
    if cells == 0 {
        return Err(Error::Contract("no scored cells for the oracle".into()));
    }
    Ok(OracleReport {
        split,
        condition: condition.to_vec(),
        targets: targets.to_vec(),
        cells,
        marginal_mae: m / cells as f64,
        conditional_mae: k / cells as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(w: f64, noise: f64) -> SynthSpec {
        SynthSpec {
            n_species: 3,
            n_env: 2,
            n_locations: 10,
            interactions: vec![
                Interaction {
                    parent: 0,
                    child: 1,
                    weight: w,
                },
                Interaction {
                    parent: 1,
                    child: 2,
                    weight: -w,
                },
            ],
            env_weights: vec![vec![1.0, -0.5], vec![0.3, 0.2], vec![-0.7, 0.4]],
            intercepts: vec![0.2, -1.0, 0.5],
            noise,
            rates: None,
            missingness: 0.0,
            groups: BTreeMap::new(),
            seed: 3,
        }
    }

    #[test]
    fn cycle_is_rejected() {
        let mut s = chain(1.0, 0.0);
        s.interactions.push(Interaction {
            parent: 2,
            child: 0,
            weight: 1.0,
        });
        assert!(matches!(generate(&s), Err(Error::Config(_))));
    }

    #[test]
    fn root_marginal_is_plain_sigmoid() {
        let s = chain(2.0, 0.0);
        let env = [0.3, -0.8];
        let p = bayes_conditional(&s, &env, &[None; 3]).unwrap();
        assert!((p[0] - sigmoid(0.2 + 0.3 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn smoothed_sigmoid_matches_closed_forms() {
        assert!((smoothed_sigmoid(0.0, 1.3) - 0.5).abs() < 1e-12);
        let (a, s) = (0.7, 0.9);
        assert!((smoothed_sigmoid(a, s) + smoothed_sigmoid(-a, s) - 1.0).abs() < 1e-12);
        // sigma → 0 recovers the sigmoid
        assert!((smoothed_sigmoid(a, 1e-6) - sigmoid(a)).abs() < 1e-9);
    }

    #[test]
    fn revealing_parent_shifts_child_by_sign() {
        let s = chain(3.0, 0.4);
        let env = [0.1, 0.1];
        let base = bayes_conditional(&s, &env, &[None; 3]).unwrap();
        let on = bayes_conditional(&s, &env, &[Some(true), None, None]).unwrap();
        let off = bayes_conditional(&s, &env, &[Some(false), None, None]).unwrap();
        assert!(on[1] > base[1] && base[1] > off[1]);
        // grandchild has a negative edge from species 1
        assert!(on[2] < off[2]);
    }

    #[test]
    fn enumeration_matches_monte_carlo() {
        let s = chain(2.5, 0.6);
        let env = [-0.4, 0.7];
        let oracle = bayes_conditional(&s, &env, &[None, None, Some(true)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let order = s.topological_order().unwrap();
        let (mut kept, mut hits) = (0usize, [0usize; 3]);
        for _ in 0..200_000 {
            let mut y = [false; 3];
            for &c in &order {
                let z: f64 = rng.sample(StandardNormal);
                y[c] = rng.random::<f64>() < sigmoid(s.logit(c, &env, &y) + s.noise * z);
            }
            if y[2] {
                kept += 1;
                for c in 0..3 {
                    hits[c] += y[c] as usize;
                }
            }
        }
        for c in 0..2 {
            let f = hits[c] as f64 / kept as f64;
            let sd = (oracle[c] * (1.0 - oracle[c]) / kept as f64).sqrt();
            assert!((f - oracle[c]).abs() < 3.0 * sd, "species {c}: {f} vs {}", oracle[c]);
        }
        assert_eq!(oracle[2], 1.0);
    }

    #[test]
    fn no_interactions_means_conditioning_is_inert() {
        let mut s = chain(0.0, 0.3);
        s.interactions.clear();
        let env = [0.2, 0.9];
        let a = bayes_conditional(&s, &env, &[None; 3]).unwrap();
        let b = bayes_conditional(&s, &env, &[Some(true), None, Some(false)]).unwrap();
        assert!((a[1] - b[1]).abs() < 1e-15);
    }

    #[test]
    fn missingness_zero_keeps_everything() {
        let s = SynthSpec::paired(2, 3, 50, 4.0, 1);
        let ds = generate(&s).unwrap();
        assert!(ds.records.iter().all(|r| r.available.iter().all(|&a| a)));
        let mut m = s.clone();
        m.missingness = 0.5;
        let ds = generate(&m).unwrap();
        let dropped = ds.records.iter().flat_map(|r| &r.available).filter(|&&a| !a).count();
        assert!(dropped > 50 && dropped < 150);
    }

    #[test]
    fn rate_mode_values() {
        let mut s = SynthSpec::paired(2, 3, 200, 4.0, 2);
        s.rates = Some(RateModel { alpha: 2.0, beta: 3.0 });
        let ds = generate(&s).unwrap();
        assert_eq!(ds.kind, TargetKind::Rate);
        assert!(ds
            .records
            .iter()
            .flat_map(|r| &r.targets)
            .all(|&t| (0.0..1.0).contains(&t)));
        assert!(ds.validate().is_ok());
    }

    #[test]
    fn oracle_refuses_large_rosters() {
        let s = SynthSpec::paired(7, 2, 1, 1.0, 0);
        assert!(bayes_conditional(&s, &[0.0, 0.0], &[None; 14]).is_err());
    }

    #[test]
    fn strong_parent_effect_is_visible_in_samples() {
        let mut s = chain(5.0, 0.0);
        s.interactions.truncate(1);
        s.env_weights = vec![vec![0.0; 2]; 3];
        s.intercepts = vec![0.0, -2.5, 0.0];
        s.n_locations = 100_000;
        let ds = generate(&s).unwrap();
        let (mut with, mut with_n, mut without, mut without_n) = (0.0, 0.0, 0.0, 0.0);
        for r in &ds.records {
            if r.targets[0] > 0.0 {
                with += r.targets[1];
                with_n += 1.0;
            } else {
                without += r.targets[1];
                without_n += 1.0;
            }
        }
        let (p1, p0) = (with / with_n, without / without_n);
        assert!((p1 - sigmoid(2.5)).abs() < 0.01 && (p0 - sigmoid(-2.5)).abs() < 0.01);
    }
}
