//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its criterion.
//!
//! Run alone with `cargo test --test acceptance`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ciso::colocate::{colocate_points, haversine_km, BallTree, GeoPoint, EARTH_RADIUS_KM};
use ciso::dataio::{fit_norm, Split};
use ciso::encoding::{bin_rate, EncodingMode, SpeciesState};
use ciso::features::{fit_maxent, MaxentConfig};
use ciso::metrics::{auc, mae, mse, topk_adaptive};
use ciso::models::{Family, Model, ModelSpec};
use ciso::numerics::{Graph, ParamStore, Tensor};
use ciso::synth::{generate, oracle_report, SynthSpec};
use ciso::training::{evaluate, make_batch, train, EvalProtocol, Preset, Rows, TrainConfig};

/// Criteria run one at a time so their wall-clock budgets are measured alone.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes straight to stdout so the line shows even when output is captured.
fn report(id: usize, title: &str, outcome: Result<String, String>) {
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    let line = format!("criterion {id:>2} {status}  {title}: {detail}\n");
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

// ---------------------------------------------------------------- 1

fn toy_spec(family: Family, mode: EncodingMode) -> ModelSpec {
    let mut s = ModelSpec::new(family, 4, 5);
    s.hidden_dim = 8;
    s.heads = 2;
    s.transformer_layers = 1;
    s.ff_mult = 2;
    s.encoding = mode;
    s
}

fn random_states(rng: &mut ChaCha8Rng, n: usize, mode: EncodingMode) -> Vec<SpeciesState> {
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => SpeciesState::Unknown,
            1 => SpeciesState::Absent,
            _ => match mode {
                EncodingMode::Discrete { n_bins } => SpeciesState::Present(rng.random_range(1..=n_bins)),
                _ => SpeciesState::Value(rng.random_range(0.05..1.0)),
            },
        })
        .collect()
}

struct Probe {
    env: Vec<Vec<f64>>,
    states: Option<Vec<SpeciesState>>,
    targets: Vec<f64>,
    mask: Vec<bool>,
}

fn probe_loss(model: &Model, store: &ParamStore, p: &Probe) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let y = model.forward(&mut g, &vars, &p.env, p.states.as_deref(), None).unwrap();
    let loss = g.bce_masked(y, &p.targets, &p.mask).unwrap();
    let value = g.value(loss).item();
    let grads = g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| grads.get_or_zeros(v, store.get(i).len()))
        .collect();
    (value, gs)
}

/// Largest relative error over every parameter entry of one model.
fn max_gradient_error(seed: u64) -> (usize, f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, c, n_env) = (3, 4, 5);
    let env: Vec<Vec<f64>> = (0..b)
        .map(|_| (0..n_env).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let targets: Vec<f64> = (0..b * c).map(|_| rng.random_range(0.0..1.0)).collect();
    let mask: Vec<bool> = (0..b * c).map(|i| i == 0 || rng.random_bool(0.8)).collect();

    let mut models = Vec::new();
    let bins = EncodingMode::Discrete { n_bins: 4 };
    for family in [Family::Linear, Family::Mlp] {
        models.push((Model::new(toy_spec(family, bins), None, seed).unwrap(), None));
    }
    let maxent = fit_maxent(&env, 4, 3).unwrap();
    models.push((
        Model::new(toy_spec(Family::Maxent, bins), Some(maxent), seed).unwrap(),
        None,
    ));
    let st = random_states(&mut rng, b * c, bins);
    models.push((
        Model::new(toy_spec(Family::MlpPlusPlus, bins), None, seed).unwrap(),
        Some(st),
    ));
    for mode in [bins, EncodingMode::Linear, EncodingMode::Periodic] {
        let st = random_states(&mut rng, b * c, mode);
        models.push((Model::new(toy_spec(Family::Ciso, mode), None, seed).unwrap(), Some(st)));
    }

    let h = 1e-4;
    let (mut checked, mut worst, mut where_) = (0usize, 0.0f64, String::new());
    for (model, states) in models {
        let probe = Probe {
            env: env.clone(),
            states,
            targets: targets.clone(),
            mask: mask.clone(),
        };
        let (_, grads) = probe_loss(&model, &model.params, &probe);
        let mut store = model.params.clone();
        for i in 0..store.len() {
            for j in 0..store.get(i).len() {
                let orig = store.get(i).data()[j];
                let mut at = |dx: f64| {
                    store.get_mut(i).data_mut()[j] = orig + dx;
                    probe_loss(&model, &store, &probe).0
                };
                // fourth-order central difference
                let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                store.get_mut(i).data_mut()[j] = orig;
                let analytic = grads[i][j];
                let scale = analytic.abs().max(numeric.abs());
                // below this scale the difference quotient is dominated by rounding
                let err = if scale < 1e-9 {
                    0.0
                } else {
                    (analytic - numeric).abs() / scale
                };
                checked += 1;
                if err > worst {
                    worst = err;
                    where_ = format!("{} {}[{j}]", model.spec.family.name(), store.name(i));
                }
            }
        }
    }
    (checked, worst, where_)
}

#[test]
fn criterion_01_gradients_match_finite_differences() {
    let _serial = serial();
    let start = Instant::now();
    let results: Vec<(u64, (usize, f64, String))> = thread::scope(|s| {
        let handles: Vec<_> = (0..20u64)
            .map(|seed| s.spawn(move || (seed, max_gradient_error(seed))))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let elapsed = start.elapsed();
    let checked: usize = results.iter().map(|r| r.1 .0).sum();
    let (seed, (_, worst, at)) = results
        .iter()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .cloned()
        .unwrap();
    let detail = format!(
        "{checked} entries over 20 seeds, worst rel err {worst:.2e} (seed {seed}, {at}), {:.1}s",
        elapsed.as_secs_f64()
    );
    let ok = worst <= 1e-4 && elapsed < Duration::from_secs(60);
    report(1, "gradient correctness", if ok { Ok(detail) } else { Err(detail) });
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_maxent_feature_count() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let rows: Vec<Vec<f64>> = (0..200)
        .map(|_| (0..27).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect();
    let d = MaxentConfig::default();
    let cfg = fit_maxent(&rows, d.n_hinge_knots, d.n_thresholds).unwrap();
    let n = cfg.n_features();
    let expanded = cfg.expand(&rows[0]).len();
    let detail = format!("n_features {n}, expanded row length {expanded}");
    report(
        2,
        "maxent feature count",
        if n == 1161 && expanded == 1161 {
            Ok(detail)
        } else {
            Err(detail)
        },
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_binning_law() {
    let _serial = serial();
    let mut mismatches = Vec::new();
    let mut cells = 0;
    for n_b in [1usize, 2, 4, 8] {
        for i in 0..=1000usize {
            let r = i as f64 / 1000.0;
            let expected = if i == 0 {
                SpeciesState::Absent
            } else {
                // integer ceiling of i·n_b / 1000
                SpeciesState::Present((i * n_b).div_ceil(1000))
            };
            let got = bin_rate(r, n_b).unwrap();
            cells += 1;
            if got != expected {
                mismatches.push(format!("r={r} n_b={n_b}: {got:?} vs {expected:?}"));
            }
        }
    }
    let detail = format!(
        "{cells} grid points, {} mismatches {:?}",
        mismatches.len(),
        mismatches.first()
    );
    report(
        3,
        "binning law",
        if mismatches.is_empty() { Ok(detail) } else { Err(detail) },
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_mask_integrity() {
    let _serial = serial();
    let mut spec = SynthSpec::paired(3, 4, 64, 3.0, 4);
    spec.missingness = 0.3;
    let ds = generate(&spec).unwrap();
    let idx: Vec<usize> = (0..ds.records.len()).collect();
    let norm = fit_norm(&ds.records, &idx, &ds.env_names).unwrap();
    let rows = Rows::build(&ds, &norm, &idx);
    let mode = EncodingMode::Discrete { n_bins: 2 };
    let mut ms = ModelSpec::new(Family::Ciso, ds.n_species(), norm.n_out());
    ms.hidden_dim = 8;
    ms.heads = 2;
    ms.transformer_layers = 1;
    ms.ff_mult = 2;
    ms.encoding = mode;
    let model = Model::new(ms, None, 4).unwrap();
    let supervised = vec![true; ds.n_species()];
    let batch_idx: Vec<usize> = (0..32).collect();
    let batch = make_batch(
        &rows,
        &batch_idx,
        Family::Ciso,
        mode,
        0.75,
        &supervised,
        &mut ChaCha8Rng::seed_from_u64(40),
    )
    .unwrap();
    let c = ds.n_species();

    let run = |targets: &[f64]| -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g);
        let y = model
            .forward(&mut g, &vars, &batch.env, Some(&batch.states), None)
            .unwrap();
        // zero leaf whose gradient equals the gradient at each prediction cell
        let probe = g.param(Tensor::zeros(&[batch.env.len(), c]));
        let y = g.add(y, probe).unwrap();
        let loss = g.bce_masked(y, targets, &batch.mask).unwrap();
        let value = g.value(loss).item();
        let grads = g.backward(loss).unwrap();
        let dy = grads.get_or_zeros(probe, batch.mask.len());
        let dp = vars
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.get_or_zeros(v, model.params.get(i).len()))
            .collect();
        (value, dy, dp)
    };

    let (mut known, mut unavailable, mut leaks) = (0usize, 0usize, 0usize);
    for (cell, (&m, s)) in batch.mask.iter().zip(&batch.states).enumerate() {
        let avail = rows.available[batch_idx[cell / c]][cell % c];
        let revealed = *s != SpeciesState::Unknown;
        known += usize::from(revealed);
        unavailable += usize::from(!avail);
        if m && (revealed || !avail) {
            leaks += 1;
        }
    }

    let (loss, dy, dp) = run(&batch.targets);
    let mut nonzero_excluded = 0;
    let mut zero_included = 0;
    for (cell, &m) in batch.mask.iter().enumerate() {
        if !m && dy[cell] != 0.0 {
            nonzero_excluded += 1;
        }
        if m && dy[cell] == 0.0 {
            zero_included += 1;
        }
    }
    let mut perturbed = batch.targets.clone();
    for (cell, &m) in batch.mask.iter().enumerate() {
        if !m {
            perturbed[cell] = 1.0 - perturbed[cell] + 0.37;
        }
    }
    let (loss2, dy2, dp2) = run(&perturbed);
    let invariant = loss2 == loss && dy2 == dy && dp2 == dp;

    let detail = format!(
        "{known} revealed and {unavailable} unavailable cells, {leaks} in loss mask, \
         {nonzero_excluded} with non-zero gradient, perturbation invariant {invariant}"
    );
    let ok = known > 0 && unavailable > 0 && leaks == 0 && nonzero_excluded == 0 && zero_included == 0 && invariant;
    report(4, "mask integrity", if ok { Ok(detail) } else { Err(detail) });
}

// ---------------------------------------------------------------- 5

/// Great-circle distance through the chord between unit vectors.
fn chord_km(p: (f64, f64), q: (f64, f64)) -> f64 {
    let v = |(lat, lon): (f64, f64)| {
        let (la, lo) = (lat.to_radians(), lon.to_radians());
        [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
    };
    let (a, b) = (v(p), v(q));
    let c = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
    2.0 * EARTH_RADIUS_KM * (c / 2.0).asin()
}

#[test]
fn criterion_05_colocation_oracle() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pts = |tag: &str| -> Vec<GeoPoint> {
        (0..1000)
            .map(|i| GeoPoint {
                id: format!("{tag}{i:04}"),
                lat: rng.random_range(45.0..45.25),
                lon: rng.random_range(7.0..7.3),
            })
            .collect()
    };
    let a = pts("a");
    let b = pts("b");
    let radius = 1.0;
    let joined = colocate_points(&a, &b, radius);
    let tree = BallTree::build(b.clone());

    let mut problems = Vec::new();
    let mut pairs_in_radius = 0usize;
    let mut worst = 0.0f64;
    let mut next = joined.iter().peekable();
    for (ai, p) in a.iter().enumerate() {
        let q = (p.lat, p.lon);
        let mut brute: Vec<(usize, f64)> = b
            .iter()
            .enumerate()
            .map(|(bi, o)| (bi, haversine_km(q, (o.lat, o.lon))))
            .filter(|&(_, d)| d <= radius)
            .collect();
        pairs_in_radius += brute.len();
        let mut from_tree = tree.within(q, radius);
        from_tree.sort_by_key(|&(i, _)| i);
        let same_set = from_tree.len() == brute.len() && from_tree.iter().zip(&brute).all(|(x, y)| x.0 == y.0);
        if !same_set {
            problems.push(format!("within-radius set differs for {}", p.id));
        }
        for &(bi, d) in &from_tree {
            let oracle = chord_km(q, (b[bi].lat, b[bi].lon));
            worst = worst.max((d - oracle).abs());
        }
        brute.sort_by(|x, y| x.1.total_cmp(&y.1).then_with(|| b[x.0].id.cmp(&b[y.0].id)));
        let got = next.next_if(|c| c.a_index == ai);
        match (brute.first(), got) {
            (None, None) => {}
            (Some(&(bi, _)), Some(c)) if c.b_index == bi && c.b_id == b[bi].id => {
                let oracle = chord_km(q, (b[bi].lat, b[bi].lon));
                worst = worst.max((c.distance_km - oracle).abs());
            }
            (e, g) => problems.push(format!("{}: expected {e:?}, got {g:?}", p.id)),
        }
    }
    let detail = format!(
        "{} matched of 1000, {pairs_in_radius} pairs within radius, max distance error {worst:.2e} km, {} mismatches",
        joined.len(),
        problems.len()
    );
    let ok = problems.is_empty() && worst <= 1e-9 && !joined.is_empty();
    report(
        5,
        "colocation oracle",
        if ok {
            Ok(detail)
        } else {
            Err(format!("{detail} {:?}", problems.first()))
        },
    );
}

// ---------------------------------------------------------------- 6

fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| wins / pairs)
}

/// Adaptive top-k by counting, for each scored species, how many scored
/// species outrank it.
fn topk_enumerated(pred: &[f64], truth: &[f64], mask: &[bool], c: usize) -> Option<f64> {
    let (mut total, mut n) = (0.0, 0usize);
    for loc in 0..pred.len() / c {
        let row = loc * c;
        let scored: Vec<usize> = (0..c).filter(|&s| mask[row + s]).collect();
        let k = scored.iter().filter(|&&s| truth[row + s] > 0.0).count();
        if k == 0 {
            continue;
        }
        let hits = scored
            .iter()
            .filter(|&&s| {
                let outranked_by = scored
                    .iter()
                    .filter(|&&o| pred[row + o] > pred[row + s] || (pred[row + o] == pred[row + s] && o < s))
                    .count();
                outranked_by < k && truth[row + s] > 0.0
            })
            .count();
        total += hits as f64 / k as f64;
        n += 1;
    }
    (n > 0).then(|| 100.0 * total / n as f64)
}

fn naive_mean(pred: &[f64], truth: &[f64], mask: &[bool], power: i32) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for i in 0..pred.len() {
        if mask[i] {
            s += (pred[i] - truth[i]).abs().powi(power);
            n += 1.0;
        }
    }
    s / n
}

#[test]
fn criterion_06_metric_oracles() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 4];
    let mut failures = Vec::new();
    for inst in 0..100 {
        let (locs, c) = (rng.random_range(1..25), rng.random_range(1..12));
        let n = locs * c;
        // coarse scores create ties
        let pred: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
        let truth: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.4) {
                    rng.random_range(0.01..1.0)
                } else {
                    0.0
                }
            })
            .collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.85)).collect();
        mask[0] = true;
        let labels: Vec<bool> = truth.iter().map(|&t| t > 0.0).collect();

        match (auc(&pred, &labels), auc_pairs(&pred, &labels)) {
            (Some(a), Some(b)) => worst[0] = worst[0].max((a - b).abs()),
            (None, None) => {}
            other => failures.push(format!("instance {inst}: auc {other:?}")),
        }
        let (got, _) = topk_adaptive(&pred, &truth, &mask, c).unwrap();
        match (got, topk_enumerated(&pred, &truth, &mask, c)) {
            (Some(a), Some(b)) => worst[1] = worst[1].max((a - b).abs()),
            (None, None) => {}
            other => failures.push(format!("instance {inst}: top-k {other:?}")),
        }
        worst[2] = worst[2].max((mae(&pred, &truth, &mask).unwrap() - naive_mean(&pred, &truth, &mask, 1)).abs());
        worst[3] = worst[3].max((mse(&pred, &truth, &mask).unwrap() - naive_mean(&pred, &truth, &mask, 2)).abs());
    }
    let detail = format!(
        "max |diff| auc {:.1e}, top-k {:.1e}, mae {:.1e}, mse {:.1e} over 100 instances",
        worst[0], worst[1], worst[2], worst[3]
    );
    let ok = failures.is_empty() && worst.iter().all(|&w| w <= 1e-12);
    report(
        6,
        "metric oracles",
        if ok {
            Ok(detail)
        } else {
            Err(format!("{detail} {failures:?}"))
        },
    );
}

// ---------------------------------------------------------------- 7 and 8

struct SynthRun {
    unconditioned: f64,
    conditioned: f64,
    oracle_marginal: f64,
    oracle_conditional: f64,
}

/// Trains CISO on the paired synthetic community and scores the children
/// with and without the roots revealed.
fn synth_run(weight: f64, seed: u64) -> SynthRun {
    let spec = SynthSpec::paired(5, 5, 5000, weight, seed);
    let ds = generate(&spec).unwrap();
    let roots: Vec<usize> = (0..5).collect();
    let children: Vec<usize> = (5..10).collect();
    let oracle = oracle_report(&spec, &ds, Split::Test, &roots, &children).unwrap();

    let mut ms = ModelSpec::new(Family::Ciso, 10, 5);
    ms.hidden_dim = 32;
    ms.ff_mult = 2;
    ms.encoding = EncodingMode::Discrete { n_bins: 1 };
    let mut cfg = TrainConfig::preset(Preset::Splotopen);
    cfg.epochs = 10;
    cfg.lr = 3e-3;
    cfg.seed = seed;
    let out = train(&ds, ms, &cfg).unwrap();
    let norm = &out.checkpoint.norm;
    let score = |condition: Vec<usize>| {
        let p = EvalProtocol::new("synth", condition, children.clone(), Split::Test).unwrap();
        evaluate(&out.model, norm, &ds, &p).unwrap().report.aggregates.mae_x100 / 100.0
    };
    SynthRun {
        unconditioned: score(Vec::new()),
        conditioned: score(roots),
        oracle_marginal: oracle.marginal_mae,
        oracle_conditional: oracle.conditional_mae,
    }
}

fn synth_runs(weight: f64) -> (Vec<SynthRun>, Duration) {
    let start = Instant::now();
    let runs = thread::scope(|s| {
        let handles: Vec<_> = (0..3u64).map(|seed| s.spawn(move || synth_run(weight, seed))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    (runs, start.elapsed())
}

#[test]
fn criterion_07_conditioning_improves_prediction() {
    let _serial = serial();
    let (runs, elapsed) = synth_runs(4.0);
    let mut ok = elapsed < Duration::from_secs(600);
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let gain = 1.0 - r.conditioned / r.unconditioned;
        let ratio = r.unconditioned / r.oracle_marginal;
        ok &= gain >= 0.10 && (ratio - 1.0).abs() <= 0.20;
        parts.push(format!(
            "seed {seed}: uncond {:.4} cond {:.4} gain {:.1}% oracle {:.4}/{:.4} ratio {ratio:.3}",
            r.unconditioned,
            r.conditioned,
            100.0 * gain,
            r.oracle_marginal,
            r.oracle_conditional
        ));
    }
    let detail = format!("{}; {:.0}s", parts.join("; "), elapsed.as_secs_f64());
    report(
        7,
        "conditioning improves prediction",
        if ok { Ok(detail) } else { Err(detail) },
    );
}

#[test]
fn criterion_08_no_interaction_null() {
    let _serial = serial();
    let (runs, elapsed) = synth_runs(0.0);
    let mut ok = true;
    let mut parts = Vec::new();
    for (seed, r) in runs.iter().enumerate() {
        let diff = (r.conditioned - r.unconditioned).abs();
        ok &= diff < 0.005;
        parts.push(format!("seed {seed}: |cond - uncond| {diff:.5}"));
    }
    let detail = format!("{}; {:.0}s", parts.join("; "), elapsed.as_secs_f64());
    report(8, "no-interaction null", if ok { Ok(detail) } else { Err(detail) });
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_parameter_counts() {
    let _serial = serial();
    let count = |family| {
        let spec = ModelSpec::new(family, 3951, 27);
        Model::new(spec, None, 0).unwrap().param_count()
    };
    let (mlp, ciso) = (count(Family::Mlp), count(Family::Ciso));
    let dev = |n: usize, target: f64| n as f64 / target - 1.0;
    let detail = format!(
        "MLP {mlp} ({:+.1}% vs 1.1M), CISO {ciso} ({:+.1}% vs 7.1M)",
        100.0 * dev(mlp, 1.1e6),
        100.0 * dev(ciso, 7.1e6)
    );
    let ok = dev(mlp, 1.1e6).abs() <= 0.05 && dev(ciso, 7.1e6).abs() <= 0.05;
    report(9, "parameter counts", if ok { Ok(detail) } else { Err(detail) });
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> ciso::Result<()> {
    let mut full = vec!["ciso"];
    full.extend_from_slice(args);
    ciso::cli::run(full)
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn ablation_structure(dir: &Path) -> Result<String, String> {
    let data = dir.join("syn");
    cli(&[
        "synth",
        "--pairs",
        "3",
        "--locations",
        "400",
        "--seed",
        "10",
        "--out-dir",
        data.to_str().unwrap(),
    ])
    .map_err(|e| e.to_string())?;
    let cfg = dir.join("ablate.json");
    fs::write(
        &cfg,
        r#"{"preset": "splotopen", "epochs": 1, "batch_size": 64, "ff_mult": 1}"#,
    )
    .unwrap();
    let out = dir.join("ablate");
    cli(&[
        "ablate",
        "--dataset",
        data.join("dataset.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ])
    .map_err(|e| e.to_string())?;

    let mut problems = Vec::new();
    let numeric =
        |rows: &[Vec<String>], from: usize| rows.iter().all(|r| r[from..].iter().all(|v| v.parse::<f64>().is_ok()));

    let (h, rows) = read_csv(&out.join("encoding.csv"));
    let labels: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    if labels != ["4 bins", "1 bin", "Periodic", "Linear"] {
        problems.push(format!("encoding rows {labels:?}"));
    }
    let uncond = h.iter().filter(|c| c.starts_with("uncond_")).count();
    let cond = h.iter().filter(|c| c.starts_with("cond_")).count();
    if uncond == 0 || uncond != cond || !numeric(&rows, 1) {
        problems.push(format!("encoding columns {h:?}"));
    }

    let (h, rows) = read_csv(&out.join("depth.csv"));
    let got: Vec<(String, String)> = rows.iter().map(|r| (r[0].clone(), r[1].clone())).collect();
    let want: Vec<(String, String)> = [
        ("MLP", "MLP-3"),
        ("MLP", "MLP-5"),
        ("MLP", "MLP-6"),
        ("MLP", "MLP-7"),
        ("Unconditioned", "MLP++"),
        ("Unconditioned", "CISO"),
        ("Conditioned", "MLP++"),
        ("Conditioned", "CISO"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect();
    if got != want || h.last().map(String::as_str) != Some("params") || !numeric(&rows, 2) {
        problems.push(format!("depth table {h:?} {got:?}"));
    }
    let params: Vec<usize> = rows[..4].iter().map(|r| r.last().unwrap().parse().unwrap()).collect();
    if !params.windows(2).all(|w| w[0] < w[1]) {
        problems.push(format!("MLP parameter counts not increasing with depth: {params:?}"));
    }

    let (h, rows) = read_csv(&out.join("dims.csv"));
    let dims: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    if dims != ["64", "128", "256"] || h[0] != "hidden_dim" || !numeric(&rows, 1) {
        problems.push(format!("dims table {h:?} {dims:?}"));
    }

    if problems.is_empty() {
        Ok("encoding 4 modes x {uncond, cond}, depths {3,5,6,7} plus MLP++/CISO, dims {64,128,256}".into())
    } else {
        Err(problems.join("; "))
    }
}

/// Optional run on a user-supplied processed dataset. Trains unconditioned
/// MLP, MLP++ and CISO, then checks
/// conditioned CISO > conditioned MLP++ > unconditioned MLP on the selection metric.
fn real_data_ordering() -> Option<Result<String, String>> {
    let dataset = PathBuf::from(std::env::var_os("CISO_REAL_DATASET")?);
    let preset = std::env::var("CISO_REAL_PRESET").unwrap_or_else(|_| "satbird".into());
    let condition = std::env::var("CISO_REAL_CONDITION").ok()?;
    let target = std::env::var("CISO_REAL_TARGET").ok()?;
    let dir = tempfile::tempdir().unwrap();
    let mut scores = Vec::new();
    for (family, conditioned) in [("mlp", false), ("mlp++", true), ("ciso", true)] {
        let cfg = dir.path().join(format!("{family}.json"));
        let protocol = if conditioned {
            serde_json::json!({"name": "p", "condition_groups": [condition], "target_groups": [target]})
        } else {
            serde_json::json!({"name": "p", "target_groups": [target]})
        };
        let run = serde_json::json!({
            "dataset": dataset, "family": family, "preset": preset, "protocols": [protocol],
        });
        fs::write(&cfg, run.to_string()).unwrap();
        let out = dir.path().join(family.replace('+', "p"));
        if let Err(e) = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ]) {
            return Some(Err(format!("{family}: {e}")));
        }
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("report_p.json")).unwrap()).unwrap();
        let agg = &report["aggregates"];
        let metric = agg["topk_pct"]
            .as_f64()
            .or_else(|| agg["auc_pct"].as_f64())
            .unwrap_or(f64::NAN);
        scores.push((family, metric));
    }
    let detail = format!("{scores:?}");
    Some(if scores[2].1 > scores[1].1 && scores[1].1 > scores[0].1 {
        Ok(detail)
    } else {
        Err(detail)
    })
}

#[test]
fn criterion_10_ablation_machinery() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let structure = ablation_structure(dir.path());
    let structure = structure.map(|d| format!("{d}; {:.0}s", start.elapsed().as_secs_f64()));
    let outcome = match (structure, real_data_ordering()) {
        (Err(e), _) => Err(e),
        (Ok(s), None) => Ok(format!("{s}; real-data ordering skipped (CISO_REAL_DATASET unset)")),
        (Ok(s), Some(Ok(o))) => Ok(format!("{s}; real-data ordering {o}")),
        (Ok(s), Some(Err(o))) => Err(format!("{s}; real-data ordering violated {o}")),
    };
    report(10, "ablation machinery", outcome);
}

// ---------------------------------------------------------------- 11

#[test]
fn criterion_11_deterministic_checkpoints() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("syn");
    cli(&[
        "synth",
        "--pairs",
        "2",
        "--locations",
        "300",
        "--seed",
        "11",
        "--out-dir",
        data.to_str().unwrap(),
    ])
    .unwrap();
    let cfg = dir.path().join("run.json");
    let run = serde_json::json!({
        "dataset": data.join("dataset.csv"),
        "family": "ciso",
        "preset": "splotopen",
        "seed": 11,
        "model": {"hidden_dim": 16, "ff_mult": 2},
        "train": {"epochs": 2},
    });
    fs::write(&cfg, run.to_string()).unwrap();
    let mut bytes = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .unwrap();
        bytes.push(fs::read(out.join("checkpoint.json")).unwrap());
    }
    let identical = bytes[0] == bytes[1];
    let detail = format!(
        "checkpoints {} and {} bytes, identical {identical}",
        bytes[0].len(),
        bytes[1].len()
    );
    report(11, "determinism", if identical { Ok(detail) } else { Err(detail) });
}
