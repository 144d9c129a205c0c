//! Fixtures and invariant checks shared by the property suites and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spikeprune::autodiff::Tape;
use spikeprune::harness::data::{generate_synthetic, SyntheticConfig};
use spikeprune::harness::train::{OptimizerConfig, SupervisedTrainer};
use spikeprune::model::{Execution, Frames, ModelConfig, RunOptions, Spikformer, SpsStage};
use spikeprune::params::ParamStore;
use spikeprune::pruning::{magnitude_prune, rewind, PruneScope, Trainer};
use spikeprune::selector::{
    compose_decision, sample_keep_decision, score_tokens, Mode, ScorerWeights, SelectorConfig, SelectorKind, TokenDecision, TokenScore,
};
use spikeprune::spiking::SpikeTensor;
use spikeprune::tensor::Matrix;

pub type Check = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// 8 tokens of width 8 on a 4x8 grid-free layout; blocks are driven directly.
pub fn eight_token_config() -> ModelConfig {
    ModelConfig {
        timesteps: 3,
        depth: 2,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2.0,
        image_hw: 4,
        in_channels: 3,
        sps_stages: vec![SpsStage { channels: 8, pool: true }],
        rpe: true,
        patch_tokens: 4,
        num_classes: 3,
        selector_layers: vec![2],
        ..ModelConfig::compact()
    }
}

pub fn model(cfg: ModelConfig, kind: SelectorKind, rho: f64, seed: u64) -> (Spikformer, ParamStore) {
    let sel = SelectorConfig { rho, kind, ..SelectorConfig::default() };
    Spikformer::new(cfg, sel, &mut rng(seed)).expect("valid fixture")
}

pub fn random_image(cfg: &ModelConfig, r: &mut impl Rng) -> Frames {
    let px = cfg.image_hw * cfg.image_hw;
    Frames::new(Matrix::from_fn(px, cfg.in_channels, |_, _| r.random_range(0.0..1.5)), 1).unwrap()
}

pub fn random_spikes(t: usize, n: usize, d: usize, rate: f64, r: &mut impl Rng) -> SpikeTensor {
    SpikeTensor::new(Matrix::from_fn(t * n, d, |_, _| if r.random_bool(rate) { 1.0 } else { 0.0 }), t, n).unwrap()
}

pub fn token_rows(x: &SpikeTensor, n: usize) -> Vec<f32> {
    (0..x.timesteps()).flat_map(|t| x.matrix().row(t * x.tokens() + n).to_vec()).collect()
}

fn mask_of(bits: u32, n: usize) -> Vec<bool> {
    (0..n).map(|i| bits >> i & 1 == 1).collect()
}

/// Masked SSA and MLP equal gather, compute, scatter for every keep mask over `n` tokens.
pub fn check_masked_equals_gather(seed: u64, n: usize) -> Check {
    let cfg = eight_token_config();
    let (m, p) = model(cfg.clone(), SelectorKind::Spiking, 0.7, seed);
    let mut r = rng(seed ^ 0xA5);
    let x = random_spikes(cfg.timesteps, n, cfg.embed_dim, 0.4, &mut r);
    for bits in 0..(1u32 << n) {
        let hard = mask_of(bits, n);
        let keep = TokenDecision::from_hard(hard.clone());
        let idx: Vec<usize> = (0..n).filter(|&i| hard[i]).collect();
        for layer in 1..=cfg.depth {
            for (name, full) in [("ssa", m.ssa_forward(&p, layer, &x, &keep)), ("mlp", m.mlp_forward(&p, layer, &x, &keep))] {
                let full = full.map_err(|e| e.to_string())?;
                let compact = if idx.is_empty() {
                    None
                } else {
                    let g = x.gather_tokens(&idx);
                    let all = TokenDecision::keep_all(idx.len());
                    Some(if name == "ssa" { m.ssa_forward(&p, layer, &g, &all) } else { m.mlp_forward(&p, layer, &g, &all) }.map_err(|e| e.to_string())?)
                };
                for tok in 0..n {
                    let expect = match (&compact, idx.iter().position(|&i| i == tok)) {
                        (Some(c), Some(j)) => token_rows(c, j),
                        _ => token_rows(&x, tok),
                    };
                    ensure!(token_rows(&full, tok) == expect, "{name} layer {layer} mask {bits:0n$b} token {tok} differs", n = n);
                }
            }
        }
    }
    Ok(())
}

/// Outputs at kept positions do not depend on what dropped tokens carry.
pub fn check_dropped_tokens_are_inert(seed: u64) -> Check {
    let cfg = eight_token_config();
    let (m, p) = model(cfg.clone(), SelectorKind::Spiking, 0.7, seed);
    let mut r = rng(seed);
    let n = 8;
    let x = random_spikes(cfg.timesteps, n, cfg.embed_dim, 0.4, &mut r);
    let hard: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
    let keep = TokenDecision::from_hard(hard.clone());
    let mut noisy = x.matrix().clone();
    for t in 0..cfg.timesteps {
        for tok in (0..n).filter(|&i| !hard[i]) {
            for v in noisy.row_mut(t * n + tok) {
                *v = if r.random_bool(0.5) { 1.0 } else { 0.0 };
            }
        }
    }
    let y = SpikeTensor::new(noisy, cfg.timesteps, n).unwrap();
    for layer in 1..=cfg.depth {
        let a = m.ssa_forward(&p, layer, &x, &keep).map_err(|e| e.to_string())?;
        let b = m.ssa_forward(&p, layer, &y, &keep).map_err(|e| e.to_string())?;
        let a2 = m.mlp_forward(&p, layer, &x, &keep).map_err(|e| e.to_string())?;
        let b2 = m.mlp_forward(&p, layer, &y, &keep).map_err(|e| e.to_string())?;
        for tok in (0..n).filter(|&i| hard[i]) {
            ensure!(token_rows(&a, tok) == token_rows(&b, tok), "ssa kept token {tok} saw dropped tokens");
            ensure!(token_rows(&a2, tok) == token_rows(&b2, tok), "mlp kept token {tok} saw dropped tokens");
        }
    }
    Ok(())
}

/// Every spike tensor the network produces is binary, in train and eval mode.
pub fn check_spike_binarity(seed: u64) -> Check {
    let cfg = ModelConfig::compact();
    let (m, p) = model(cfg.clone(), SelectorKind::Spiking, 0.6, seed);
    let mut r = rng(seed);
    let img = random_image(&cfg, &mut r);
    for opts in [RunOptions { capture: true, ..RunOptions::eval() }, RunOptions { capture: true, ..RunOptions::train(1.0) }] {
        let out = m.forward(&p, &img, &opts, &mut r).map_err(|e| e.to_string())?;
        ensure!(out.captures.len() == cfg.depth + 1, "expected {} captures", cfg.depth + 1);
        for (i, c) in out.captures.iter().enumerate() {
            ensure!(c.matrix().is_binary(), "capture {i} is not binary");
        }
    }
    let x = random_spikes(cfg.timesteps, cfg.patch_tokens, cfg.embed_dim, 0.5, &mut r);
    let keep = TokenDecision::keep_all(cfg.patch_tokens);
    ensure!(m.ssa_forward(&p, 1, &x, &keep).map_err(|e| e.to_string())?.matrix().is_binary(), "ssa output not binary");
    ensure!(m.mlp_forward(&p, 1, &x, &keep).map_err(|e| e.to_string())?.matrix().is_binary(), "mlp output not binary");
    Ok(())
}

/// Cumulative decisions only ever drop tokens, keep at least one, and the
/// final decision is the last layer's.
pub fn check_decision_monotonicity(seed: u64, rho: f64) -> Check {
    let cfg = ModelConfig::compact();
    let mut r = rng(seed);
    let img = random_image(&cfg, &mut r);
    for kind in [SelectorKind::Spiking, SelectorKind::Random] {
        let (m, p) = model(cfg.clone(), kind, rho, seed);
        for opts in [RunOptions::eval(), RunOptions::train(1.0), RunOptions { execution: Execution::Gather, ..RunOptions::eval() }] {
            let out = m.forward(&p, &img, &opts, &mut r).map_err(|e| e.to_string())?;
            let hist = &out.decision.layer_history;
            ensure!(hist.len() == cfg.selector_layers.len(), "history has {} layers", hist.len());
            let mut prev = vec![true; cfg.patch_tokens];
            for rec in hist {
                ensure!(rec.hard.iter().zip(&prev).all(|(&h, &p)| !h || p), "layer {} revived a dropped token", rec.layer);
                ensure!(rec.hard.iter().any(|&h| h), "layer {} dropped every token", rec.layer);
                prev = rec.hard.clone();
            }
            ensure!(out.decision.hard == prev, "final decision differs from the last layer");
            if opts.mode == Mode::Eval {
                let expect = spikeprune::selector::keep_schedule(rho, &cfg.selector_layers, cfg.patch_tokens);
                let got: Vec<usize> = hist.iter().map(|h| h.hard.iter().filter(|&&b| b).count()).collect();
                ensure!(got == expect, "eval kept {got:?}, schedule {expect:?}");
            }
        }
    }
    // Hadamard composition keeps zeros
    let prev = TokenDecision::from_hard(mask_of(0b1010_1101, 8));
    let new = TokenDecision::from_hard(mask_of(0b0111_0111, 8));
    let c = compose_decision(&prev, &new).map_err(|e| e.to_string())?;
    ensure!(c.hard == mask_of(0b0010_0101, 8), "composition is not elementwise AND");
    Ok(())
}

/// Pruning masks nest across rounds and pruned weights stay exactly zero through training.
pub fn check_mask_nesting(seed: u64) -> Check {
    let cfg = ModelConfig::compact();
    let (m, init) = model(cfg.clone(), SelectorKind::Spiking, 0.7, seed);
    let syn = SyntheticConfig::default();
    let train = generate_synthetic(16, &syn, &mut rng(seed)).map_err(|e| e.to_string())?;
    let opt = OptimizerConfig { epochs: 1, batch_size: 8, ..OptimizerConfig::default() };
    let mut t = SupervisedTrainer::new(m, &train, &train, opt, seed);
    t.parallelism = spikeprune::parallel::Parallelism::Sequential;
    let mut params = init.clone();
    let mut prev = params.masks();
    for round in 0..3 {
        magnitude_prune(&mut params, 0.3, PruneScope::Global).map_err(|e| e.to_string())?;
        rewind(&mut params, &init).map_err(|e| e.to_string())?;
        let masks = params.masks();
        for (a, b) in prev.iter().zip(&masks) {
            if let (Some(a), Some(b)) = (a, b) {
                ensure!(b.is_subset_of(a), "round {round} mask is not nested");
            }
        }
        t.train(&mut params, &mut |_, _| {}).map_err(|e| e.to_string())?;
        for q in params.iter() {
            if let Some(mask) = &q.mask {
                let leaked = q.values.as_slice().iter().zip(&mask.0).any(|(&v, &k)| !k && v != 0.0);
                ensure!(!leaked, "{} has a nonzero pruned weight after training", q.name);
            }
        }
        prev = masks;
    }
    Ok(())
}

/// Token scores are row-stochastic for arbitrary scorer weights.
pub fn check_row_stochastic(seed: u64) -> Check {
    let mut r = rng(seed);
    let (n, d, h) = (r.random_range(1..20), r.random_range(1..12), r.random_range(1..10));
    let scale = r.random_range(0.1..20.0f32);
    let mut m = |rows, cols| Matrix::from_fn(rows, cols, |_, _| r.random_range(-scale..scale));
    let gap = m(n, d);
    let (w1, b1, w2, b2) = (m(d, h), m(1, h), m(h, 2), m(1, 2));
    let s = score_tokens(&gap, ScorerWeights { w1: &w1, b1: &b1, w2: &w2, b2: &b2 }).map_err(|e| e.to_string())?;
    for row in 0..n {
        let (a, b) = (s.0.get(row, 0), s.0.get(row, 1));
        ensure!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b), "row {row} outside [0, 1]");
        ensure!((a + b - 1.0).abs() < 1e-6, "row {row} sums to {}", a + b);
    }
    Ok(())
}

/// Forward through a straight-through node is the hard value; backward reaches the soft path.
pub fn check_straight_through(seed: u64) -> Check {
    let mut r = rng(seed);
    let n = 6;
    let soft_v = Matrix::from_fn(n, 1, |_, _| r.random_range(0.05..0.95f32));
    let hard = Matrix::from_fn(n, 1, |i, _| if soft_v.get(i, 0) > 0.5 { 1.0 } else { 0.0 });
    let w = Matrix::from_fn(n, 1, |_, _| r.random_range(0.5..1.5f32));
    let mut tape = Tape::new();
    let soft = tape.param(0, &soft_v);
    let st = tape.straight_through(hard.clone(), soft).map_err(|e| e.to_string())?;
    ensure!(tape.value(st) == &hard, "straight-through forward is not the hard value");
    let loss = tape.mse(st, w.clone()).map_err(|e| e.to_string())?;
    let g = tape.backward(loss).map_err(|e| e.to_string())?.param(0).ok_or("no gradient reached the soft input")?;
    for i in 0..n {
        let expect = 2.0 * (hard.get(i, 0) - w.get(i, 0)) / n as f32;
        ensure!((g.get(i, 0) - expect).abs() < 1e-6, "token {i}: gradient {} vs {expect}", g.get(i, 0));
        ensure!(g.get(i, 0) != 0.0, "token {i}: zero gradient");
    }

    // end to end: a train-mode step sends gradient into every scorer
    let cfg = ModelConfig::compact();
    let (m, p) = model(cfg.clone(), SelectorKind::Spiking, 0.7, seed);
    let img = random_image(&cfg, &mut r);
    let sg = m.sample_gradients(&p, &img, 1, &RunOptions::train(1.0), 2.0, &mut r).map_err(|e| e.to_string())?;
    for idx in m.scorer_params() {
        let g = sg.grads.iter().find(|(i, _)| *i == idx).map(|(_, g)| g.squared_norm()).unwrap_or(0.0);
        ensure!(g > 0.0, "scorer parameter {} got no gradient", p.get(idx).name);
    }
    Ok(())
}

/// Empirical keep frequency of one token over `draws` train-mode samples.
pub fn gumbel_keep_frequency(keep_prob: f32, tau: f32, draws: usize, seed: u64) -> f64 {
    let n = 8;
    let scores = TokenScore(Matrix::from_fn(n, 2, |_, c| if c == 0 { keep_prob } else { 1.0 - keep_prob }));
    let alive = vec![true; n];
    let cfg = SelectorConfig { gumbel_temperature: tau, ..SelectorConfig::default() };
    let mut r = rng(seed);
    let mut kept = 0usize;
    for _ in 0..draws {
        let d = sample_keep_decision(&scores, &alive, &cfg, Mode::Train, tau, &mut r).unwrap();
        kept += d.hard[3] as usize;
    }
    kept as f64 / draws as f64
}

pub fn check_gumbel_frequency(keep_prob: f32, seed: u64) -> Check {
    let f = gumbel_keep_frequency(keep_prob, 1.0, 10_000, seed);
    ensure!((f - keep_prob as f64).abs() <= 0.02, "keep frequency {f} vs probability {keep_prob}");
    Ok(())
}

// ---- smooth-path gradient oracle ----

struct Smooth {
    t: usize,
    n: usize,
    x: Matrix,
    noise: Vec<f32>,
    target: Matrix,
    label: usize,
    tau: f32,
    params: Vec<Matrix>,
}

const D: usize = 8;
const H: usize = 8;
const C: usize = 4;

fn smooth_fixture(seed: u64) -> Smooth {
    let mut r = rng(seed);
    let (t, n) = (3, 6);
    let x = Matrix::from_fn(t * n, D, |_, _| if r.random_bool(0.5) { 1.0 } else { 0.0 });
    let noise = (0..n).map(|_| r.random_range(-1.0..1.0f32)).collect();
    let target = Matrix::from_fn(n, 2, |_, c| if c == 0 { 0.7 } else { 0.3 });
    let mut m = |rows, cols, s: f32| Matrix::from_fn(rows, cols, |_, _| r.random_range(-s..s));
    let params = vec![m(D, H, 0.8), m(1, H, 0.3), m(H, 2, 0.8), m(1, 2, 0.3), m(1, D, 1.0), m(1, D, 0.5), m(D, C, 0.8), m(1, C, 0.3)];
    Smooth { t, n, x, noise, target, label: 2, tau: 0.7, params }
}

fn smooth_tape_grads(f: &Smooth) -> (f64, Vec<Matrix>) {
    let mut tape = Tape::new();
    let x = tape.input(&f.x);
    let ids: Vec<_> = f.params.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let gap = tape.temporal_mean(x, f.t).unwrap();
    let h = tape.matmul(gap, ids[0]).unwrap();
    let h = tape.add_bias(h, ids[1]).unwrap();
    let h = tape.tanh(h);
    let z = tape.matmul(h, ids[2]).unwrap();
    let z = tape.add_bias(z, ids[3]).unwrap();
    let s = tape.softmax_rows(z);
    let keep = tape.gumbel_keep(s, f.noise.clone(), f.tau).unwrap();
    let a = tape.affine(x, ids[4], ids[5]).unwrap();
    let pooled = tape.token_mean_pool(a, Some(keep), f.t).unwrap();
    let logits = tape.matmul(pooled, ids[6]).unwrap();
    let logits = tape.add_bias(logits, ids[7]).unwrap();
    let ce = tape.cross_entropy(logits, f.label).unwrap();
    let pen = tape.ratio_penalty(keep, 0.6);
    let mse = tape.mse(s, f.target.clone()).unwrap();
    let loss = tape.weighted_sum(vec![(ce, 1.0), (pen, 0.5), (mse, 0.3)]).unwrap();
    let value = tape.value(loss).get(0, 0) as f64;
    let g = tape.backward(loss).unwrap();
    (value, (0..f.params.len()).map(|i| g.param(i).unwrap()).collect())
}

/// Independent f64 implementation of the same composite loss.
fn smooth_loss_f64(f: &Smooth, p: &[Vec<f64>]) -> f64 {
    let (t, n) = (f.t, f.n);
    let x = |r: usize, d: usize| f.x.get(r, d) as f64;
    let (w1, b1, w2, b2, g, s, wh, bh) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5], &p[6], &p[7]);
    let mut keep = vec![0.0; n];
    let mut mse = 0.0;
    for tok in 0..n {
        let gap: Vec<f64> = (0..D).map(|d| (0..t).map(|st| x(st * n + tok, d)).sum::<f64>() / t as f64).collect();
        let h: Vec<f64> = (0..H).map(|j| ((0..D).map(|d| gap[d] * w1[d * H + j]).sum::<f64>() + b1[j]).tanh()).collect();
        let z: Vec<f64> = (0..2).map(|c| (0..H).map(|j| h[j] * w2[j * 2 + c]).sum::<f64>() + b2[c]).collect();
        let m = z[0].max(z[1]);
        let e = [(z[0] - m).exp(), (z[1] - m).exp()];
        let sm = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
        mse += (sm[0] - f.target.get(tok, 0) as f64).powi(2) + (sm[1] - f.target.get(tok, 1) as f64).powi(2);
        let zz = (sm[0].ln() - sm[1].ln() + f.noise[tok] as f64) / f.tau as f64;
        keep[tok] = 1.0 / (1.0 + (-zz).exp());
    }
    mse /= (2 * n) as f64;
    let total: f64 = keep.iter().sum();
    let mut pooled = vec![0.0; D];
    for st in 0..t {
        for tok in 0..n {
            for d in 0..D {
                pooled[d] += keep[tok] * (x(st * n + tok, d) * g[d] + s[d]) / total;
            }
        }
    }
    pooled.iter_mut().for_each(|v| *v /= t as f64);
    let logits: Vec<f64> = (0..C).map(|c| (0..D).map(|d| pooled[d] * wh[d * C + c]).sum::<f64>() + bh[c]).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let ce = lse - logits[f.label];
    let mean_keep = total / n as f64;
    ce + 0.5 * (mean_keep - 0.6).powi(2) + 0.3 * mse
}

/// Relative error `|g_tape - g_fd| / |g_fd|` over all parameters of the smooth path.
pub fn smooth_gradient_error(seed: u64) -> (usize, f64) {
    let f = smooth_fixture(seed);
    let (value, tape_g) = smooth_tape_grads(&f);
    let mut p: Vec<Vec<f64>> = f.params.iter().map(|m| m.as_slice().iter().map(|&v| v as f64).collect()).collect();
    let base = smooth_loss_f64(&f, &p);
    assert!((base - value).abs() < 1e-4 * base.abs().max(1.0), "oracle value {base} vs tape {value}");
    let eps = 1e-6;
    let (mut diff2, mut ref2, mut count) = (0.0f64, 0.0f64, 0usize);
    for i in 0..p.len() {
        for j in 0..p[i].len() {
            let orig = p[i][j];
            p[i][j] = orig + eps;
            let up = smooth_loss_f64(&f, &p);
            p[i][j] = orig - eps;
            let down = smooth_loss_f64(&f, &p);
            p[i][j] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = tape_g[i].as_slice()[j] as f64;
            diff2 += (an - fd).powi(2);
            ref2 += fd.powi(2);
            count += 1;
        }
    }
    (count, (diff2 / ref2).sqrt())
}

pub fn check_smooth_gradients(seed: u64) -> Check {
    let (count, err) = smooth_gradient_error(seed);
    ensure!(count >= 100, "only {count} parameters checked");
    ensure!(err < 1e-4, "relative gradient error {err:e} over {count} parameters");
    Ok(())
}
