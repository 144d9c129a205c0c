//! Firing-rate token selection.
//!
//! A selector pools a spike tensor over time, scores every token with a
//! two-layer MLP followed by a row softmax (`[N, 2]`, column 0 = keep), then
//! draws binary keep decisions: Gumbel-Softmax with a straight-through
//! estimator while training, deterministic top-`ceil(rho * alive)` at eval.
//! Decisions compose multiplicatively across layers so a dropped token stays
//! dropped.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::spiking::SpikeTensor;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectorKind {
    /// Learned firing-rate scorer.
    Spiking,
    /// Uniformly random subset of the alive tokens (ablation baseline).
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TemperatureSchedule {
    Constant,
    LinearAnneal { start: f32, end: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectorConfig {
    pub kind: SelectorKind,
    pub rho: f64,
    pub gumbel_temperature: f32,
    pub temperature_schedule: TemperatureSchedule,
    /// Scorer hidden width; `0` means `D / 2`.
    pub hidden_width: usize,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            kind: SelectorKind::Spiking,
            rho: 0.7,
            gumbel_temperature: 1.0,
            temperature_schedule: TemperatureSchedule::Constant,
            hidden_width: 0,
        }
    }
}

impl SelectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("keep ratio rho must be in (0, 1], got {}", self.rho)));
        }
        if !(self.gumbel_temperature > 0.0) {
            return Err(Error::Config(format!("gumbel temperature must be > 0, got {}", self.gumbel_temperature)));
        }
        if let TemperatureSchedule::LinearAnneal { start, end } = self.temperature_schedule {
            if !(start > 0.0 && end > 0.0) {
                return Err(Error::Config("annealed gumbel temperatures must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn hidden(&self, channels: usize) -> usize {
        if self.hidden_width == 0 {
            (channels / 2).max(1)
        } else {
            self.hidden_width
        }
    }

    /// Temperature for `epoch` out of `epochs` (anneal reaches `end` on the last epoch).
    pub fn temperature_at(&self, epoch: usize, epochs: usize) -> f32 {
        match self.temperature_schedule {
            TemperatureSchedule::Constant => self.gumbel_temperature,
            TemperatureSchedule::LinearAnneal { start, end } => {
                if epochs <= 1 {
                    return end;
                }
                let f = epoch.min(epochs - 1) as f32 / (epochs - 1) as f32;
                start + (end - start) * f
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row-stochastic keep/drop probabilities, `[N, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore(pub Matrix);

impl TokenScore {
    pub fn tokens(&self) -> usize {
        self.0.rows()
    }

    pub fn keep_prob(&self, n: usize) -> f32 {
        self.0.get(n, 0)
    }

    pub fn keep_probs(&self) -> Vec<f32> {
        (0..self.tokens()).map(|n| self.keep_prob(n)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    /// 1-based encoder block the selector gated.
    pub layer: usize,
    pub hard: Vec<bool>,
    pub scores: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDecision {
    pub hard: Vec<bool>,
    pub soft: Vec<f32>,
    pub layer_history: Vec<LayerRecord>,
}

impl TokenDecision {
    pub fn keep_all(n: usize) -> Self {
        Self {
            hard: vec![true; n],
            soft: vec![1.0; n],
            layer_history: Vec::new(),
        }
    }

    pub fn from_hard(hard: Vec<bool>) -> Self {
        let soft = hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
        Self { hard, soft, layer_history: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.hard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hard.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.hard.iter().filter(|&&h| h).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.hard.iter().enumerate().filter(|(_, &h)| h).map(|(i, _)| i).collect()
    }

    pub fn hard_matrix(&self) -> Matrix {
        Matrix::from_vec(self.len(), 1, self.hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect())
    }

    pub fn all_kept(&self) -> bool {
        self.hard.iter().all(|&h| h)
    }
}

/// Per-channel firing rate of each token: `x[t, n, d]` averaged over `t`.
pub fn temporal_gap(x: &SpikeTensor) -> Result<Matrix> {
    let mut tape = Tape::new();
    let xn = tape.input(x.matrix());
    let g = tape.temporal_mean(xn, x.timesteps())?;
    Ok(tape.value(g).clone())
}

/// Borrowed scorer weights: `D -> hidden -> 2`.
#[derive(Debug, Clone, Copy)]
pub struct ScorerWeights<'a> {
    pub w1: &'a Matrix,
    pub b1: &'a Matrix,
    pub w2: &'a Matrix,
    pub b2: &'a Matrix,
}

/// Scorer nodes on an existing tape; `params` are the tape ids of `w1, b1, w2, b2`.
pub(crate) fn scorer_on_tape(tape: &mut Tape<'_>, gap: NodeId, params: [NodeId; 4]) -> Result<NodeId> {
    let h = tape.matmul(gap, params[0])?;
    let h = tape.add_bias(h, params[1])?;
    let h = tape.tanh(h);
    let z = tape.matmul(h, params[2])?;
    let z = tape.add_bias(z, params[3])?;
    Ok(tape.softmax_rows(z))
}

pub fn score_tokens(x_gap: &Matrix, weights: ScorerWeights<'_>) -> Result<TokenScore> {
    if weights.w2.cols() != 2 {
        return Err(Error::dim("scorer output", 2, weights.w2.cols()));
    }
    let mut tape = Tape::new();
    let x = tape.input(x_gap);
    let ids = [
        tape.input(weights.w1),
        tape.input(weights.b1),
        tape.input(weights.w2),
        tape.input(weights.b2),
    ];
    let s = scorer_on_tape(&mut tape, x, ids)?;
    Ok(TokenScore(tape.value(s).clone()))
}

/// Kept-token count for one eval-mode application: `ceil(rho * alive)`, at least one.
pub fn eval_keep_count(rho: f64, alive: usize) -> usize {
    if alive == 0 {
        return 0;
    }
    // the epsilon absorbs representation error such as 0.6 * 10 = 6.000000000000001
    let k = (rho * alive as f64 - 1e-9).ceil() as usize;
    k.clamp(1, alive)
}

/// Expected kept counts after each of the `selector_layers` applications in eval mode.
pub fn keep_schedule(rho: f64, selector_layers: &[usize], tokens: usize) -> Vec<usize> {
    let mut alive = tokens;
    selector_layers
        .iter()
        .map(|_| {
            alive = eval_keep_count(rho, alive);
            alive
        })
        .collect()
}

/// Indices of the `k` alive tokens with the highest keep probability, ties to the lower index.
pub fn top_k_alive(keep_prob: &[f32], alive: &[bool], k: usize) -> Vec<bool> {
    let mut order: Vec<usize> = (0..keep_prob.len()).filter(|&i| alive[i]).collect();
    order.sort_by(|&a, &b| keep_prob[b].total_cmp(&keep_prob[a]).then(a.cmp(&b)));
    let mut keep = vec![false; keep_prob.len()];
    for &i in order.iter().take(k) {
        keep[i] = true;
    }
    keep
}

/// Uniformly random `k`-subset of the alive tokens.
pub fn random_k_alive(alive: &[bool], k: usize, rng: &mut impl Rng) -> Vec<bool> {
    let idx: Vec<usize> = (0..alive.len()).filter(|&i| alive[i]).collect();
    let chosen = rand::seq::index::sample(rng, idx.len(), k.min(idx.len()));
    let mut keep = vec![false; alive.len()];
    for c in chosen {
        keep[idx[c]] = true;
    }
    keep
}

/// `g0 - g1` for two independent standard Gumbel draws.
pub fn gumbel_difference(rng: &mut impl Rng) -> f32 {
    let g = Gumbel::new(0.0f64, 1.0).expect("unit gumbel");
    (g.sample(rng) - g.sample(rng)) as f32
}

/// Train-mode hard decisions and relaxed keep values from scores and noise.
pub(crate) fn gumbel_decisions(scores: &Matrix, noise: &[f32], tau: f32, alive: &[bool]) -> (Vec<bool>, Vec<f32>) {
    let mut hard = vec![false; scores.rows()];
    let mut soft = vec![0.0; scores.rows()];
    for n in 0..scores.rows() {
        let z = (scores.get(n, 0).max(f32::MIN_POSITIVE).ln() - scores.get(n, 1).max(f32::MIN_POSITIVE).ln() + noise[n]) / tau;
        soft[n] = crate::autodiff::sigmoid(z);
        hard[n] = alive[n] && z >= 0.0;
    }
    ensure_one(&mut hard, scores, alive);
    (hard, soft)
}

fn ensure_one(hard: &mut [bool], scores: &Matrix, alive: &[bool]) {
    if hard.iter().any(|&h| h) {
        return;
    }
    let probs: Vec<f32> = (0..scores.rows()).map(|n| scores.get(n, 0)).collect();
    let best = top_k_alive(&probs, alive, 1);
    hard.copy_from_slice(&best);
}

/// New keep decision for the currently `alive` tokens.
pub fn sample_keep_decision(scores: &TokenScore, alive: &[bool], cfg: &SelectorConfig, mode: Mode, tau: f32, rng: &mut impl Rng) -> Result<TokenDecision> {
    cfg.validate()?;
    if !(tau > 0.0) {
        return Err(Error::Config(format!("gumbel temperature must be > 0, got {tau}")));
    }
    let n = scores.tokens();
    if alive.len() != n {
        return Err(Error::dim("sample_keep_decision alive mask", n, alive.len()));
    }
    let (hard, soft) = match mode {
        Mode::Train => {
            let noise: Vec<f32> = (0..n).map(|_| gumbel_difference(rng)).collect();
            gumbel_decisions(&scores.0, &noise, tau, alive)
        }
        Mode::Eval => {
            let alive_count = alive.iter().filter(|&&a| a).count();
            let k = eval_keep_count(cfg.rho, alive_count);
            (top_k_alive(&scores.keep_probs(), alive, k), scores.keep_probs())
        }
    };
    Ok(TokenDecision { hard, soft, layer_history: Vec::new() })
}

/// Hadamard composition `prev ⊙ new` of hard and soft decisions.
pub fn compose_decision(prev: &TokenDecision, new: &TokenDecision) -> Result<TokenDecision> {
    if prev.len() != new.len() {
        return Err(Error::dim("compose_decision", prev.len(), new.len()));
    }
    let mut layer_history = prev.layer_history.clone();
    layer_history.extend(new.layer_history.iter().cloned());
    Ok(TokenDecision {
        hard: prev.hard.iter().zip(&new.hard).map(|(&a, &b)| a && b).collect(),
        soft: prev.soft.iter().zip(&new.soft).map(|(a, b)| a * b).collect(),
        layer_history,
    })
}

/// Writes `layer,token_index,kept,score` rows for every recorded selector layer.
pub fn write_decision_trace<W: Write>(out: W, decision: &TokenDecision) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "token_index", "kept", "score"])?;
    for rec in &decision.layer_history {
        for (i, (&kept, &score)) in rec.hard.iter().zip(&rec.scores).enumerate() {
            w.write_record([rec.layer.to_string(), i.to_string(), (kept as u8).to_string(), format!("{score:.6}")])?;
        }
    }
    w.flush()?;
    Ok(())
}
