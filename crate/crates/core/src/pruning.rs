//! Lottery-ticket pruning: iterative magnitude pruning with rewinding,
//! random re-initialization and early-bird ticket detection.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamStore, WeightMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethod {
    ImpRewind,
    RandomReinit,
    EarlyBird,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewindPoint {
    Init,
    /// Weights after this many epochs of the dense run.
    Epoch { epoch: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    Global,
    PerLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    /// Fraction of alive weights removed per round.
    pub p: f64,
    pub rounds: usize,
    pub method: PruneMethod,
    pub rewind_point: RewindPoint,
    pub scope: PruneScope,
    pub eb_distance_threshold: f64,
    pub eb_window: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            p: 0.25,
            rounds: 5,
            method: PruneMethod::ImpRewind,
            rewind_point: RewindPoint::Init,
            scope: PruneScope::Global,
            eb_distance_threshold: 0.1,
            eb_window: 5,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p < 1.0) {
            return Err(Error::Config(format!("prune fraction p must be in (0, 1), got {}", self.p)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("prune rounds K must be >= 1".into()));
        }
        if self.eb_window < 2 || !(self.eb_distance_threshold > 0.0) {
            return Err(Error::Config("eb_window must be >= 2 and eb_distance_threshold > 0".into()));
        }
        Ok(())
    }
}

/// Analytic sparsity after `k` rounds: `1 - (1 - p)^k`.
pub fn sparsity_after(p: f64, k: usize) -> f64 {
    1.0 - (1.0 - p).powi(k as i32)
}

/// Exact alive count after `k` rounds of `floor(p * alive)` removals.
pub fn alive_after(total: usize, p: f64, k: usize) -> usize {
    (0..k).fold(total, |alive, _| alive - (p * alive as f64).floor() as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub sparsity: f64,
    pub train_loss: f64,
    pub eval_acc: f64,
    pub alive_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TicketSnapshot {
    /// Parameters at the rewind point.
    pub weights: ParamStore,
    /// Masks after each round, starting with the dense round 0.
    pub round_masks: Vec<Vec<Option<WeightMask>>>,
    pub metrics: Vec<RoundMetrics>,
}

/// Anything that can train and score a parameter set in place.
pub trait Trainer {
    /// Trains from the current values, calling `on_epoch` after each epoch; returns the final train loss.
    fn train(&mut self, params: &mut ParamStore, on_epoch: &mut dyn FnMut(usize, &ParamStore)) -> Result<f64>;
    fn evaluate(&mut self, params: &ParamStore) -> Result<f64>;
    fn epochs(&self) -> usize;
}

/// Indices of the `count` smallest `|w|` among `candidates`, ties to the lower index.
fn smallest(candidates: &mut [(f32, usize)], count: usize) -> &[(f32, usize)] {
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    &candidates[..count]
}

/// Masks `floor(p * alive)` of the alive prunable weights with the smallest
/// magnitude, pooled globally or per tensor. Returns the number removed.
pub fn magnitude_prune(params: &mut ParamStore, p: f64, scope: PruneScope) -> Result<usize> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("prune fraction must be in (0, 1), got {p}")));
    }
    if params.prunable_alive() == 0 {
        return Err(Error::Saturation);
    }
    let removed = match scope {
        PruneScope::Global => {
            // (|w|, flat position) over every alive prunable weight
            let mut offsets = Vec::new();
            let mut cands = Vec::new();
            let mut flat = 0usize;
            for (pi, prm) in params.iter().enumerate() {
                let Some(mask) = &prm.mask else { continue };
                offsets.push((pi, flat));
                for (j, (&w, &keep)) in prm.values.as_slice().iter().zip(&mask.0).enumerate() {
                    if keep {
                        cands.push((w.abs(), flat + j));
                    }
                }
                flat += prm.values.len();
            }
            let count = (p * cands.len() as f64).floor() as usize;
            let chosen: Vec<usize> = smallest(&mut cands, count).iter().map(|c| c.1).collect();
            for pos in &chosen {
                let k = offsets.partition_point(|&(_, start)| start <= *pos) - 1;
                let (pi, start) = offsets[k];
                if let Some(m) = params.get_mut(pi).mask.as_mut() {
                    m.0[pos - start] = false;
                }
            }
            chosen.len()
        }
        PruneScope::PerLayer => {
            let mut total = 0;
            for prm in params.iter_mut() {
                let Some(mask) = prm.mask.as_mut() else { continue };
                let mut cands: Vec<(f32, usize)> =
                    prm.values.as_slice().iter().zip(&mask.0).enumerate().filter(|(_, (_, &k))| k).map(|(j, (&w, _))| (w.abs(), j)).collect();
                let count = (p * cands.len() as f64).floor() as usize;
                for &(_, j) in smallest(&mut cands, count) {
                    mask.0[j] = false;
                }
                total += count;
            }
            total
        }
    };
    params.apply_masks();
    Ok(removed)
}

/// Global one-shot mask removing `floor(sparsity * total)` smallest prunable
/// weights, flattened over all prunable tensors in order.
pub fn magnitude_mask_at(params: &ParamStore, sparsity: f64) -> WeightMask {
    let mut cands: Vec<(f32, usize)> = Vec::new();
    for prm in params.iter().filter(|p| p.prunable()) {
        let base = cands.len();
        cands.extend(prm.values.as_slice().iter().enumerate().map(|(j, w)| (w.abs(), base + j)));
    }
    let total = cands.len();
    let count = (sparsity * total as f64).floor() as usize;
    let mut keep = vec![true; total];
    for &(_, i) in smallest(&mut cands, count) {
        keep[i] = false;
    }
    WeightMask(keep)
}

/// Splits a flattened prunable mask back into per-parameter masks.
pub fn unflatten_mask(params: &ParamStore, flat: &WeightMask) -> Result<Vec<Option<WeightMask>>> {
    if flat.len() != params.prunable_total() {
        return Err(Error::dim("flattened mask", params.prunable_total(), flat.len()));
    }
    let mut at = 0;
    Ok(params
        .iter()
        .map(|p| {
            p.prunable().then(|| {
                let m = WeightMask(flat.0[at..at + p.values.len()].to_vec());
                at += p.values.len();
                m
            })
        })
        .collect())
}

/// Restores unmasked weights to the snapshot values; masked weights become 0.
pub fn rewind(params: &mut ParamStore, snapshot: &ParamStore) -> Result<()> {
    params.check_same_layout(snapshot)?;
    for (p, s) in params.iter_mut().zip(snapshot.iter()) {
        p.values = s.values.clone();
        p.apply_mask();
    }
    Ok(())
}

/// Redraws every prunable weight from its initial distribution, keeping masks.
/// Non-prunable parameters return to their snapshot values.
pub fn random_reinit(params: &mut ParamStore, snapshot: &ParamStore, rng: &mut impl Rng) -> Result<()> {
    params.check_same_layout(snapshot)?;
    for (p, s) in params.iter_mut().zip(snapshot.iter()) {
        if p.prunable() {
            let init = p.init;
            p.values.as_mut_slice().iter_mut().for_each(|v| *v = init.sample(rng));
            p.apply_mask();
        } else {
            p.values = s.values.clone();
        }
    }
    Ok(())
}

fn normalized_hamming(a: &WeightMask, b: &WeightMask) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.hamming(b) as f64 / a.len() as f64
}

/// Earliest index `i` such that the masks `i - window + 1 ..= i` have a maximum
/// pairwise normalized Hamming distance below the threshold.
pub fn eb_detect(history: &[WeightMask], window: usize, threshold: f64) -> Result<Option<usize>> {
    if history.is_empty() {
        return Err(Error::Usage("early-bird detection needs a nonempty mask history".into()));
    }
    if window == 0 {
        return Err(Error::Config("eb_window must be >= 1".into()));
    }
    for end in window - 1..history.len() {
        let w = &history[end + 1 - window..=end];
        let mut max = 0.0f64;
        for i in 0..w.len() {
            for j in i + 1..w.len() {
                max = max.max(normalized_hamming(&w[i], &w[j]));
            }
        }
        if max < threshold {
            return Ok(Some(end));
        }
    }
    Ok(None)
}

fn record(round: usize, params: &ParamStore, train_loss: f64, eval_acc: f64) -> RoundMetrics {
    RoundMetrics { round, sparsity: params.sparsity(), train_loss, eval_acc, alive_params: params.prunable_alive() }
}

/// Dense training (round 0) then `rounds` of prune, reset and retrain.
/// `params` must hold the initialization on entry and holds the last ticket on return.
pub fn imp_loop(trainer: &mut dyn Trainer, params: &mut ParamStore, cfg: &PruneConfig, rng: &mut impl Rng) -> Result<TicketSnapshot> {
    cfg.validate()?;
    if cfg.method == PruneMethod::EarlyBird {
        return Err(Error::Usage("early-bird tickets are drawn by eb_loop".into()));
    }
    let init = params.clone();
    let mut rewind_weights = init.clone();
    let target = match cfg.rewind_point {
        RewindPoint::Init => None,
        RewindPoint::Epoch { epoch } => Some(epoch),
    };
    let mut captured = None;
    let loss = trainer.train(params, &mut |epoch, p| {
        if target == Some(epoch + 1) {
            captured = Some(p.clone());
        }
    })?;
    if let Some(w) = captured {
        rewind_weights = w;
    } else if target.is_some_and(|e| e > 0) {
        return Err(Error::Config(format!("rewind epoch {:?} exceeds the {} training epochs", target, trainer.epochs())));
    }
    let mut metrics = vec![record(0, params, loss, trainer.evaluate(params)?)];
    let mut round_masks = vec![params.masks()];
    for round in 1..=cfg.rounds {
        magnitude_prune(params, cfg.p, cfg.scope)?;
        match cfg.method {
            PruneMethod::ImpRewind => rewind(params, &rewind_weights)?,
            _ => random_reinit(params, &init, rng)?,
        }
        let loss = trainer.train(params, &mut |_, _| {})?;
        metrics.push(record(round, params, loss, trainer.evaluate(params)?));
        round_masks.push(params.masks());
    }
    Ok(TicketSnapshot { weights: rewind_weights, round_masks, metrics })
}

/// Random re-initialization baseline: the round-`round` mask of an IMP ticket
/// with freshly drawn weights, trained and scored.
pub fn random_reinit_ticket(trainer: &mut dyn Trainer, ticket: &TicketSnapshot, round: usize, rng: &mut impl Rng) -> Result<RoundMetrics> {
    let masks = ticket
        .round_masks
        .get(round)
        .ok_or_else(|| Error::Usage(format!("ticket has no round {round} (last is {})", ticket.round_masks.len().saturating_sub(1))))?;
    let mut params = ticket.weights.clone();
    params.set_masks(masks)?;
    random_reinit(&mut params, &ticket.weights, rng)?;
    let loss = trainer.train(&mut params, &mut |_, _| {})?;
    let acc = trainer.evaluate(&params)?;
    Ok(record(round, &params, loss, acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyBirdTicket {
    pub sparsity: f64,
    /// Epoch whose mask closed the stable window; `None` falls back to the final epoch.
    pub detected_epoch: Option<usize>,
    pub metrics: RoundMetrics,
}

/// One dense run tracking per-epoch magnitude masks at each target sparsity;
/// each ticket is the mask at its detection epoch, retrained from that epoch's weights.
pub fn eb_loop(trainer: &mut dyn Trainer, params: &ParamStore, cfg: &PruneConfig, targets: &[(usize, f64)]) -> Result<Vec<EarlyBirdTicket>> {
    cfg.validate()?;
    struct Track {
        history: Vec<WeightMask>,
        found: Option<(usize, WeightMask, ParamStore)>,
    }
    let mut tracks: Vec<Track> = targets.iter().map(|_| Track { history: Vec::new(), found: None }).collect();
    let mut dense = params.clone();
    let mut failure = None;
    trainer.train(&mut dense, &mut |epoch, p| {
        for (tr, &(_, s)) in tracks.iter_mut().zip(targets) {
            if tr.found.is_some() {
                continue;
            }
            tr.history.push(magnitude_mask_at(p, s));
            match eb_detect(&tr.history, cfg.eb_window, cfg.eb_distance_threshold) {
                Ok(Some(_)) => tr.found = Some((epoch, tr.history.last().cloned().unwrap_or_default(), p.clone())),
                Ok(None) => {}
                Err(e) => failure = Some(e),
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut out = Vec::new();
    for (tr, &(round, s)) in tracks.into_iter().zip(targets) {
        let (detected, mask, weights) = match tr.found {
            Some((e, m, w)) => (Some(e), m, w),
            None => (None, magnitude_mask_at(&dense, s), dense.clone()),
        };
        let mut ticket = weights;
        ticket.set_masks(&unflatten_mask(&ticket, &mask)?)?;
        let loss = trainer.train(&mut ticket, &mut |_, _| {})?;
        let acc = trainer.evaluate(&ticket)?;
        out.push(EarlyBirdTicket { sparsity: s, detected_epoch: detected, metrics: record(round, &ticket, loss, acc) });
    }
    Ok(out)
}

/// Writes `round,sparsity,train_loss,eval_acc,alive_params`.
pub fn write_round_metrics<W: Write>(out: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}
