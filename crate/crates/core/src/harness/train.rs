//! AdamW training with cosine decay and batch evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::model::{argmax, Execution, RunOptions, Spikformer};
use crate::parallel::{map_indexed, Parallelism};
use crate::params::ParamStore;
use crate::pruning::Trainer;
use crate::selector::Mode;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Weight of the squared keep-ratio penalty per selector layer.
    pub keep_ratio_weight: f32,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            epochs: 30,
            batch_size: 64,
            schedule: LrSchedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            keep_ratio_weight: 2.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 {
            return Err(Error::Config("learning_rate must be > 0 and batch_size >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid AdamW constants".into()));
        }
        if !(self.keep_ratio_weight >= 0.0) {
            return Err(Error::Config("keep_ratio_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate for optimizer step `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let f = step as f64 / total.max(1) as f64;
                (self.learning_rate as f64 * 0.5 * (1.0 + (std::f64::consts::PI * f).cos())) as f32
            }
        }
    }
}

/// Decoupled-weight-decay Adam. Decay applies to prunable weights only.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &crate::params::PrunableParam| Matrix::zeros(p.values.rows(), p.values.cols());
        Self { m: params.iter().map(zeros).collect(), v: params.iter().map(zeros).collect(), t: 0 }
    }

    /// One update. Masked positions get zero gradient and stay exactly zero.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Matrix>], lr: f32, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.get_mut(i);
            let decay = if p.prunable() { cfg.weight_decay } else { 0.0 };
            let mask = p.mask.as_ref().map(|m| m.0.as_slice());
            let (m, v) = (self.m[i].as_mut_slice(), self.v[i].as_mut_slice());
            for (j, w) in p.values.as_mut_slice().iter_mut().enumerate() {
                if mask.is_some_and(|mk| !mk[j]) {
                    *w = 0.0;
                    continue;
                }
                let gj = g.as_slice()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
                *w -= lr * (update + decay * *w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f32,
    pub train_loss: f64,
    pub train_acc: f64,
    pub mean_kept: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalStats {
    pub accuracy: f64,
    pub mean_kept: f64,
    /// Mean final keep rate of ground-truth foreground tokens (synthetic data only).
    pub foreground_keep: Option<f64>,
    pub background_keep: Option<f64>,
}

pub fn evaluate(arch: &Spikformer, params: &ParamStore, ds: &Dataset, execution: Execution, par: Parallelism) -> Result<EvalStats> {
    if ds.is_empty() {
        return Err(Error::Usage("cannot evaluate on an empty dataset".into()));
    }
    let results = map_indexed(par, ds.len(), |i| {
        let s = &ds.samples[i];
        // only the random selector ablation consumes the stream; one per image
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(EVAL_SEED, 0, i));
        let opts = RunOptions { execution, ..RunOptions::eval() };
        arch.forward(params, &s.frames, &opts, &mut rng).map(|out| {
            let (pred, d) = (argmax(&out.logits), out.decision);
            let (mut fg, mut bg) = ((0usize, 0usize), (0usize, 0usize));
            for (t, &h) in d.hard.iter().enumerate() {
                let slot = if s.foreground.contains(&t) { &mut fg } else { &mut bg };
                slot.0 += h as usize;
                slot.1 += 1;
            }
            (pred == s.label, d.kept(), fg, bg)
        })
    });
    let mut correct = 0usize;
    let mut kept = 0usize;
    let (mut fg, mut bg) = ((0usize, 0usize), (0usize, 0usize));
    for r in results {
        let (c, k, f, b) = r?;
        correct += c as usize;
        kept += k;
        fg = (fg.0 + f.0, fg.1 + f.1);
        bg = (bg.0 + b.0, bg.1 + b.1);
    }
    let n = ds.len() as f64;
    let rate = |(a, b): (usize, usize)| (ds.has_foreground() && b > 0).then(|| a as f64 / b as f64);
    Ok(EvalStats { accuracy: correct as f64 / n, mean_kept: kept as f64 / n, foreground_keep: rate(fg), background_keep: rate(bg) })
}

const EVAL_SEED: u64 = 0x5EED_E7A1;

fn sample_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains one model on a dataset; implements the pruning loop's trainer interface.
pub struct SupervisedTrainer<'d> {
    pub arch: Spikformer,
    pub train_set: &'d Dataset,
    pub eval_set: &'d Dataset,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub parallelism: Parallelism,
    pub log: Vec<EpochLog>,
    /// Evaluate after every epoch (otherwise only on demand).
    pub eval_each_epoch: bool,
    runs: u64,
}

impl<'d> SupervisedTrainer<'d> {
    pub fn new(arch: Spikformer, train_set: &'d Dataset, eval_set: &'d Dataset, optimizer: OptimizerConfig, seed: u64) -> Self {
        Self { arch, train_set, eval_set, optimizer, seed, parallelism: Parallelism::default(), log: Vec::new(), eval_each_epoch: false, runs: 0 }
    }

    fn run(&mut self, params: &mut ParamStore, on_epoch: &mut dyn FnMut(usize, &ParamStore)) -> Result<f64> {
        let cfg = self.optimizer.clone();
        cfg.validate()?;
        let n = self.train_set.len();
        let per_epoch = n.div_ceil(cfg.batch_size);
        let total = per_epoch * cfg.epochs;
        let mut opt = AdamW::new(params);
        let run_seed = self.seed.wrapping_add(self.runs.wrapping_mul(0x632B_E59B_D9B4_E019));
        self.runs += 1;
        self.log.clear();
        let mut last_loss = f64::NAN;
        let mut step = 0usize;
        for epoch in 0..cfg.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_seed(run_seed, epoch, usize::MAX)));
            let tau = self.arch.selector().temperature_at(epoch, cfg.epochs);
            let opts = RunOptions { mode: Mode::Train, execution: Execution::Masked, tau, capture: false };
            let (mut loss_sum, mut correct, mut kept) = (0.0f64, 0usize, 0usize);
            let mut lr = cfg.lr_at(step, total);
            for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
                lr = cfg.lr_at(step, total);
                let arch = &self.arch;
                let ds = self.train_set;
                let frozen: &ParamStore = params;
                let results = map_indexed(self.parallelism, batch.len(), |j| {
                    let idx = batch[j];
                    let s = &ds.samples[idx];
                    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(run_seed, epoch, idx));
                    arch.sample_gradients(frozen, &s.frames, s.label, &opts, cfg.keep_ratio_weight, &mut rng)
                });
                let mut grads: Vec<Option<Matrix>> = vec![None; params.len()];
                let mut batch_loss = 0.0f64;
                for r in results {
                    let r = r?;
                    batch_loss += r.loss as f64;
                    correct += r.correct as usize;
                    kept += r.kept;
                    for (i, g) in r.grads {
                        match &mut grads[i] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                let scale = 1.0 / batch.len() as f32;
                let mut norm = 0.0f64;
                for g in grads.iter_mut().flatten() {
                    g.scale_assign(scale);
                    norm += g.squared_norm();
                }
                let mean_loss = batch_loss / batch.len() as f64;
                if !mean_loss.is_finite() || !norm.is_finite() {
                    return Err(Error::Divergence { epoch, step: b, loss: mean_loss as f32, lr, grad_norm: norm.sqrt() as f32 });
                }
                opt.step(params, &grads, lr, &cfg);
                loss_sum += batch_loss;
                step += 1;
            }
            last_loss = loss_sum / n.max(1) as f64;
            let eval_acc = if self.eval_each_epoch { Some(evaluate(&self.arch, params, self.eval_set, Execution::Masked, self.parallelism)?.accuracy) } else { None };
            self.log.push(EpochLog {
                epoch,
                lr,
                train_loss: last_loss,
                train_acc: correct as f64 / n.max(1) as f64,
                mean_kept: kept as f64 / n.max(1) as f64,
                eval_acc,
            });
            on_epoch(epoch, params);
        }
        Ok(last_loss)
    }
}

impl Trainer for SupervisedTrainer<'_> {
    fn train(&mut self, params: &mut ParamStore, on_epoch: &mut dyn FnMut(usize, &ParamStore)) -> Result<f64> {
        self.run(params, on_epoch)
    }

    fn evaluate(&mut self, params: &ParamStore) -> Result<f64> {
        Ok(evaluate(&self.arch, params, self.eval_set, Execution::Masked, self.parallelism)?.accuracy)
    }

    fn epochs(&self) -> usize {
        self.optimizer.epochs
    }
}

/// Trains a fresh model and returns it with its per-epoch log.
pub fn train_model(arch: &Spikformer, mut params: ParamStore, train_set: &Dataset, eval_set: &Dataset, opt: &OptimizerConfig, seed: u64, par: Parallelism) -> Result<(ParamStore, Vec<EpochLog>)> {
    let mut t = SupervisedTrainer::new(arch.clone(), train_set, eval_set, opt.clone(), seed);
    t.parallelism = par;
    t.eval_each_epoch = true;
    t.run(&mut params, &mut |_, _| {})?;
    Ok((params, t.log))
}
