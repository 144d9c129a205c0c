//! Spikformer with spiking token selection.
//!
//! Activations are `[T * N, D]` matrices with timestep-major rows. Every
//! layer acts on tokens independently except attention, so dropping a token
//! means zeroing its keys, values and branch outputs (masked execution) or
//! removing its rows entirely (gather execution). Both give identical
//! results for the kept tokens.

mod config;

pub use config::{ModelConfig, SpsStage};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::params::{InitDist, ParamStore};
use crate::selector::{
    eval_keep_count, gumbel_decisions, gumbel_difference, random_k_alive, scorer_on_tape, top_k_alive, LayerRecord, Mode, SelectorConfig, SelectorKind,
    TokenDecision,
};
use crate::spiking::SpikeTensor;
use crate::tensor::Matrix;

/// Input frames, channels last: `[frames * H * W, C]`. A single frame is
/// repeated over all timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    data: Matrix,
    frames: usize,
}

impl Frames {
    pub fn new(data: Matrix, frames: usize) -> Result<Self> {
        if frames == 0 || data.rows() % frames != 0 {
            return Err(Error::dim("frames", format!("multiple of {frames} rows"), data.rows()));
        }
        Ok(Self { data, frames })
    }

    /// From a channel-major `[C, H, W]` buffer.
    pub fn from_chw(channels: usize, height: usize, width: usize, chw: &[f32]) -> Result<Self> {
        Self::from_tchw(1, channels, height, width, chw)
    }

    /// From a `[T, C, H, W]` buffer.
    pub fn from_tchw(frames: usize, channels: usize, height: usize, width: usize, buf: &[f32]) -> Result<Self> {
        let plane = height * width;
        if buf.len() != frames * channels * plane {
            return Err(Error::dim("frames buffer", frames * channels * plane, buf.len()));
        }
        let mut data = Matrix::zeros(frames * plane, channels);
        for f in 0..frames {
            for c in 0..channels {
                for p in 0..plane {
                    data.set(f * plane + p, c, buf[(f * channels + c) * plane + p]);
                }
            }
        }
        Self::new(data, frames)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn pixels(&self) -> usize {
        self.data.rows() / self.frames
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    /// Dropped tokens stay in place and are zeroed out of attention and branch outputs.
    Masked,
    /// Dropped tokens are removed from the activation matrix (eval only).
    Gather,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub mode: Mode,
    pub execution: Execution,
    /// Gumbel temperature for train mode.
    pub tau: f32,
    /// Keep the SPS output and every block output in [`ForwardOutput::captures`].
    pub capture: bool,
}

impl RunOptions {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, execution: Execution::Masked, tau: 1.0, capture: false }
    }

    pub fn gather() -> Self {
        Self { execution: Execution::Gather, ..Self::eval() }
    }

    pub fn train(tau: f32) -> Self {
        Self { mode: Mode::Train, tau, ..Self::eval() }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f32>,
    pub decision: TokenDecision,
    /// Full-size `[T, N, D]` activations: SPS output, then each block output.
    pub captures: Vec<SpikeTensor>,
}

/// Loss and parameter gradients for one training sample.
#[derive(Debug, Clone)]
pub struct SampleGradients {
    pub loss: f32,
    pub cross_entropy: f32,
    pub ratio_penalty: f32,
    pub correct: bool,
    pub kept: usize,
    pub grads: Vec<(usize, Matrix)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SpikingLinear {
    weight: usize,
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Scorer {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Block {
    q: SpikingLinear,
    k: SpikingLinear,
    v: SpikingLinear,
    proj: SpikingLinear,
    fc1: SpikingLinear,
    fc2: SpikingLinear,
    scorer: Option<Scorer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    sps: Vec<SpikingLinear>,
    rpe: Option<SpikingLinear>,
    blocks: Vec<Block>,
    head_w: usize,
    head_b: usize,
}

/// The architecture: configuration plus the index of every parameter in its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Spikformer {
    cfg: ModelConfig,
    selector: SelectorConfig,
    layout: Layout,
}

fn uniform(gain: f32, fan_in: usize) -> InitDist {
    InitDist::Uniform { bound: gain * (3.0 / fan_in as f32).sqrt() }
}

fn add_spiking_linear(store: &mut ParamStore, name: &str, fan_in: usize, out: usize, gain: f32, rng: &mut impl Rng) -> SpikingLinear {
    SpikingLinear {
        weight: store.add(format!("{name}.weight"), fan_in, out, uniform(gain, fan_in), true, rng),
        scale: store.add(format!("{name}.norm.scale"), 1, out, InitDist::Constant { value: 1.0 }, false, rng),
        shift: store.add(format!("{name}.norm.shift"), 1, out, InitDist::Constant { value: 0.0 }, false, rng),
    }
}

impl Spikformer {
    /// Builds the architecture and draws its initial parameters.
    ///
    /// Selector scorers are created last so that, for a fixed seed, every
    /// other parameter is identical with or without selectors.
    pub fn new(cfg: ModelConfig, selector: SelectorConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        selector.validate()?;
        let gain = cfg.init_gain;
        let d = cfg.embed_dim;
        let mut store = ParamStore::new();
        let mut sps = Vec::new();
        let mut cin = cfg.in_channels;
        for (i, stage) in cfg.sps_stages.iter().enumerate() {
            sps.push(add_spiking_linear(&mut store, &format!("sps.{i}"), 9 * cin, stage.channels, gain, rng));
            cin = stage.channels;
        }
        let rpe = cfg.rpe.then(|| add_spiking_linear(&mut store, "sps.rpe", 9 * d, d, gain, rng));
        let hidden = cfg.mlp_hidden();
        let mut blocks = Vec::new();
        for b in 0..cfg.depth {
            let p = format!("blocks.{b}");
            blocks.push(Block {
                q: add_spiking_linear(&mut store, &format!("{p}.attn.q"), d, d, gain, rng),
                k: add_spiking_linear(&mut store, &format!("{p}.attn.k"), d, d, gain, rng),
                v: add_spiking_linear(&mut store, &format!("{p}.attn.v"), d, d, gain, rng),
                proj: add_spiking_linear(&mut store, &format!("{p}.attn.proj"), d, d, gain, rng),
                fc1: add_spiking_linear(&mut store, &format!("{p}.mlp.fc1"), d, hidden, gain, rng),
                fc2: add_spiking_linear(&mut store, &format!("{p}.mlp.fc2"), hidden, d, gain, rng),
                scorer: None,
            });
        }
        let head_w = store.add("head.weight", d, cfg.num_classes, uniform(1.0, d), true, rng);
        let head_b = store.add("head.bias", 1, cfg.num_classes, InitDist::Constant { value: 0.0 }, false, rng);
        if selector.kind == SelectorKind::Spiking {
            let h = selector.hidden(d);
            for &layer in &cfg.selector_layers {
                let p = format!("blocks.{}.selector", layer - 1);
                let w1 = store.add(format!("{p}.fc1.weight"), d, h, uniform(1.0, d), false, rng);
                let b1 = store.add(format!("{p}.fc1.bias"), 1, h, InitDist::Constant { value: 0.0 }, false, rng);
                let w2 = store.add(format!("{p}.fc2.weight"), h, 2, uniform(1.0, h), false, rng);
                let b2 = store.add(format!("{p}.fc2.bias"), 1, 2, InitDist::Constant { value: 0.0 }, false, rng);
                // softmax of the bias alone keeps a token with probability rho
                let bias = [selector.rho.max(1e-6).ln() as f32, (1.0 - selector.rho).max(1e-6).ln() as f32];
                store.get_mut(b2).values = Matrix::from_vec(1, 2, bias.to_vec());
                blocks[layer - 1].scorer = Some(Scorer { w1, b1, w2, b2 });
            }
        }
        let layout = Layout { sps, rpe, blocks, head_w, head_b };
        Ok((Self { cfg, selector, layout }, store))
    }

    /// Rebinds an architecture to existing parameters, checking names and shapes.
    pub fn bind(cfg: ModelConfig, selector: SelectorConfig, params: &ParamStore) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (arch, fresh) = Self::new(cfg, selector, &mut rng)?;
        fresh.check_same_layout(params)?;
        Ok(arch)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn selector(&self) -> &SelectorConfig {
        &self.selector
    }

    pub fn tokens(&self) -> usize {
        self.cfg.patch_tokens
    }

    /// Parameter indices of the selector scorers.
    pub fn scorer_params(&self) -> Vec<usize> {
        self.layout.blocks.iter().filter_map(|b| b.scorer).flat_map(|s| [s.w1, s.b1, s.w2, s.b2]).collect()
    }

    fn check_frames(&self, input: &Frames) -> Result<()> {
        let hw = self.cfg.image_hw;
        if input.pixels() != hw * hw || input.channels() != self.cfg.in_channels {
            return Err(Error::dim(
                "sps input",
                format!("[{}x{}, {}]", hw, hw, self.cfg.in_channels),
                format!("[{}, {}]", input.pixels(), input.channels()),
            ));
        }
        if input.frames() != 1 && input.frames() != self.cfg.timesteps {
            return Err(Error::dim("sps input frames", format!("1 or {}", self.cfg.timesteps), input.frames()));
        }
        Ok(())
    }

    fn check_block(&self, layer: usize) -> Result<&Block> {
        if layer == 0 || layer > self.cfg.depth {
            return Err(Error::Usage(format!("encoder layer {layer} outside 1..={}", self.cfg.depth)));
        }
        Ok(&self.layout.blocks[layer - 1])
    }

    fn check_spikes(&self, x: &SpikeTensor, keep: &TokenDecision) -> Result<()> {
        if x.timesteps() != self.cfg.timesteps || x.channels() != self.cfg.embed_dim {
            return Err(Error::dim(
                "spike tensor",
                format!("[{}, N, {}]", self.cfg.timesteps, self.cfg.embed_dim),
                format!("[{}, {}, {}]", x.timesteps(), x.tokens(), x.channels()),
            ));
        }
        if keep.len() != x.tokens() {
            return Err(Error::dim("keep mask length", x.tokens(), keep.len()));
        }
        Ok(())
    }

    // ---- tape building blocks ----

    fn spiking_linear<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, ids: SpikingLinear, x: NodeId, attn: bool) -> Result<NodeId> {
        let w = tape.param(ids.weight, p.values(ids.weight));
        let y = tape.matmul(x, w)?;
        let g = tape.param(ids.scale, p.values(ids.scale));
        let b = tape.param(ids.shift, p.values(ids.shift));
        let y = tape.affine(y, g, b)?;
        let neuron = if attn { self.cfg.attn_neuron() } else { self.cfg.neuron };
        tape.lif(y, self.cfg.timesteps, neuron, self.cfg.surrogate)
    }

    fn sps_tape<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, input: &'a Frames) -> Result<NodeId> {
        self.check_frames(input)?;
        let t = self.cfg.timesteps;
        let (mut h, mut w) = (self.cfg.image_hw, self.cfg.image_hw);
        let mut x = tape.input(&input.data);
        let mut frames = input.frames();
        for (ids, stage) in self.layout.sps.iter().zip(&self.cfg.sps_stages) {
            let cols = tape.im2col3(x, frames, h, w)?;
            let wn = tape.param(ids.weight, p.values(ids.weight));
            let y = tape.matmul(cols, wn)?;
            let g = tape.param(ids.scale, p.values(ids.scale));
            let b = tape.param(ids.shift, p.values(ids.shift));
            let mut y = tape.affine(y, g, b)?;
            if frames == 1 && t > 1 {
                // the static frame's conv response is the same at every timestep
                y = tape.repeat_rows(y, t);
                frames = t;
            }
            let mut s = tape.lif(y, t, self.cfg.neuron, self.cfg.surrogate)?;
            if stage.pool {
                s = tape.max_pool2(s, t, h, w)?;
                h /= 2;
                w /= 2;
            }
            x = s;
        }
        if let Some(ids) = self.layout.rpe {
            let cols = tape.im2col3(x, t, h, w)?;
            let r = self.spiking_linear(tape, p, ids, cols, false)?;
            x = tape.or(x, r)?;
        }
        Ok(x)
    }

    fn ssa_tape<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, b: &Block, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let t = self.cfg.timesteps;
        let q = self.spiking_linear(tape, p, b.q, x, false)?;
        let mut k = self.spiking_linear(tape, p, b.k, x, false)?;
        let mut v = self.spiking_linear(tape, p, b.v, x, false)?;
        if let Some(m) = mask {
            k = tape.mask_tokens(k, m, t)?;
            v = tape.mask_tokens(v, m, t)?;
        }
        let a = tape.spike_attention(q, k, v, t, self.cfg.heads, self.cfg.attention_factor())?;
        let a = tape.lif(a, t, self.cfg.attn_neuron(), self.cfg.surrogate)?;
        let mut o = self.spiking_linear(tape, p, b.proj, a, false)?;
        if let Some(m) = mask {
            o = tape.mask_tokens(o, m, t)?;
        }
        tape.or(x, o)
    }

    fn mlp_tape<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, b: &Block, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let h = self.spiking_linear(tape, p, b.fc1, x, false)?;
        let mut o = self.spiking_linear(tape, p, b.fc2, h, false)?;
        if let Some(m) = mask {
            o = tape.mask_tokens(o, m, self.cfg.timesteps)?;
        }
        tape.or(x, o)
    }

    fn head_tape<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, x: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let pooled = tape.token_mean_pool(x, mask, self.cfg.timesteps)?;
        let w = tape.param(self.layout.head_w, p.values(self.layout.head_w));
        let b = tape.param(self.layout.head_b, p.values(self.layout.head_b));
        let z = tape.matmul(pooled, w)?;
        tape.add_bias(z, b)
    }

    /// Runs the selector of `layer` (if any) and updates the gate.
    fn select<'a, R: Rng>(
        &self,
        tape: &mut Tape<'a>,
        p: &'a ParamStore,
        layer: usize,
        x: &mut NodeId,
        gate: &mut Gate,
        opts: &RunOptions,
        rng: &mut R,
    ) -> Result<()> {
        let Some(stage) = self.cfg.selector_layers.iter().position(|&l| l == layer) else {
            return Ok(());
        };
        let t = self.cfg.timesteps;
        let local = gate.local.len();
        let alive: Vec<bool> = gate.local.iter().map(|&i| gate.hard[i]).collect();
        let alive_count = alive.iter().filter(|&&a| a).count();
        let (hard_new, soft_new, scores, node) = match (self.selector.kind, self.layout.blocks[layer - 1].scorer) {
            (SelectorKind::Spiking, Some(s)) => {
                let gap = tape.temporal_mean(*x, t)?;
                let ids = [
                    tape.param(s.w1, p.values(s.w1)),
                    tape.param(s.b1, p.values(s.b1)),
                    tape.param(s.w2, p.values(s.w2)),
                    tape.param(s.b2, p.values(s.b2)),
                ];
                let sn = scorer_on_tape(tape, gap, ids)?;
                let sv = tape.value(sn).clone();
                let keep_probs: Vec<f32> = (0..local).map(|n| sv.get(n, 0)).collect();
                match opts.mode {
                    Mode::Train => {
                        if !(opts.tau > 0.0) {
                            return Err(Error::Config(format!("gumbel temperature must be > 0, got {}", opts.tau)));
                        }
                        let noise: Vec<f32> = (0..local).map(|_| gumbel_difference(rng)).collect();
                        let (hard, soft) = gumbel_decisions(&sv, &noise, opts.tau, &alive);
                        let y = tape.gumbel_keep(sn, noise, opts.tau)?;
                        let pk = tape.column(sn, 0)?;
                        (hard, soft, keep_probs, Some((y, pk)))
                    }
                    Mode::Eval => {
                        let k = eval_keep_count(self.selector.rho, alive_count);
                        (top_k_alive(&keep_probs, &alive, k), keep_probs.clone(), keep_probs, None)
                    }
                }
            }
            _ => {
                let k = eval_keep_count(self.selector.rho, alive_count);
                let hard = random_k_alive(&alive, k, rng);
                let soft = hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect();
                (hard, soft, vec![0.5; local], None)
            }
        };

        let n_full = gate.hard.len();
        let mut record_scores = vec![0.0; n_full];
        for (j, &i) in gate.local.iter().enumerate() {
            gate.hard[i] = gate.hard[i] && hard_new[j];
            gate.soft[i] *= soft_new[j];
            record_scores[i] = scores[j];
        }
        gate.history.push(LayerRecord { layer, hard: gate.hard.clone(), scores: record_scores });

        let local_hard: Vec<bool> = gate.local.iter().map(|&i| gate.hard[i]).collect();
        let hard_matrix = Matrix::from_vec(local, 1, local_hard.iter().map(|&h| if h { 1.0 } else { 0.0 }).collect());
        match opts.execution {
            Execution::Masked => {
                if let Some((y, pk)) = node {
                    let soft = match gate.soft_node {
                        Some(prev) => tape.mul(prev, y)?,
                        None => y,
                    };
                    gate.soft_node = Some(soft);
                    // a token survives a gumbel draw with probability S0, so the
                    // running product is its chance of still being kept here
                    let prob = match gate.prob_node {
                        Some(prev) => tape.mul(prev, pk)?,
                        None => pk,
                    };
                    gate.prob_node = Some(prob);
                    gate.penalties.push(tape.ratio_penalty(prob, self.selector.rho.powi(stage as i32 + 1) as f32));
                    gate.mask = Some(tape.straight_through(hard_matrix, soft)?);
                } else {
                    gate.mask = Some(tape.constant(hard_matrix));
                }
            }
            Execution::Gather => {
                let keep: Vec<usize> = (0..local).filter(|&j| local_hard[j]).collect();
                *x = tape.gather_tokens(*x, &keep, t)?;
                gate.local = keep.iter().map(|&j| gate.local[j]).collect();
            }
        }
        Ok(())
    }

    fn block_tape<'a>(&self, tape: &mut Tape<'a>, p: &'a ParamStore, layer: usize, x: NodeId, gate: &Gate) -> Result<NodeId> {
        let b = self.check_block(layer)?;
        let x = self.ssa_tape(tape, p, b, x, gate.mask)?;
        self.mlp_tape(tape, p, b, x, gate.mask)
    }

    /// Records the full forward pass on `tape`.
    pub(crate) fn forward_tape<'a, R: Rng>(
        &self,
        tape: &mut Tape<'a>,
        p: &'a ParamStore,
        input: &'a Frames,
        opts: &RunOptions,
        rng: &mut R,
    ) -> Result<TapeForward> {
        if opts.mode == Mode::Train && opts.execution == Execution::Gather {
            return Err(Error::Usage("gather execution is inference-only".into()));
        }
        let n = self.cfg.patch_tokens;
        let mut x = self.sps_tape(tape, p, input)?;
        let mut gate = Gate::new(n);
        let mut captures = Vec::new();
        let mut full = opts.capture.then(|| tape.value(x).clone());
        if let Some(f) = &full {
            captures.push(f.clone());
        }
        for layer in 1..=self.cfg.depth {
            self.select(tape, p, layer, &mut x, &mut gate, opts, rng)?;
            x = self.block_tape(tape, p, layer, x, &gate)?;
            if let Some(f) = full.as_mut() {
                scatter_rows(f, tape.value(x), &gate.local, self.cfg.timesteps);
                captures.push(f.clone());
            }
        }
        let logits = self.head_tape(tape, p, x, gate.mask)?;
        let decision = TokenDecision { hard: gate.hard, soft: gate.soft, layer_history: gate.history };
        Ok(TapeForward { logits, penalties: gate.penalties, decision, captures })
    }

    // ---- value-level API ----

    /// Runs the whole network on one input.
    pub fn forward<R: Rng>(&self, p: &ParamStore, input: &Frames, opts: &RunOptions, rng: &mut R) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, p, input, opts, rng)?;
        let t = self.cfg.timesteps;
        let captures = out
            .captures
            .into_iter()
            .map(|m| SpikeTensor::new(m, t, self.cfg.patch_tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardOutput { logits: tape.value(out.logits).as_slice().to_vec(), decision: out.decision, captures })
    }

    /// Eval-mode prediction.
    pub fn predict(&self, p: &ParamStore, input: &Frames, execution: Execution) -> Result<(usize, TokenDecision)> {
        // eval with a spiking selector draws nothing; the random ablation needs a stream
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = RunOptions { execution, ..RunOptions::eval() };
        let out = self.forward(p, input, &opts, &mut rng)?;
        Ok((argmax(&out.logits), out.decision))
    }

    /// Cross-entropy plus `penalty_weight` times the keep-ratio penalties, and its gradients.
    pub fn sample_gradients<R: Rng>(
        &self,
        p: &ParamStore,
        input: &Frames,
        label: usize,
        opts: &RunOptions,
        penalty_weight: f32,
        rng: &mut R,
    ) -> Result<SampleGradients> {
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, p, input, opts, rng)?;
        let ce = tape.cross_entropy(out.logits, label)?;
        let mut terms = vec![(ce, 1.0)];
        terms.extend(out.penalties.iter().map(|&id| (id, penalty_weight)));
        let loss = tape.weighted_sum(terms)?;
        let penalty: f32 = out.penalties.iter().map(|&id| tape.value(id).get(0, 0)).sum();
        let correct = argmax(tape.value(out.logits).as_slice()) == label;
        let loss_value = tape.value(loss).get(0, 0);
        let ce_value = tape.value(ce).get(0, 0);
        let grads = tape.backward(loss)?.into_param_grads();
        Ok(SampleGradients {
            loss: loss_value,
            cross_entropy: ce_value,
            ratio_penalty: penalty,
            correct,
            kept: out.decision.kept(),
            grads,
        })
    }

    pub fn sps_forward(&self, p: &ParamStore, input: &Frames) -> Result<SpikeTensor> {
        let mut tape = Tape::new();
        let x = self.sps_tape(&mut tape, p, input)?;
        let m = tape.value(x).clone();
        SpikeTensor::new(m, self.cfg.timesteps, self.cfg.patch_tokens)
    }

    fn masked_value(&self, p: &ParamStore, layer: usize, x: &SpikeTensor, keep: &TokenDecision, branch: Branch) -> Result<SpikeTensor> {
        self.check_spikes(x, keep)?;
        let b = *self.check_block(layer)?;
        let mut tape = Tape::new();
        let xn = tape.input(x.matrix());
        let mask = (!keep.all_kept()).then(|| tape.constant(keep.hard_matrix()));
        let y = match branch {
            Branch::Ssa => self.ssa_tape(&mut tape, p, &b, xn, mask)?,
            Branch::Mlp => self.mlp_tape(&mut tape, p, &b, xn, mask)?,
        };
        SpikeTensor::new(tape.value(y).clone(), x.timesteps(), x.tokens())
    }

    /// Attention sublayer of block `layer` (1-based) with its residual: `x OR SSA(x)`.
    pub fn ssa_forward(&self, p: &ParamStore, layer: usize, x: &SpikeTensor, keep: &TokenDecision) -> Result<SpikeTensor> {
        self.masked_value(p, layer, x, keep, Branch::Ssa)
    }

    /// MLP sublayer of block `layer` (1-based) with its residual: `x OR MLP(x)`.
    pub fn mlp_forward(&self, p: &ParamStore, layer: usize, x: &SpikeTensor, keep: &TokenDecision) -> Result<SpikeTensor> {
        self.masked_value(p, layer, x, keep, Branch::Mlp)
    }

    /// Selector (if `layer` has one), then attention and MLP; returns the updated decision.
    pub fn encoder_block_forward<R: Rng>(
        &self,
        p: &ParamStore,
        layer: usize,
        x: &SpikeTensor,
        keep: &TokenDecision,
        opts: &RunOptions,
        rng: &mut R,
    ) -> Result<(SpikeTensor, TokenDecision)> {
        self.check_spikes(x, keep)?;
        self.check_block(layer)?;
        let opts = RunOptions { execution: Execution::Masked, ..*opts };
        let mut tape = Tape::new();
        let mut xn = tape.input(x.matrix());
        let mut gate = Gate::from_decision(keep);
        if !keep.all_kept() {
            gate.mask = Some(tape.constant(keep.hard_matrix()));
        }
        self.select(&mut tape, p, layer, &mut xn, &mut gate, &opts, rng)?;
        let y = self.block_tape(&mut tape, p, layer, xn, &gate)?;
        let out = SpikeTensor::new(tape.value(y).clone(), x.timesteps(), x.tokens())?;
        Ok((out, TokenDecision { hard: gate.hard, soft: gate.soft, layer_history: gate.history }))
    }

    /// Head logits from the final spikes, averaged over kept tokens then time.
    pub fn classify(&self, p: &ParamStore, x: &SpikeTensor, keep: &TokenDecision) -> Result<Vec<f32>> {
        self.check_spikes(x, keep)?;
        let mut tape = Tape::new();
        let xn = tape.input(x.matrix());
        let mask = tape.constant(keep.hard_matrix());
        let z = self.head_tape(&mut tape, p, xn, Some(mask))?;
        Ok(tape.value(z).as_slice().to_vec())
    }
}

#[derive(Clone, Copy)]
enum Branch {
    Ssa,
    Mlp,
}

pub(crate) struct TapeForward {
    pub logits: NodeId,
    pub penalties: Vec<NodeId>,
    pub decision: TokenDecision,
    pub captures: Vec<Matrix>,
}

/// Selection state while walking the blocks. `hard` and `soft` are indexed by
/// original token; `local` maps current activation rows to original tokens.
struct Gate {
    hard: Vec<bool>,
    soft: Vec<f32>,
    local: Vec<usize>,
    history: Vec<LayerRecord>,
    mask: Option<NodeId>,
    soft_node: Option<NodeId>,
    prob_node: Option<NodeId>,
    penalties: Vec<NodeId>,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self::from_decision(&TokenDecision::keep_all(n))
    }

    fn from_decision(d: &TokenDecision) -> Self {
        Self {
            hard: d.hard.clone(),
            soft: d.soft.clone(),
            local: (0..d.len()).collect(),
            history: d.layer_history.clone(),
            mask: None,
            soft_node: None,
            prob_node: None,
            penalties: Vec::new(),
        }
    }
}

fn scatter_rows(full: &mut Matrix, compact: &Matrix, local: &[usize], timesteps: usize) {
    let n = full.rows() / timesteps;
    let k = local.len();
    for t in 0..timesteps {
        for (j, &i) in local.iter().enumerate() {
            full.row_mut(t * n + i).copy_from_slice(compact.row(t * k + j));
        }
    }
}

/// Index of the largest value, first one on ties.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
