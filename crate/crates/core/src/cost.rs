//! Analytic FLOPs accounting, firing-rate statistics, throughput timing and
//! firing-rate heat maps.
//!
//! Counting convention: one multiply-accumulate is `flops_per_mac` FLOPs
//! (default 1), spike-driven products count as full MACs, and every
//! per-timestep stage is multiplied by `T`. Selectors gate the block they sit
//! in front of, so block `b` and everything after it run on the tokens that
//! survived the last selector at or before `b`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Execution, Frames, ModelConfig, Spikformer};
use crate::params::ParamStore;
use crate::selector::{keep_schedule, TokenDecision};
use crate::spiking::SpikeTensor;

/// Kept-token counts after each selector layer, in `selector_layers` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepSchedule(pub Vec<usize>);

impl KeepSchedule {
    pub fn dense(cfg: &ModelConfig) -> Self {
        Self(vec![cfg.patch_tokens; cfg.selector_layers.len()])
    }

    /// The eval-mode schedule `ceil(rho * alive)` applied at every selector.
    pub fn from_rho(cfg: &ModelConfig, rho: f64) -> Self {
        Self(keep_schedule(rho, &cfg.selector_layers, cfg.patch_tokens))
    }

    /// Cumulative keep fractions of the full token count, e.g. `[0.5, 0.25, 0.125]`.
    pub fn from_fractions(cfg: &ModelConfig, fractions: &[f64]) -> Result<Self> {
        let n = cfg.patch_tokens as f64;
        let counts = fractions
            .iter()
            .map(|&f| {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("keep fraction must be in (0, 1], got {f}")));
                }
                Ok(((f * n - 1e-9).ceil() as usize).max(1))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Self(counts);
        s.validate(cfg)?;
        Ok(s)
    }

    /// Counts actually kept by one forward pass.
    pub fn from_decision(decision: &TokenDecision) -> Self {
        Self(decision.layer_history.iter().map(|r| r.hard.iter().filter(|&&h| h).count()).collect())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.0.len() != cfg.selector_layers.len() {
            return Err(Error::Config(format!(
                "keep schedule has {} entries but the model has {} selector layers",
                self.0.len(),
                cfg.selector_layers.len()
            )));
        }
        let mut alive = cfg.patch_tokens;
        for &k in &self.0 {
            if k == 0 || k > alive {
                return Err(Error::Config(format!("keep schedule {:?} must be non-increasing within 1..={}", self.0, cfg.patch_tokens)));
            }
            alive = k;
        }
        Ok(())
    }

    /// Tokens processed by each of the `depth` blocks, and by the head (last entry).
    pub fn tokens_per_block(&self, cfg: &ModelConfig) -> Vec<usize> {
        let mut alive = cfg.patch_tokens;
        let mut out = Vec::with_capacity(cfg.depth + 1);
        for layer in 1..=cfg.depth {
            if let Some(pos) = cfg.selector_layers.iter().position(|&l| l == layer) {
                alive = self.0[pos];
            }
            out.push(alive);
        }
        out.push(alive);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostOptions {
    pub flops_per_mac: u64,
    /// Multiply every per-timestep stage by `T`.
    pub temporal_factor: bool,
    /// Scale prunable layers by their alive-weight fraction.
    pub sparse_accounting: bool,
    /// Selector scorer width; 0 means `D / 2`.
    pub scorer_hidden: usize,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self { flops_per_mac: 1, temporal_factor: true, sparse_accounting: false, scorer_hidden: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub flops: u64,
    pub token_count: usize,
    pub alive_weights: usize,
    /// Spike-triggered accumulates, filled in by [`profile`] from measured
    /// block-input firing rates. `None` for analytic-only reports.
    pub synaptic_ops: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub convention: String,
    pub options: CostOptions,
    pub schedule: KeepSchedule,
    pub weight_sparsity: f64,
    pub per_layer: Vec<LayerCost>,
    pub total_flops: u64,
    /// Selector scorers, reported apart from the network total.
    pub selector_flops: u64,
    pub firing_rates: Vec<f64>,
    pub wall_throughput: Option<f64>,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }

    pub fn synaptic_ops(&self) -> Option<u64> {
        self.per_layer.iter().map(|l| l.synaptic_ops).sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Counter<'a> {
    opts: &'a CostOptions,
    t: u64,
    keep: f64,
    layers: Vec<LayerCost>,
}

impl Counter<'_> {
    fn push(&mut self, name: String, macs: u64, tokens: usize, weights: usize, prunable: bool) {
        let mut flops = macs * self.opts.flops_per_mac * self.t;
        let alive = if prunable { (weights as f64 * self.keep).round() as usize } else { weights };
        if prunable && self.opts.sparse_accounting {
            flops = (flops as f64 * self.keep).round() as u64;
        }
        self.layers.push(LayerCost { name, flops, token_count: tokens, alive_weights: alive, synaptic_ops: None });
    }
}

/// [`count_flops_with`] under the default convention.
pub fn count_flops(cfg: &ModelConfig, schedule: &KeepSchedule, weight_sparsity: f64) -> Result<CostReport> {
    count_flops_with(cfg, schedule, weight_sparsity, &CostOptions::default())
}

pub fn count_flops_with(cfg: &ModelConfig, schedule: &KeepSchedule, weight_sparsity: f64, opts: &CostOptions) -> Result<CostReport> {
    cfg.validate()?;
    schedule.validate(cfg)?;
    if !(0.0..=1.0).contains(&weight_sparsity) {
        return Err(Error::Config(format!("weight sparsity must be in [0, 1], got {weight_sparsity}")));
    }
    if opts.flops_per_mac == 0 {
        return Err(Error::Config("flops_per_mac must be >= 1".into()));
    }
    let t = if opts.temporal_factor { cfg.timesteps as u64 } else { 1 };
    let mut c = Counter { opts, t, keep: 1.0 - weight_sparsity, layers: Vec::new() };
    let d = cfg.embed_dim;
    let n = cfg.patch_tokens;

    let (mut hw, mut cin) = (cfg.image_hw, cfg.in_channels);
    for (i, stage) in cfg.sps_stages.iter().enumerate() {
        let w = 9 * cin * stage.channels;
        c.push(format!("sps.{i}"), (hw * hw * w) as u64, hw * hw, w, true);
        if stage.pool {
            hw /= 2;
        }
        cin = stage.channels;
    }
    if cfg.rpe {
        let w = 9 * d * d;
        c.push("sps.rpe".into(), (n * w) as u64, n, w, true);
    }

    let tokens = schedule.tokens_per_block(cfg);
    let hidden = cfg.mlp_hidden();
    for (b, &k) in tokens[..cfg.depth].iter().enumerate() {
        let p = format!("blocks.{b}");
        for name in ["q", "k", "v"] {
            c.push(format!("{p}.attn.{name}"), (k * d * d) as u64, k, d * d, true);
        }
        // Q K^T and (Q K^T) V over the kept tokens
        c.push(format!("{p}.attn.products"), (2 * k * k * d) as u64, k, 0, false);
        c.push(format!("{p}.attn.proj"), (k * d * d) as u64, k, d * d, true);
        c.push(format!("{p}.mlp.fc1"), (k * d * hidden) as u64, k, d * hidden, true);
        c.push(format!("{p}.mlp.fc2"), (k * hidden * d) as u64, k, hidden * d, true);
    }
    let k = tokens[cfg.depth];
    c.push("head".into(), (k * d * cfg.num_classes) as u64, k, d * cfg.num_classes, true);

    let h = if opts.scorer_hidden == 0 { (d / 2).max(1) } else { opts.scorer_hidden };
    let mut alive = n;
    let mut selector_macs = 0u64;
    for &kept in &schedule.0 {
        // the scorer sees the time-averaged tokens once, not once per step
        selector_macs += (alive * (d * h + h * 2)) as u64;
        alive = kept;
    }

    let total_flops = c.layers.iter().map(|l| l.flops).sum();
    let convention = format!(
        "1 MAC = {} FLOP(s); spike-driven products counted as full MACs; {}; SPS at full resolution; \
         selector scorers excluded from the total; weight sparsity {}",
        opts.flops_per_mac,
        if opts.temporal_factor { "multiplied by T" } else { "single timestep" },
        if opts.sparse_accounting { "scales prunable layers" } else { "not applied (dense execution)" },
    );
    Ok(CostReport {
        convention,
        options: *opts,
        schedule: schedule.clone(),
        weight_sparsity,
        per_layer: c.layers,
        total_flops,
        selector_flops: selector_macs * opts.flops_per_mac,
        firing_rates: Vec::new(),
        wall_throughput: None,
    })
}

/// Per-token firing rate averaged over timesteps and channels.
pub fn firing_rate_map(x: &SpikeTensor) -> Vec<f64> {
    let (t, n, d) = (x.timesteps(), x.tokens(), x.channels());
    let m = x.matrix();
    let mut rates = vec![0.0f64; n];
    for step in 0..t {
        for (tok, r) in rates.iter_mut().enumerate() {
            *r += m.row(step * n + tok).iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let denom = (t * d).max(1) as f64;
    rates.iter_mut().for_each(|r| *r /= denom);
    rates
}

/// Mean firing rate over the given tokens.
fn mean_rate(rates: &[f64], tokens: &[usize]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    tokens.iter().map(|&i| rates[i]).sum::<f64>() / tokens.len() as f64
}

/// Runs one eval-mode forward pass and returns the report for the schedule
/// it actually used, with the SPS firing-rate map and synaptic-op estimates.
///
/// Synaptic ops for the spike-driven layers of a block use that block's
/// measured input firing rate; the first SPS convolution sees analog pixels
/// and counts every MAC.
pub fn profile(arch: &Spikformer, params: &ParamStore, input: &Frames, opts: &CostOptions) -> Result<CostReport> {
    let run = crate::model::RunOptions { capture: true, ..crate::model::RunOptions::eval() };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let out = arch.forward(params, input, &run, &mut rng)?;
    let cfg = arch.config();
    let schedule = if cfg.selector_layers.is_empty() || out.decision.layer_history.is_empty() {
        KeepSchedule::dense(cfg)
    } else {
        KeepSchedule::from_decision(&out.decision)
    };
    let mut report = count_flops_with(cfg, &schedule, params.sparsity(), opts)?;
    let maps: Vec<Vec<f64>> = out.captures.iter().map(firing_rate_map).collect();
    report.firing_rates = maps[0].clone();

    let mut alive: Vec<usize> = (0..cfg.patch_tokens).collect();
    let mut block_rates = Vec::with_capacity(cfg.depth + 1);
    let mut history = out.decision.layer_history.iter();
    let mut next = history.next();
    for (b, map) in maps.iter().enumerate().take(cfg.depth) {
        if let Some(rec) = next.filter(|r| r.layer == b + 1) {
            alive = (0..rec.hard.len()).filter(|&i| rec.hard[i]).collect();
            next = history.next();
        }
        block_rates.push(mean_rate(map, &alive));
    }
    block_rates.push(mean_rate(&maps[cfg.depth], &alive));
    let sps_rate = block_rates[0];
    for layer in report.per_layer.iter_mut() {
        let rate = if layer.name == "sps.0" {
            1.0
        } else if layer.name.starts_with("sps.") {
            sps_rate
        } else if let Some(rest) = layer.name.strip_prefix("blocks.") {
            let b: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(0);
            block_rates[b]
        } else {
            block_rates[cfg.depth]
        };
        layer.synaptic_ops = Some((layer.flops as f64 * rate).round() as u64);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Images per second, one entry per timed repeat.
    pub runs: Vec<f64>,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Throughput {
    pub fn from_runs(mut runs: Vec<f64>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Usage("throughput needs at least one run".into()));
        }
        let original = runs.clone();
        runs.sort_by(f64::total_cmp);
        let m = runs.len();
        let median = if m % 2 == 1 { runs[m / 2] } else { 0.5 * (runs[m / 2 - 1] + runs[m / 2]) };
        Ok(Self { runs: original, median, min: runs[0], max: runs[m - 1] })
    }

    /// Half the min-max spread relative to the median.
    pub fn relative_spread(&self) -> f64 {
        0.5 * (self.max - self.min) / self.median
    }
}

/// Times eval-mode prediction over `sample`; one untimed warmup pass first.
pub fn throughput_bench(arch: &Spikformer, params: &ParamStore, sample: &[Frames], repeats: usize, execution: Execution) -> Result<Throughput> {
    if sample.is_empty() {
        return Err(Error::Usage("throughput benchmark needs a non-empty sample".into()));
    }
    if repeats == 0 {
        return Err(Error::Usage("throughput benchmark needs repeats >= 1".into()));
    }
    for x in sample {
        arch.predict(params, x, execution)?;
    }
    let mut runs = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        for x in sample {
            std::hint::black_box(arch.predict(params, x, execution)?);
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        runs.push(sample.len() as f64 / secs);
    }
    Throughput::from_runs(runs)
}

/// Pixel size of one token cell in exported maps.
pub const MAP_CELL: usize = 16;

/// Red for rate 1, blue for rate 0.
pub fn heat_color(rate: f64) -> [u8; 3] {
    let r = rate.clamp(0.0, 1.0);
    [(255.0 * r).round() as u8, 0, (255.0 * (1.0 - r)).round() as u8]
}

/// Encodes a heat map as binary PPM (P6), `MAP_CELL` pixels per token.
pub fn encode_ppm(map: &[f64], grid: (usize, usize)) -> Result<Vec<u8>> {
    let (h, w) = grid;
    if h * w != map.len() {
        return Err(Error::dim("attention map grid", map.len(), format!("{h}x{w}")));
    }
    let (ph, pw) = (h * MAP_CELL, w * MAP_CELL);
    let mut out = format!("P6\n{pw} {ph}\n255\n").into_bytes();
    out.reserve(ph * pw * 3);
    for y in 0..ph {
        for x in 0..pw {
            out.extend_from_slice(&heat_color(map[(y / MAP_CELL) * w + x / MAP_CELL]));
        }
    }
    Ok(out)
}

/// Writes `path` as PPM and a `row,col,rate` CSV next to it; returns the CSV path.
pub fn export_attention_map(map: &[f64], grid: (usize, usize), path: &Path) -> Result<PathBuf> {
    let ppm = encode_ppm(map, grid)?;
    fs::write(path, ppm)?;
    let csv_path = path.with_extension("csv");
    let mut wtr = csv::Writer::from_writer(BufWriter::new(fs::File::create(&csv_path)?));
    wtr.write_record(["row", "col", "rate"])?;
    for (i, &r) in map.iter().enumerate() {
        wtr.write_record([(i / grid.1).to_string(), (i % grid.1).to_string(), r.to_string()])?;
    }
    wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
    Ok(csv_path)
}

/// Reads a map written by [`export_attention_map`] back in token order.
pub fn read_attention_csv(path: &Path) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut cells = Vec::new();
    for rec in rdr.deserialize() {
        let (row, col, rate): (usize, usize, f64) = rec?;
        cells.push((row, col, rate));
    }
    cells.sort_by_key(|&(r, c, _)| (r, c));
    Ok(cells.into_iter().map(|(_, _, v)| v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn paper() -> ModelConfig {
        ModelConfig::paper_dims()
    }

    fn gflops_at(rho: f64) -> f64 {
        let cfg = paper();
        count_flops(&cfg, &KeepSchedule::from_rho(&cfg, rho), 0.0).unwrap().gflops()
    }

    #[test]
    fn dense_model_is_about_374_gflops() {
        let g = gflops_at(1.0);
        assert!((g - 3.74).abs() / 3.74 < 0.1, "{g}");
        // closed form: T * (SPS convs + RPE + 4 blocks + per-token head)
        let sps = 1024 * 9 * (3 * 48 + 48 * 96 + 96 * 192) + 256 * 9 * 192 * 384;
        let rpe = 64 * 9 * 384 * 384;
        let block = 64 * 12 * 384 * 384 + 2 * 64 * 64 * 384;
        let head = 64 * 384 * 10;
        let expected: u64 = 4 * (sps + rpe + 4 * block + head);
        assert_eq!(count_flops(&paper(), &KeepSchedule::dense(&paper()), 0.0).unwrap().total_flops, expected);
    }

    #[test]
    fn half_ratio_reduction_matches_the_ladder() {
        let cfg = paper();
        let by_rho = gflops_at(0.5);
        let by_frac = count_flops(&cfg, &KeepSchedule::from_fractions(&cfg, &[0.5, 0.25, 0.125]).unwrap(), 0.0).unwrap().gflops();
        assert_eq!(by_rho, by_frac);
        let red = 1.0 - by_rho / gflops_at(1.0);
        assert!((red - 0.265).abs() < 0.02, "{red}");
    }

    #[test]
    fn neutral_schedule_equals_dense() {
        let cfg = paper();
        let a = count_flops(&cfg, &KeepSchedule::from_rho(&cfg, 1.0), 0.0).unwrap();
        let b = count_flops(&cfg, &KeepSchedule::from_fractions(&cfg, &[1.0, 1.0, 1.0]).unwrap(), 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn two_flops_per_mac_without_time_gives_the_same_total() {
        let cfg = paper();
        let s = KeepSchedule::dense(&cfg);
        let a = count_flops(&cfg, &s, 0.0).unwrap();
        let opts = CostOptions { flops_per_mac: 2, temporal_factor: false, ..Default::default() };
        let b = count_flops_with(&cfg, &s, 0.0, &opts).unwrap();
        assert_eq!(a.total_flops, 2 * b.total_flops);
        assert!(count_flops_with(&cfg, &s, 0.0, &CostOptions { flops_per_mac: 2, ..Default::default() })
            .unwrap()
            .to_json()
            .unwrap()
            .contains("1 MAC = 2 FLOP"));
    }

    #[test]
    fn inconsistent_schedules_are_config_errors() {
        let cfg = paper();
        for bad in [vec![64, 32], vec![32, 40, 8], vec![65, 32, 16], vec![32, 16, 0]] {
            assert!(matches!(count_flops(&cfg, &KeepSchedule(bad), 0.0), Err(Error::Config(_))));
        }
        assert!(matches!(count_flops(&cfg, &KeepSchedule::dense(&cfg), 1.5), Err(Error::Config(_))));
    }

    #[test]
    fn sparse_accounting_scales_prunable_layers() {
        let cfg = paper();
        let s = KeepSchedule::dense(&cfg);
        let dense = count_flops(&cfg, &s, 0.5).unwrap();
        let sparse = count_flops_with(&cfg, &s, 0.5, &CostOptions { sparse_accounting: true, ..Default::default() }).unwrap();
        for (a, b) in dense.per_layer.iter().zip(&sparse.per_layer) {
            if a.name.ends_with("products") {
                assert_eq!(a.flops, b.flops);
            } else {
                assert_eq!(b.flops, (a.flops as f64 * 0.5).round() as u64, "{}", a.name);
            }
            assert_eq!(a.alive_weights, b.alive_weights);
        }
    }

    #[test]
    fn selector_overhead_is_reported_separately() {
        let cfg = paper();
        let r = count_flops(&cfg, &KeepSchedule::dense(&cfg), 0.0).unwrap();
        assert!(r.selector_flops > 0);
        assert!(!r.per_layer.iter().any(|l| l.name.contains("selector")));
        // 64 tokens enter each of three scorers of width 192
        assert_eq!(r.selector_flops, 3 * 64 * (384 * 192 + 192 * 2));
    }

    #[test]
    fn report_json_round_trips() {
        let cfg = ModelConfig::compact();
        let r = count_flops(&cfg, &KeepSchedule::from_rho(&cfg, 0.7), 0.25).unwrap();
        let back: CostReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn schedule_strategy() -> impl Strategy<Value = Vec<usize>> {
        // non-increasing keep counts for 64 tokens and three selectors
        (1usize..=64, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(a, f, g)| {
            let b = ((a as f64 * f).ceil() as usize).max(1);
            let c = ((b as f64 * g).ceil() as usize).max(1);
            vec![a, b, c]
        })
    }

    proptest! {
        #[test]
        fn total_is_sum_of_layers(s in schedule_strategy(), sp in 0.0f64..1.0, sparse: bool) {
            let cfg = paper();
            let opts = CostOptions { sparse_accounting: sparse, ..Default::default() };
            let r = count_flops_with(&cfg, &KeepSchedule(s), sp, &opts).unwrap();
            prop_assert_eq!(r.total_flops, r.per_layer.iter().map(|l| l.flops).sum::<u64>());
        }

        #[test]
        fn flops_monotone_in_every_schedule_entry(s in schedule_strategy(), pos in 0usize..3) {
            let cfg = paper();
            let base = count_flops(&cfg, &KeepSchedule(s.clone()), 0.0).unwrap().total_flops;
            // dropping one more token at `pos` (and capping later entries) must cost strictly less
            let mut t = s.clone();
            if t[pos] > 1 {
                t[pos] -= 1;
                for j in pos + 1..3 {
                    t[j] = t[j].min(t[pos]);
                }
                let lower = count_flops(&cfg, &KeepSchedule(t), 0.0).unwrap().total_flops;
                prop_assert!(lower < base);
            }
        }

        #[test]
        fn mlp_flops_linear_in_tokens(k in 1usize..=64) {
            let cfg = paper();
            let r = count_flops(&cfg, &KeepSchedule(vec![k, k, k]), 0.0).unwrap();
            let one = count_flops(&cfg, &KeepSchedule(vec![1, 1, 1]), 0.0).unwrap();
            for (a, b) in r.per_layer.iter().zip(&one.per_layer) {
                if a.name.starts_with("blocks.3.mlp") {
                    prop_assert_eq!(a.flops, k as u64 * b.flops);
                }
            }
        }

        #[test]
        fn zero_sparsity_modes_agree(s in schedule_strategy()) {
            let cfg = paper();
            let a = count_flops(&cfg, &KeepSchedule(s.clone()), 0.0).unwrap();
            let b = count_flops_with(&cfg, &KeepSchedule(s), 0.0, &CostOptions { sparse_accounting: true, ..Default::default() }).unwrap();
            prop_assert_eq!(a.per_layer, b.per_layer);
        }
    }

    fn spikes(t: usize, n: usize, d: usize, f: impl FnMut(usize, usize) -> f32) -> SpikeTensor {
        SpikeTensor::new(Matrix::from_fn(t * n, d, f), t, n).unwrap()
    }

    #[test]
    fn firing_rate_map_extremes_and_oracle() {
        assert!(firing_rate_map(&spikes(3, 5, 4, |_, _| 0.0)).iter().all(|&r| r == 0.0));
        assert!(firing_rate_map(&spikes(3, 5, 4, |_, _| 1.0)).iter().all(|&r| r == 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = spikes(4, 6, 5, |_, _| if rng.random_bool(0.3) { 1.0 } else { 0.0 });
        let map = firing_rate_map(&x);
        for (n, &r) in map.iter().enumerate() {
            let mut count = 0usize;
            for t in 0..4 {
                for d in 0..5 {
                    if x.get(t, n, d) == 1.0 {
                        count += 1;
                    }
                }
            }
            assert!((r - count as f64 / 20.0).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn ppm_colors_and_grid_checks() {
        let uniform = encode_ppm(&[0.5; 4], (2, 2)).unwrap();
        let header = b"P6\n32 32\n255\n";
        assert_eq!(&uniform[..header.len()], header);
        let pixels = &uniform[header.len()..];
        assert_eq!(pixels.len(), 32 * 32 * 3);
        assert!(pixels.chunks(3).all(|p| p == [128, 0, 128]));

        let mut hot = vec![0.0; 4];
        hot[3] = 1.0;
        let img = encode_ppm(&hot, (2, 2)).unwrap();
        let px = &img[header.len()..];
        let red: usize = px.chunks(3).filter(|p| *p == [255, 0, 0]).count();
        assert_eq!(red, MAP_CELL * MAP_CELL);
        // bottom-right cell
        let last = (32 * 32 - 1) * 3;
        assert_eq!(&px[last..last + 3], &[255, 0, 0]);

        assert!(matches!(encode_ppm(&[0.0; 5], (2, 2)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn csv_twin_round_trips_and_files_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let map: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin().abs()).collect();
        let p1 = dir.path().join("a.ppm");
        let p2 = dir.path().join("b.ppm");
        let c1 = export_attention_map(&map, (3, 4), &p1).unwrap();
        let c2 = export_attention_map(&map, (3, 4), &p2).unwrap();
        let back = read_attention_csv(&c1).unwrap();
        assert_eq!(back.len(), map.len());
        for (a, b) in back.iter().zip(&map) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(fs::read(&c1).unwrap(), fs::read(&c2).unwrap());
    }

    #[test]
    fn throughput_statistics() {
        let t = Throughput::from_runs(vec![3.0, 1.0, 2.0]).unwrap();
        assert_eq!((t.median, t.min, t.max), (2.0, 1.0, 3.0));
        let one = Throughput::from_runs(vec![5.0]).unwrap();
        assert_eq!(one.median, 5.0);
        assert!(matches!(Throughput::from_runs(vec![]), Err(Error::Usage(_))));
    }

    fn tiny() -> (Spikformer, ParamStore, Frames) {
        let cfg = ModelConfig::compact();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (arch, params) = Spikformer::new(cfg.clone(), crate::selector::SelectorConfig { rho: 0.5, ..Default::default() }, &mut rng).unwrap();
        let px = cfg.image_hw * cfg.image_hw;
        let x = Frames::new(Matrix::from_fn(px, 3, |i, c| ((i * 7 + c * 3) % 5) as f32 / 4.0), 1).unwrap();
        (arch, params, x)
    }

    #[test]
    fn bench_rejects_empty_sample_and_runs_once() {
        let (arch, params, x) = tiny();
        assert!(matches!(throughput_bench(&arch, &params, &[], 3, Execution::Gather), Err(Error::Usage(_))));
        let t = throughput_bench(&arch, &params, &[x], 1, Execution::Gather).unwrap();
        assert_eq!(t.runs.len(), 1);
        assert_eq!(t.median, t.runs[0]);
        assert!(t.median > 0.0);
    }

    #[test]
    fn profile_uses_the_realised_schedule() {
        let (arch, params, x) = tiny();
        let r = profile(&arch, &params, &x, &CostOptions::default()).unwrap();
        assert_eq!(r.schedule, KeepSchedule::from_rho(arch.config(), 0.5));
        assert_eq!(r.firing_rates.len(), 16);
        assert!(r.firing_rates.iter().all(|v| (0.0..=1.0).contains(v)));
        let syn = r.synaptic_ops().unwrap();
        assert!(syn <= r.total_flops);
        assert_eq!(r.per_layer[0].synaptic_ops, Some(r.per_layer[0].flops));
    }
}
