//! Experiment drivers: keep-ratio sweep, selector ablation and pruning-method comparison.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{count_flops, throughput_bench, KeepSchedule};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::data::Dataset;
use crate::harness::plot::{line_plot, Series};
use crate::harness::train::{evaluate, EpochLog, EvalStats, SupervisedTrainer};
use crate::model::{Execution, Frames, ModelConfig, Spikformer};
use crate::parallel::Parallelism;
use crate::params::ParamStore;
use crate::pruning::{eb_loop, imp_loop, random_reinit_ticket, EarlyBirdTicket, PruneMethod, RoundMetrics, TicketSnapshot};
use crate::selector::{SelectorConfig, SelectorKind};

/// Stream ids mixed into the experiment seed.
const INIT_STREAM: u64 = 0x1A17;
const PRUNE_STREAM: u64 = 0x9A0E;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ id)
}

/// Architecture and initial parameters for the configured seed.
pub fn init_model(cfg: &ExperimentConfig) -> Result<(Spikformer, ParamStore)> {
    Spikformer::new(cfg.model.clone(), cfg.selector, &mut stream(cfg.seed, INIT_STREAM))
}

pub fn trainer<'d>(cfg: &ExperimentConfig, arch: Spikformer, train: &'d Dataset, test: &'d Dataset, par: Parallelism) -> SupervisedTrainer<'d> {
    let mut t = SupervisedTrainer::new(arch, train, test, cfg.optimizer.clone(), cfg.seed);
    t.parallelism = par;
    t
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub arch: Spikformer,
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
    pub eval: EvalStats,
}

/// Trains the configured model on explicit splits.
pub fn train_on(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset, par: Parallelism) -> Result<TrainedModel> {
    cfg.validate()?;
    let (arch, mut params) = init_model(cfg)?;
    let mut t = trainer(cfg, arch.clone(), train, test, par);
    t.eval_each_epoch = true;
    crate::pruning::Trainer::train(&mut t, &mut params, &mut |_, _| {})?;
    let eval = evaluate(&arch, &params, test, Execution::Masked, par)?;
    Ok(TrainedModel { arch, params, log: t.log, eval })
}

pub fn train_experiment(cfg: &ExperimentConfig, par: Parallelism) -> Result<TrainedModel> {
    let (train, test) = cfg.datasets()?;
    train_on(cfg, &train, &test, par)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub repeats: usize,
    /// Test images timed per repeat.
    pub sample: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self { repeats: 5, sample: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub rho: f64,
    pub accuracy: f64,
    pub throughput: f64,
    pub throughput_min: f64,
    pub throughput_max: f64,
    pub gflops: f64,
    pub flops_reduction: f64,
    pub paper_dims_gflops: f64,
}

fn with_rho(cfg: &ExperimentConfig, rho: f64, kind: SelectorKind) -> ExperimentConfig {
    ExperimentConfig { selector: SelectorConfig { rho, kind, ..cfg.selector }, ..cfg.clone() }
}

/// Trains one model per keep ratio; reports accuracy, gather-mode throughput and analytic FLOPs.
pub fn run_table1_analog(cfg: &ExperimentConfig, rhos: &[f64], bench: BenchSettings, par: Parallelism) -> Result<Vec<Table1Row>> {
    if rhos.is_empty() {
        return Err(Error::Usage("table1 needs at least one keep ratio".into()));
    }
    let (train, test) = cfg.datasets()?;
    let sample: Vec<Frames> = test.samples.iter().take(bench.sample).map(|s| s.frames.clone()).collect();
    let dense = count_flops(&cfg.model, &KeepSchedule::dense(&cfg.model), 0.0)?.total_flops as f64;
    let paper = ModelConfig::paper_dims();
    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        let c = with_rho(cfg, rho, SelectorKind::Spiking);
        let m = train_on(&c, &train, &test, par)?;
        let tp = throughput_bench(&m.arch, &m.params, &sample, bench.repeats, Execution::Gather)?;
        let flops = count_flops(&cfg.model, &KeepSchedule::from_rho(&cfg.model, rho), 0.0)?.total_flops as f64;
        let paper_flops = count_flops(&paper, &KeepSchedule::from_rho(&paper, rho), 0.0)?;
        rows.push(Table1Row {
            rho,
            accuracy: m.eval.accuracy,
            throughput: tp.median,
            throughput_min: tp.min,
            throughput_max: tp.max,
            gflops: flops / 1e9,
            flops_reduction: 1.0 - flops / dense,
            paper_dims_gflops: paper_flops.gflops(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectorRun {
    pub seed: u64,
    pub rho: f64,
    pub selector: SelectorKind,
    pub accuracy: f64,
    pub foreground_keep: Option<f64>,
    pub background_keep: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Cell {
    pub rho: f64,
    pub selector: SelectorKind,
    pub seeds: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub foreground_keep: Option<f64>,
    pub background_keep: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn mean_opt(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.collect();
    v.filter(|v| !v.is_empty()).map(|v| mean_std(&v).0)
}

/// Spiking versus random selector at each keep ratio; both runs of a pair share data and initialization.
pub fn run_selector_pairs(cfg: &ExperimentConfig, rhos: &[f64], seeds: &[u64], par: Parallelism) -> Result<Vec<SelectorRun>> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let base = ExperimentConfig { seed, ..cfg.clone() };
        let (train, test) = base.datasets()?;
        for &rho in rhos {
            for kind in [SelectorKind::Spiking, SelectorKind::Random] {
                let m = train_on(&with_rho(&base, rho, kind), &train, &test, par)?;
                runs.push(SelectorRun {
                    seed,
                    rho,
                    selector: kind,
                    accuracy: m.eval.accuracy,
                    foreground_keep: m.eval.foreground_keep,
                    background_keep: m.eval.background_keep,
                });
            }
        }
    }
    Ok(runs)
}

pub fn summarize_selector_runs(runs: &[SelectorRun]) -> Vec<Table3Cell> {
    let mut cells: Vec<Table3Cell> = Vec::new();
    for r in runs {
        if cells.iter().any(|c| c.rho == r.rho && c.selector == r.selector) {
            continue;
        }
        let group: Vec<&SelectorRun> = runs.iter().filter(|x| x.rho == r.rho && x.selector == r.selector).collect();
        let accs: Vec<f64> = group.iter().map(|x| x.accuracy).collect();
        let (mean_acc, std_acc) = mean_std(&accs);
        cells.push(Table3Cell {
            rho: r.rho,
            selector: r.selector,
            seeds: group.len(),
            mean_acc,
            std_acc,
            foreground_keep: mean_opt(group.iter().map(|x| x.foreground_keep)),
            background_keep: mean_opt(group.iter().map(|x| x.background_keep)),
        });
    }
    cells
}

pub fn run_table3_analog(cfg: &ExperimentConfig, rhos: &[f64], seeds: &[u64], par: Parallelism) -> Result<Vec<Table3Cell>> {
    if rhos.is_empty() || seeds.is_empty() {
        return Err(Error::Usage("table3 needs at least one keep ratio and one seed".into()));
    }
    Ok(summarize_selector_runs(&run_selector_pairs(cfg, rhos, seeds, par)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig4Point {
    pub method: PruneMethod,
    pub round: usize,
    pub sparsity: f64,
    pub eval_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Fig4Report {
    pub points: Vec<Fig4Point>,
    pub imp: TicketSnapshot,
    pub early_bird: Vec<EarlyBirdTicket>,
}

fn point(method: PruneMethod, m: &RoundMetrics) -> Fig4Point {
    Fig4Point { method, round: m.round, sparsity: m.sparsity, eval_acc: m.eval_acc }
}

/// IMP with rewinding, then at every IMP sparsity the random re-initialization
/// of the same mask and the early-bird ticket.
pub fn run_fig4_analog(cfg: &ExperimentConfig, par: Parallelism) -> Result<Fig4Report> {
    cfg.validate()?;
    let (train, test) = cfg.datasets()?;
    let (arch, init) = init_model(cfg)?;
    let mut t = trainer(cfg, arch, &train, &test, par);
    let mut rng = stream(cfg.seed, PRUNE_STREAM);
    let imp_cfg = crate::pruning::PruneConfig { method: PruneMethod::ImpRewind, ..cfg.prune.clone() };
    let mut params = init.clone();
    let imp = imp_loop(&mut t, &mut params, &imp_cfg, &mut rng)?;
    let mut points: Vec<Fig4Point> = imp.metrics.iter().map(|m| point(PruneMethod::ImpRewind, m)).collect();
    for round in 1..imp.round_masks.len() {
        let m = random_reinit_ticket(&mut t, &imp, round, &mut rng)?;
        points.push(point(PruneMethod::RandomReinit, &m));
    }
    let targets: Vec<(usize, f64)> = imp.metrics.iter().skip(1).map(|m| (m.round, m.sparsity)).collect();
    let early_bird = eb_loop(&mut t, &init, &cfg.prune, &targets)?;
    points.extend(early_bird.iter().map(|e| point(PruneMethod::EarlyBird, &e.metrics)));
    Ok(Fig4Report { points, imp, early_bird })
}

pub fn fig4_svg(points: &[Fig4Point]) -> String {
    let series: Vec<Series> = [(PruneMethod::ImpRewind, "IMP"), (PruneMethod::EarlyBird, "EB"), (PruneMethod::RandomReinit, "RR")]
        .iter()
        .map(|&(m, label)| Series {
            label: label.into(),
            points: points.iter().filter(|p| p.method == m).map(|p| (p.sparsity, p.eval_acc)).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect();
    line_plot("Accuracy vs weight sparsity", "sparsity", "eval accuracy", &series)
}

pub fn write_fig4(dir: &Path, report: &Fig4Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("fig4.csv"), &report.points)?;
    fs::write(dir.join("fig4.svg"), fig4_svg(&report.points))?;
    crate::pruning::write_round_metrics(fs::File::create(dir.join("imp_rounds.csv"))?, &report.imp.metrics)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::DatasetConfig;
    use crate::harness::data::SyntheticConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::compact();
        cfg.optimizer.epochs = 1;
        cfg.optimizer.batch_size = 8;
        cfg.prune.rounds = 2;
        cfg.prune.eb_window = 2;
        cfg.dataset = DatasetConfig::SyntheticFgBg { train_samples: 16, test_samples: 8, synthetic: SyntheticConfig::default() };
        cfg
    }

    #[test]
    fn mean_std_matches_hand_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }

    #[test]
    fn training_is_deterministic_single_threaded() {
        let cfg = tiny();
        let a = train_experiment(&cfg, Parallelism::Sequential).unwrap();
        let b = train_experiment(&cfg, Parallelism::Sequential).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let mut cfg = tiny();
        cfg.optimizer.epochs = 0;
        let m = train_experiment(&cfg, Parallelism::Sequential).unwrap();
        assert_eq!(m.params, init_model(&cfg).unwrap().1);
        assert!(m.log.is_empty());
    }

    #[test]
    fn table3_pairs_every_cell() {
        let cells = run_table3_analog(&tiny(), &[0.5], &[0, 1], Parallelism::Sequential).unwrap();
        assert_eq!(cells.len(), 2);
        assert!(cells.iter().all(|c| c.seeds == 2 && c.foreground_keep.is_some()));
        assert_eq!(cells[0].selector, SelectorKind::Spiking);
        assert_eq!(cells[1].selector, SelectorKind::Random);
    }

    #[test]
    fn fig4_covers_three_methods_at_matched_sparsity() {
        let rep = run_fig4_analog(&tiny(), Parallelism::Sequential).unwrap();
        let of = |m| rep.points.iter().filter(|p| p.method == m).collect::<Vec<_>>();
        assert_eq!(of(PruneMethod::ImpRewind).len(), 3);
        assert_eq!(of(PruneMethod::RandomReinit).len(), 2);
        assert_eq!(of(PruneMethod::EarlyBird).len(), 2);
        for (a, b) in of(PruneMethod::ImpRewind)[1..].iter().zip(of(PruneMethod::RandomReinit)) {
            assert_eq!(a.sparsity, b.sparsity);
        }
        let dir = tempfile::tempdir().unwrap();
        write_fig4(dir.path(), &rep).unwrap();
        let csv = fs::read_to_string(dir.path().join("fig4.csv")).unwrap();
        assert!(csv.starts_with("method,round,sparsity,eval_acc\nimp_rewind,0,0.0,"));
        assert!(fs::read_to_string(dir.path().join("fig4.svg")).unwrap().contains("<polyline"));
    }

    #[test]
    fn table1_rows_follow_the_flops_ladder() {
        let rows = run_table1_analog(&tiny(), &[1.0, 0.5], BenchSettings { repeats: 1, sample: 2 }, Parallelism::Sequential).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].flops_reduction, 0.0);
        assert!(rows[1].gflops < rows[0].gflops);
        assert!(rows.iter().all(|r| r.throughput > 0.0));
    }
}
