use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikeprune::checkpoint;
use spikeprune::cost::{self, CostOptions, KeepSchedule};
use spikeprune::harness::config::ExperimentConfig;
use spikeprune::harness::experiments::{self, BenchSettings};
use spikeprune::harness::train::evaluate;
use spikeprune::model::{Execution, ModelConfig, RunOptions};
use spikeprune::parallel::{init_threads, Parallelism};
use spikeprune::pruning::{self, eb_loop, imp_loop, sparsity_after, PruneMethod};
use spikeprune::selector::write_decision_trace;
use spikeprune::{Error, Result};

#[derive(Parser)]
#[command(name = "spikeprune", version, about = "Spiking transformer token selection and weight pruning experiments")]
struct Cli {
    /// Experiment config (JSON); the compact synthetic setup when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 1 runs sequentially and is bitwise reproducible.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Masked,
    Gather,
}

impl From<ExecArg> for Execution {
    fn from(e: ExecArg) -> Self {
        match e {
            ExecArg::Masked => Execution::Masked,
            ExecArg::Gather => Execution::Gather,
        }
    }
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint directory written by `train` or `prune`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write a checkpoint.
    Train,
    /// Run the configured pruning method and write per-round metrics.
    Prune,
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, value_enum, default_value = "masked")]
        execution: ExecArg,
    },
    /// Analytic FLOPs report; with a checkpoint, measured firing rates and throughput too.
    Profile {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Count the 384-wide 32x32 model instead of the configured one.
        #[arg(long)]
        paper_dims: bool,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        sparse_accounting: bool,
        #[arg(long, default_value_t = 1)]
        flops_per_mac: u64,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Firing-rate and keep maps (PPM + CSV) and decision traces for test images.
    ExportMaps {
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Accuracy, throughput and FLOPs per keep ratio.
    Table1 {
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.9,0.8,0.7,0.6,0.5")]
        rhos: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 32)]
        bench_sample: usize,
    },
    /// Spiking versus random selector over seeds.
    Table3 {
        #[arg(long, value_delimiter = ',', default_value = "0.8,0.7,0.6")]
        rhos: Vec<f64>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
    /// IMP, early-bird and random re-initialization at matched sparsities.
    Fig4,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::compact(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parallelism(threads: Option<usize>) -> Parallelism {
    match threads {
        Some(1) => Parallelism::Sequential,
        Some(n) => {
            init_threads(n);
            Parallelism::Rayon
        }
        None => Parallelism::Rayon,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let par = parallelism(cli.threads);
    let out = &cli.out;
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;
    match &cli.command {
        Command::Train => {
            let m = experiments::train_experiment(&cfg, par)?;
            experiments::write_csv(&out.join("train_log.csv"), &m.log)?;
            write_json(&out.join("eval.json"), &m.eval)?;
            checkpoint::save(&out.join("checkpoint"), &cfg.model, &cfg.selector, &m.params)?;
            println!("eval accuracy {:.4}, mean kept tokens {:.2}", m.eval.accuracy, m.eval.mean_kept);
        }
        Command::Prune => {
            let (train, test) = cfg.datasets()?;
            let (arch, mut params) = experiments::init_model(&cfg)?;
            let mut t = experiments::trainer(&cfg, arch, &train, &test, par);
            let metrics = match cfg.prune.method {
                PruneMethod::EarlyBird => {
                    let targets: Vec<(usize, f64)> = (1..=cfg.prune.rounds).map(|k| (k, sparsity_after(cfg.prune.p, k))).collect();
                    let tickets = eb_loop(&mut t, &params, &cfg.prune, &targets)?;
                    write_json(&out.join("early_bird.json"), &tickets)?;
                    tickets.into_iter().map(|e| e.metrics).collect()
                }
                _ => {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9A0E);
                    let ticket = imp_loop(&mut t, &mut params, &cfg.prune, &mut rng)?;
                    checkpoint::save(&out.join("checkpoint"), &cfg.model, &cfg.selector, &params)?;
                    ticket.metrics
                }
            };
            pruning::write_round_metrics(fs::File::create(out.join("prune_metrics.csv"))?, &metrics)?;
            for m in &metrics {
                println!("round {} sparsity {:.4} eval {:.4}", m.round, m.sparsity, m.eval_acc);
            }
        }
        Command::Eval { ckpt, execution } => {
            let loaded = checkpoint::load(&ckpt.checkpoint)?;
            let (_, test) = cfg.datasets()?;
            let stats = evaluate(&loaded.arch, &loaded.params, &test, (*execution).into(), par)?;
            write_json(&out.join("eval.json"), &stats)?;
            println!("eval accuracy {:.4}, mean kept tokens {:.2}", stats.accuracy, stats.mean_kept);
        }
        Command::Profile { checkpoint: ckpt, paper_dims, rho, sparse_accounting, flops_per_mac, repeats } => {
            let opts = CostOptions { flops_per_mac: *flops_per_mac, sparse_accounting: *sparse_accounting, ..CostOptions::default() };
            let report = match ckpt {
                Some(dir) => {
                    let loaded = checkpoint::load(dir)?;
                    let (_, test) = cfg.datasets()?;
                    let first = test.samples.first().ok_or_else(|| Error::Usage("empty test split".into()))?;
                    let mut r = cost::profile(&loaded.arch, &loaded.params, &first.frames, &opts)?;
                    let sample: Vec<_> = test.samples.iter().take(32).map(|s| s.frames.clone()).collect();
                    let tp = cost::throughput_bench(&loaded.arch, &loaded.params, &sample, *repeats, Execution::Gather)?;
                    r.wall_throughput = Some(tp.median);
                    write_json(&out.join("throughput.json"), &tp)?;
                    r
                }
                None => {
                    let model = if *paper_dims { ModelConfig::paper_dims() } else { cfg.model.clone() };
                    let schedule = KeepSchedule::from_rho(&model, rho.unwrap_or(cfg.selector.rho));
                    let sparsity = if *sparse_accounting { sparsity_after(cfg.prune.p, cfg.prune.rounds) } else { 0.0 };
                    cost::count_flops_with(&model, &schedule, sparsity, &opts)?
                }
            };
            fs::write(out.join("cost_report.json"), report.to_json()? + "\n")?;
            println!("{:.4} GFLOPs (selector overhead {:.4} GFLOPs) schedule {:?}", report.gflops(), report.selector_flops as f64 / 1e9, report.schedule.0);
            println!("{}", report.convention);
        }
        Command::ExportMaps { ckpt, samples } => {
            let loaded = checkpoint::load(&ckpt.checkpoint)?;
            let (_, test) = cfg.datasets()?;
            let side = loaded.arch.config().grid_side();
            let grid = (side, side);
            let opts = RunOptions { capture: true, ..RunOptions::eval() };
            for (i, s) in test.samples.iter().take(*samples).enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                let fwd = loaded.arch.forward(&loaded.params, &s.frames, &opts, &mut rng)?;
                let rates = cost::firing_rate_map(&fwd.captures[0]);
                cost::export_attention_map(&rates, grid, &out.join(format!("sample{i}_rate.ppm")))?;
                let kept: Vec<f64> = rates.iter().zip(&fwd.decision.hard).map(|(&r, &h)| if h { r } else { 0.0 }).collect();
                cost::export_attention_map(&kept, grid, &out.join(format!("sample{i}_kept.ppm")))?;
                write_decision_trace(fs::File::create(out.join(format!("sample{i}_decisions.csv")))?, &fwd.decision)?;
            }
            println!("wrote maps for {} samples to {}", samples.min(&test.len()), out.display());
        }
        Command::Table1 { rhos, repeats, bench_sample } => {
            let rows = experiments::run_table1_analog(&cfg, rhos, BenchSettings { repeats: *repeats, sample: *bench_sample }, par)?;
            experiments::write_csv(&out.join("table1.csv"), &rows)?;
            for r in &rows {
                println!("rho {:.2} acc {:.4} {:.1} img/s {:.6} GFLOPs (-{:.1}%)", r.rho, r.accuracy, r.throughput, r.gflops, 100.0 * r.flops_reduction);
            }
        }
        Command::Table3 { rhos, seeds } => {
            let seed_list: Vec<u64> = (0..*seeds).map(|s| cfg.seed + s).collect();
            let runs = experiments::run_selector_pairs(&cfg, rhos, &seed_list, par)?;
            let cells = experiments::summarize_selector_runs(&runs);
            experiments::write_csv(&out.join("table3_runs.csv"), &runs)?;
            experiments::write_csv(&out.join("table3.csv"), &cells)?;
            for c in &cells {
                println!("rho {:.2} {:?}: {:.4} +- {:.4}", c.rho, c.selector, c.mean_acc, c.std_acc);
            }
        }
        Command::Fig4 => {
            let rep = experiments::run_fig4_analog(&cfg, par)?;
            experiments::write_fig4(out, &rep)?;
            for p in &rep.points {
                println!("{:?} round {} sparsity {:.4} eval {:.4}", p.method, p.round, p.sparsity, p.eval_acc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
