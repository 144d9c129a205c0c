use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikeprune::harness::data::{generate_synthetic, SyntheticConfig};
use spikeprune::harness::train::evaluate;
use spikeprune::model::{Execution, ModelConfig, Spikformer};
use spikeprune::parallel::Parallelism;
use spikeprune::selector::SelectorConfig;

fn batch_eval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (arch, params) = Spikformer::new(ModelConfig::compact(), SelectorConfig::default(), &mut rng).unwrap();
    let data = generate_synthetic(64, &SyntheticConfig::default(), &mut rng).unwrap();
    let mut group = c.benchmark_group("batch_eval");
    group.sample_size(10);
    for (name, par) in [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)] {
        for exec in [Execution::Masked, Execution::Gather] {
            group.bench_with_input(BenchmarkId::new(name, format!("{exec:?}").to_lowercase()), &exec, |b, &exec| {
                b.iter(|| black_box(evaluate(&arch, &params, &data, exec, par).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
