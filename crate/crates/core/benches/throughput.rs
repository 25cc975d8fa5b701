//! Parallel versus sequential throughput of the three data-parallel paths:
//! exhaustive enumeration, training steps and benchmark sampling.
//!
//! `cargo bench -p seqflow` compares both modes; building with
//! `--no-default-features` leaves only the sequential one.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use seqflow::eval::{run_hallucination_benchmark, terminal_distribution, DEFAULT_BUDGET};
use seqflow::io::RunConfig;
use seqflow::par;
use seqflow::sampling::SamplerConfig;
use seqflow::trainer::Trainer;
use seqflow::{Backend, Conditioning, ParametricPolicy, Prompt, RowInit, Vocabulary};

fn modes() -> Vec<(&'static str, bool)> {
    if cfg!(feature = "parallel") {
        vec![("sequential", false), ("parallel", true)]
    } else {
        vec![("sequential", false)]
    }
}

fn noisy_copy() -> RunConfig {
    RunConfig::from_json_str(
        r#"{"vocab_size": 16, "max_len": 12, "backend": {"kind": "k-gram", "k": 0}, "conditioning": "aligned",
            "reference": {"kind": "noisy-copy", "eps": 0.1, "spread": 0.9}, "train": {"batch_size": 64}}"#,
    )
    .unwrap()
}

fn enumeration(c: &mut Criterion) {
    let policy = ParametricPolicy::new(
        Vocabulary::new(4).unwrap(),
        Backend::Tabular,
        Conditioning::PromptId,
        7,
        RowInit::Gaussian { seed: 0, sigma: 1.0 },
    )
    .unwrap();
    let q = Prompt::unconditional();
    let mut g = c.benchmark_group("enumerate");
    g.throughput(Throughput::Elements(21_845));
    for (name, on) in modes() {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::new(name, "C4_L7"), |b| {
            b.iter(|| terminal_distribution(black_box(&policy), &q, DEFAULT_BUDGET).unwrap())
        });
    }
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let cfg = noisy_copy();
    let task = cfg.noisy_copy_task(200, 8, 1, 0).unwrap();
    let rm = cfg.reward_model().unwrap();
    let mut g = c.benchmark_group("train_step");
    g.throughput(Throughput::Elements(cfg.train.batch_size as u64));
    for (name, on) in modes() {
        par::set_parallel(on);
        let mut t =
            Trainer::new(cfg.train_plan().unwrap(), rm.reference().clone_reference(), rm.clone(), task.prompts().to_vec())
                .unwrap();
        g.bench_function(BenchmarkId::new(name, "noisy_copy_b64"), |b| {
            b.iter(|| {
                if t.is_done() {
                    t = Trainer::new(
                        cfg.train_plan().unwrap(),
                        rm.reference().clone_reference(),
                        rm.clone(),
                        task.prompts().to_vec(),
                    )
                    .unwrap();
                }
                black_box(t.train_step().unwrap())
            })
        });
    }
    g.finish();
}

fn benchmark_sampling(c: &mut Criterion) {
    let cfg = noisy_copy();
    let task = cfg.noisy_copy_task(200, 8, 2, 100_000).unwrap();
    let policy = cfg.reference_policy().unwrap();
    let rms = SamplerConfig::rms();
    let mut g = c.benchmark_group("hallucination_benchmark");
    g.sample_size(20);
    g.throughput(Throughput::Elements(200 * 20));
    for (name, on) in modes() {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::new(name, "200x20"), |b| {
            b.iter(|| run_hallucination_benchmark(black_box(&policy), &task, &rms, 20, 5).unwrap())
        });
    }
    g.finish();
    par::set_parallel(true);
}

criterion_group!(benches, enumeration, train_steps, benchmark_sampling);
criterion_main!(benches);
