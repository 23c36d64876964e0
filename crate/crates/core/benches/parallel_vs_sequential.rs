//! Per-pair loss/gradient fan-out and candidate generation on the desk model.
//!
//! `cargo bench` measures the rayon build at 1 thread and at the full pool;
//! `cargo bench --no-default-features` measures the sequential build under
//! the same group names so criterion can compare the saved baselines.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mpo_core::lm::{build_model, clone_frozen, ArchConfig, SamplingConfig};
use mpo_core::objectives::{loss_and_grad, reference_logprobs, Batch, CeSource, Objective, PreferencePair};
use mpo_core::prefset::generate_candidates;
use mpo_core::synth::{make_corpus, make_world};

#[cfg(feature = "parallel")]
struct Pool(rayon::ThreadPool);

#[cfg(feature = "parallel")]
impl Pool {
    fn new(threads: usize) -> Self {
        Pool(rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap())
    }

    fn run<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        self.0.install(f)
    }
}

#[cfg(not(feature = "parallel"))]
struct Pool;

#[cfg(not(feature = "parallel"))]
impl Pool {
    fn new(_threads: usize) -> Self {
        Pool
    }

    fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        f()
    }
}

fn workloads(c: &mut Criterion, label: &str, threads: usize) {
    let world = make_world(1);
    let items = make_corpus(&world, 8, 2).unwrap();
    let model = build_model(&ArchConfig::default(), 3).unwrap();
    let reference = clone_frozen(&model);
    let pairs: Vec<PreferencePair> = items
        .iter()
        .map(|it| {
            let mut y_l = it.reference.clone();
            y_l.ids.remove(0);
            PreferencePair {
                x: it.prompt.clone(),
                y_w: it.reference.clone(),
                y_l,
            }
        })
        .collect();
    let batch = Batch {
        ref_logprobs: reference_logprobs(&reference, &pairs).unwrap(),
        pairs,
        ce_examples: Vec::new(),
    };
    let objective = Objective::Mpo { beta: 0.1, lambda: 10.0 };
    let sampling = SamplingConfig::default();
    let pool = Pool::new(threads);
    c.bench_function(&format!("loss_and_grad_8_pairs/{label}"), |b| {
        b.iter(|| pool.run(|| loss_and_grad(&model, &batch, objective, CeSource::PreferredResponses, true).unwrap()))
    });
    c.bench_with_input(BenchmarkId::new("candidates_8x4", label), &(), |b, _| {
        b.iter(|| pool.run(|| generate_candidates(&model, &world, &items, 4, &sampling, 7).unwrap()))
    });
}

fn benches(c: &mut Criterion) {
    #[cfg(feature = "parallel")]
    {
        workloads(c, "rayon-1-thread", 1);
        let n = rayon::current_num_threads();
        if n > 1 {
            workloads(c, &format!("rayon-{n}-threads"), n);
        }
    }
    #[cfg(not(feature = "parallel"))]
    workloads(c, "sequential", 1);
}

criterion_group! {
    name = group;
    config = Criterion::default().sample_size(10);
    targets = benches
}
criterion_main!(group);
