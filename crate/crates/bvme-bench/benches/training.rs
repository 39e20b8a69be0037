use criterion::{black_box, criterion_group, criterion_main, Criterion};

use bvme_bench::warmed_gather_run;
use bvme_core::model::Method;

fn bench_collect_episode(c: &mut Criterion) {
    let (mut run, mut env) = warmed_gather_run(Method::Bvme);
    c.bench_function("collect_episode_gather_bvme", |bench| {
        bench.iter(|| {
            run.collect_episode(env.as_mut()).unwrap();
            black_box(run.env_steps)
        })
    });
}

fn bench_train_iteration(c: &mut Criterion) {
    let (mut run, _env) = warmed_gather_run(Method::Bvme);
    c.bench_function("train_iteration_gather_bvme_b8", |bench| {
        bench.iter(|| {
            let stats = run.train_iteration().unwrap();
            black_box(stats.total)
        })
    });
}

fn bench_train_iteration_nograph(c: &mut Criterion) {
    let (mut run, _env) = warmed_gather_run(Method::QmixNograph);
    c.bench_function("train_iteration_gather_nograph_b8", |bench| {
        bench.iter(|| {
            let stats = run.train_iteration().unwrap();
            black_box(stats.total)
        })
    });
}

criterion_group!(benches, bench_collect_episode, bench_train_iteration, bench_train_iteration_nograph);
criterion_main!(benches);
