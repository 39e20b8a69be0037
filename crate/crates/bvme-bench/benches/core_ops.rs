use criterion::{black_box, criterion_group, criterion_main, Criterion};

use bvme_core::graph::{attention_mean_adjacency, sample_adjacency, sparsify_topk, AttentionParams, GraphMode};
use bvme_core::rng::{stream_rng, Stream};
use bvme_core::tensor::{zero_grads, Tensor};
use bvme_core::vme::{encode_posterior, kl_to_prior, BvmePrior, VmeHeads};

/// Deterministic quasi-random fill in [-scale, scale].
fn filled(shape: &[usize], scale: f64, param: bool) -> Tensor {
    let len: usize = shape.iter().product();
    let values: Vec<f64> = (0..len)
        .map(|i| {
            let h = (i as u64).wrapping_mul(2654435761).wrapping_add(12345) % 10_000;
            scale * (h as f64 / 5000.0 - 1.0)
        })
        .collect();
    if param {
        Tensor::param(shape, values).unwrap()
    } else {
        Tensor::constant(shape, values).unwrap()
    }
}

fn bench_matmul_backward(c: &mut Criterion) {
    let a = filled(&[64, 64], 0.1, true);
    let b = filled(&[64, 64], 0.1, true);
    c.bench_function("matmul_64x64_fwd_bwd", |bench| {
        bench.iter(|| {
            let out = a.matmul(&b).unwrap().sum_all().unwrap();
            zero_grads(&[a.clone(), b.clone()]);
            out.backward().unwrap();
            black_box(out.item())
        })
    });
}

fn bench_graph_pipeline(c: &mut Criterion) {
    let mut rng = stream_rng(2, Stream::Init);
    let p = AttentionParams::init(&mut rng, 16, 8, 0.1);
    let x = filled(&[8, 16], 0.5, false);
    let mut noise = stream_rng(3, Stream::Sampling);
    c.bench_function("graph_attention_topk_sample_n8", |bench| {
        bench.iter(|| {
            let g = attention_mean_adjacency(&x, &p, GraphMode::Learned).unwrap();
            let g = sparsify_topk(&g, 3, Some(&p)).unwrap();
            let adj = sample_adjacency(&g, &mut noise).unwrap();
            black_box(adj.to_vec())
        })
    });
}

fn bench_kl_closed_form(c: &mut Criterion) {
    let mut rng = stream_rng(4, Stream::Init);
    let heads = VmeHeads::init(&mut rng, 32);
    let m = filled(&[8, 32], 0.5, false);
    let prior = BvmePrior::new(0.5).unwrap();
    c.bench_function("posterior_encode_kl_8x32", |bench| {
        bench.iter(|| {
            let post = encode_posterior(&m, &heads, -5.0, 3.0).unwrap();
            let kl = kl_to_prior(&post, prior).unwrap();
            black_box(kl.to_vec())
        })
    });
}

criterion_group!(benches, bench_matmul_backward, bench_graph_pipeline, bench_kl_closed_form);
criterion_main!(benches);
