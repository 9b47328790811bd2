use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use longgen_bench::qkv_grad;
use longgen_core::attention::{
    blocked_backward, blocked_forward, dense_streaming_backward, dense_streaming_forward, AttnInput,
};
use longgen_core::{build_layout, PatternSpec};

const BLOCK: usize = 64;
const HEAD_DIM: usize = 16;

fn attention(c: &mut Criterion) {
    let sink = PatternSpec::attn_sink(1, 32, BLOCK);
    let full = PatternSpec::full(BLOCK);
    let mut group = c.benchmark_group("attention_fwd_bwd");
    group.sample_size(10);
    for n in [1024, 4096] {
        let [q, k, v, d_o] = qkv_grad(n, HEAD_DIM, n as u64);
        let sparse_layout = build_layout(&sink, sink.n_blocks(n));
        let full_layout = build_layout(&full, full.n_blocks(n));
        let sparse = AttnInput::new(&q, &k, &v, &sparse_layout);
        let dense = AttnInput::new(&q, &k, &v, &full_layout);

        group.bench_with_input(BenchmarkId::new("dense_masked", n), &sparse, |b, input| {
            b.iter(|| {
                let (_, saved) = dense_streaming_forward(input).unwrap();
                dense_streaming_backward(input, &saved, &d_o).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("blocked_sink", n), &sparse, |b, input| {
            b.iter(|| {
                let (_, saved) = blocked_forward(input).unwrap();
                blocked_backward(input, &saved, &d_o).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("blocked_full", n), &dense, |b, input| {
            b.iter(|| {
                let (_, saved) = blocked_forward(input).unwrap();
                blocked_backward(input, &saved, &d_o).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, attention);
criterion_main!(benches);
