//! Compares the rayon-backed matmul kernels against the always-sequential
//! fallback, plus one full BPTT step at a training-like shape. Build with
//! `--no-default-features` to run the whole suite on the sequential path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use tfc_rnn::bptt::{bptt_gradients, LossMask, SequenceModel};
use tfc_rnn::cells::CellKind;
use tfc_rnn::matrix::{glorot_init, Matrix, Rng};
use tfc_rnn::tasks::gen_copy;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[32usize, 128, 256] {
        let mut rng = Rng::new(7);
        let a = glorot_init(n, n, &mut rng);
        let b = glorot_init(n, n, &mut rng);
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |bench, _| {
            bench.iter(|| std::hint::black_box(a.matmul_seq(&b)))
        });
        group.bench_with_input(BenchmarkId::new("default", n), &n, |bench, _| {
            bench.iter(|| std::hint::black_box(a.matmul(&b)))
        });
    }
    group.finish();
}

fn bench_bptt_step(c: &mut Criterion) {
    let mut rng = Rng::new(11);
    let model = SequenceModel::new(CellKind::Sgru, 10, 64, 9, 1, true, &mut rng);
    let batch = gen_copy(30, 32, &mut rng);
    c.bench_function("bptt_step/sgru_tfc_T30_b32_h64", |bench| {
        bench.iter(|| {
            std::hint::black_box(bptt_gradients(
                &model,
                &batch.inputs,
                &batch.targets,
                &LossMask::All,
            ))
        })
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut rng = Rng::new(13);
    let model = SequenceModel::new(CellKind::Sgru, 10, 128, 9, 1, true, &mut rng);
    let inputs: Vec<Matrix> = (0..50).map(|_| glorot_init(64, 10, &mut rng)).collect();
    c.bench_function("forward/sgru_tfc_T50_b64_h128", |bench| {
        bench.iter(|| std::hint::black_box(model.forward_sequence(&inputs)))
    });
}

criterion_group!(benches, bench_matmul, bench_bptt_step, bench_forward);
criterion_main!(benches);
