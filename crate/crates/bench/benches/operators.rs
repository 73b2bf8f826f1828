use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use mefnas::ops::{Activation, Operator, OperatorSpec, ALL_OPERATORS};
use mefnas::param::ParamStore;
use mefnas::tensor::{no_grad, Tensor};
use ndarray::{ArrayD, IxDyn};

const C: usize = 16;
const HW: usize = 32;

fn input() -> Tensor {
    let n = C * HW * HW;
    let data: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[1, C, HW, HW]), data).unwrap())
}

fn forward(c: &mut Criterion) {
    let x = input();
    let mut g = c.benchmark_group("operator_forward");
    for name in ALL_OPERATORS {
        let store = ParamStore::new(0);
        let op = Operator::new(OperatorSpec::new(name, C, C).unwrap(), &store.root(), Activation::default()).unwrap();
        g.bench_function(name, |b| b.iter(|| no_grad(|| black_box(op.forward(&x).unwrap()))));
    }
    g.finish();
}

criterion_group!(benches, forward);
criterion_main!(benches);
