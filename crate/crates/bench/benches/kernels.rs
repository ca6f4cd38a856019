use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use shiftnet::microbench::Variant;
use shiftnet::ops::softmax_cross_entropy;
use shiftnet::{build_resnet, build_shiftresnet, Layer, Mode};
use shiftnet_bench::{cifar_batch, kernel_case, label, KERNEL_SHAPES};

fn kernels(c: &mut Criterion) {
    for (m, n, f, k) in KERNEL_SHAPES {
        let case = kernel_case(m, n, f, k).expect("valid case");
        let mut group = c.benchmark_group(format!("kernel M={m} N={n} F={f} K={k}"));
        for v in Variant::ALL {
            group.bench_function(BenchmarkId::from_parameter(v.as_str()), |b| {
                b.iter(|| case.run(v).expect("kernel runs"))
            });
        }
        group.finish();
    }
}

fn networks(c: &mut Criterion) {
    let x = cifar_batch(8, 1);
    let mut group = c.benchmark_group("forward batch=8");
    group.sample_size(10);
    let nets = [
        build_resnet::<f32>(20, 10, 0).expect("resnet20"),
        build_shiftresnet::<f32>(20, 1.0, 10, 0).expect("shiftresnet20-1"),
        build_shiftresnet::<f32>(20, 3.0, 10, 0).expect("shiftresnet20-3"),
    ];
    for mut net in nets {
        group.bench_function(label(&net), |b| b.iter(|| net.forward(&x, Mode::Eval).expect("forward")));
    }
    group.finish();

    let labels: Vec<usize> = (0..8).collect();
    let mut net = build_shiftresnet::<f32>(20, 1.0, 10, 0).expect("shiftresnet20-1");
    c.bench_function("train step shiftresnet20-1 batch=8", |b| {
        b.iter(|| {
            let logits = net.forward(&x, Mode::Train).expect("forward");
            let (_, g) = softmax_cross_entropy(&logits, &labels).expect("loss");
            net.backward(&g).expect("backward")
        })
    });
}

criterion_group!(benches, kernels, networks);
criterion_main!(benches);
