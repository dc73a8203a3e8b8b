use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gst_bench::instance;
use gst_core::kernel::{build_kernel, CorrespondenceParams};
use gst_core::losses::{cost_matrix, dmcount_loss_with_cost, gst_loss, DmCountConfig, Metric, SinkhornConfig};

fn losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss");
    group.sample_size(10);
    for &(side, n) in &[(64, 10), (128, 50)] {
        let inst = instance(side, side, n);
        let id = format!("{side}x{side}/n{n}");
        group.bench_with_input(BenchmarkId::new("gst", &id), &inst, |b, inst| {
            b.iter(|| gst_loss(&inst.kernel, &inst.density, &inst.target).unwrap())
        });
        let cost = cost_matrix(side, side, &inst.annotations, Metric::SquaredEuclidean).unwrap();
        let cfg = DmCountConfig {
            sinkhorn: SinkhornConfig {
                max_iters: 100,
                tol: 0.0,
                ..SinkhornConfig::default()
            },
            ..DmCountConfig::default()
        };
        group.bench_with_input(BenchmarkId::new("dmcount_k100", &id), &inst, |b, inst| {
            b.iter(|| dmcount_loss_with_cost(&inst.density, &cost, &cfg).unwrap())
        });
    }
    group.finish();
}

fn kernel(c: &mut Criterion) {
    let mut group = c.benchmark_group("kernel");
    group.sample_size(10);
    let inst = instance(64, 64, 10);
    group.bench_function("build_64x64_n10", |b| {
        b.iter(|| build_kernel(&inst.scene, &inst.annotations, &CorrespondenceParams::default()).unwrap())
    });
    group.finish();
}

fn render(c: &mut Criterion) {
    let inst = instance(64, 64, 10);
    c.bench_function("render_64x64", |b| b.iter(|| gst_core::splat2d::render(&inst.scene)));
    c.bench_function("loss_and_grad_64x64", |b| {
        b.iter(|| {
            gst_core::splat2d::total_loss_and_grad(
                &inst.scene,
                &inst.image,
                0.2,
                1.5,
                gst_core::splat2d::RenderMode::Truncated,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, losses, kernel, render);
criterion_main!(benches);
