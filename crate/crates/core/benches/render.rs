use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lumigs::exec::set_parallel;
use lumigs::img::Image;
use lumigs::render::{render_backward_2d, render_cloud, RenderConfig};
use lumigs::scene::{new_cloud_random, Aabb, Camera};

fn setup(count: usize) -> (lumigs::scene::GaussianCloud, Camera) {
    let bounds = Aabb {
        min: [-1.0, -1.0, -1.0],
        max: [1.0, 1.0, 1.0],
    };
    let cloud = new_cloud_random(count, bounds, 7).unwrap();
    let camera = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 96, 96, 0.9).unwrap();
    (cloud, camera)
}

fn paths() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn forward(c: &mut Criterion) {
    let cfg = RenderConfig::default();
    let mut group = c.benchmark_group("render_forward");
    for count in [256, 2048] {
        let (cloud, camera) = setup(count);
        for (name, parallel) in paths() {
            group.bench_with_input(BenchmarkId::new(name, count), &count, |b, _| {
                set_parallel(parallel);
                b.iter(|| render_cloud(&cloud, &camera, &cfg).unwrap());
            });
        }
    }
    group.finish();
    set_parallel(true);
}

fn backward(c: &mut Criterion) {
    let cfg = RenderConfig::default();
    let mut group = c.benchmark_group("render_backward");
    for count in [256, 2048] {
        let (cloud, camera) = setup(count);
        let out = render_cloud(&cloud, &camera, &cfg).unwrap();
        let g = Image::filled(camera.width, camera.height, [1e-3, -2e-3, 5e-4]);
        for (name, parallel) in paths() {
            group.bench_with_input(BenchmarkId::new(name, count), &count, |b, _| {
                set_parallel(parallel);
                b.iter(|| render_backward_2d(&out, &g, &g).unwrap());
            });
        }
    }
    group.finish();
    set_parallel(true);
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = forward, backward
}
criterion_main!(benches);
