use criterion::{black_box, criterion_group, criterion_main, Criterion};
use sdnn::encoding::encode_image;
use sdnn::pipeline::build;
use sdnn::snn::ForwardOptions;
use sdnn_bench::{desk_config, stroke_image};

fn forward(c: &mut Criterion) {
    let cfg = desk_config();
    let wave = encode_image(&stroke_image(2), &cfg.dog, cfg.time_steps).unwrap();
    let mut net = build(&cfg).unwrap();
    c.bench_function("forward_first_conv", |b| {
        let opts = ForwardOptions {
            layers: 1,
            integrate_only_last: false,
            image_id: 0,
        };
        b.iter(|| net.forward(black_box(&wave), opts).unwrap())
    });
    c.bench_function("global_pool_features", |b| {
        b.iter(|| net.global_pool(black_box(&wave), 0).unwrap())
    });
}

criterion_group!(benches, forward);
criterion_main!(benches);
