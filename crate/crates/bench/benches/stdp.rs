use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnn::plasticity::{apply_stdp, convergence_index, init_weights, select_winners, WinnerRecord};
use sdnn::snn::ConvLayerState;
use sdnn::{ConvLayerSpec, Extent, StdpParams, WeightInitSpec};

fn stdp(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let input = Extent::new(30, 12, 12);
    let spec = ConvLayerSpec {
        maps: 100,
        window: [5, 5],
        threshold: 10.0,
    };
    let init = WeightInitSpec {
        mean: 0.8,
        std: 0.05,
        seed: 4,
    };
    let weights = init_weights(&init, 100, 30, 5, 5).unwrap();
    let mut layer = ConvLayerState::new(spec, weights).unwrap();
    layer.resize(input).unwrap();
    let pre: Vec<Option<u16>> = (0..input.len())
        .map(|_| rng.gen_bool(0.2).then(|| rng.gen_range(0..30)))
        .collect();
    let params = StdpParams::new(0.004, 0.003, 1);
    let winner = WinnerRecord {
        map: 7,
        x: 3,
        y: 4,
        step: 12,
        potential: 11.0,
    };
    c.bench_function("apply_stdp_30x5x5_window", |b| {
        b.iter(|| apply_stdp(&mut layer, black_box(&winner), &pre, input, &params).unwrap())
    });
    c.bench_function("convergence_index_75k_synapses", |b| {
        b.iter(|| convergence_index(black_box(layer.weights())))
    });

    let wave = sdnn::encoding::encode_image(
        &sdnn_bench::stroke_image(5),
        &sdnn_bench::desk_config().dog,
        30,
    )
    .unwrap();
    let cfg = sdnn_bench::desk_config();
    let mut net = sdnn::pipeline::build(&cfg).unwrap();
    net.forward(
        &wave,
        sdnn::snn::ForwardOptions {
            layers: 1,
            integrate_only_last: false,
            image_id: 0,
        },
    )
    .unwrap();
    let fired = net.conv(0).fire_log().to_vec();
    c.bench_function("select_winners_first_conv", |b| {
        b.iter(|| select_winners(black_box(&fired), 30, 2))
    });
}

criterion_group!(benches, stdp);
criterion_main!(benches);
