mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnn::classifier::{svm_predict, svm_train};
use sdnn::plasticity::{convergence_index, train_layer};
use sdnn::snn::{ConvLayerState, ForwardOptions};
use sdnn::{ClassifierParams, ConvLayerSpec, Layer, Network, StdpParams, WeightTensor};

#[test]
fn event_driven_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut total_spikes = 0;
    for _ in 0..100 {
        let fx = Fixture::random(&mut rng, 16, 8);
        let (c1, p1, c2) = fx.dense(false);
        let mut net = fx.network();
        let trace = net
            .forward(
                &fx.wave,
                ForwardOptions {
                    layers: 3,
                    integrate_only_last: false,
                    image_id: 0,
                },
            )
            .unwrap();
        assert_eq!(spikes_of_wave(&trace.outputs[0]), c1.spikes);
        assert_eq!(dense_steps(&trace.outputs[1]), p1);
        assert_eq!(spikes_of_wave(&trace.outputs[2]), c2.spikes);
        assert_eq!(potentials_of(&net, 0), c1.potentials);
        assert_eq!(potentials_of(&net, 2), c2.potentials);
        total_spikes += c1.spikes.len() + c2.spikes.len();
    }
    assert!(total_spikes > 1000, "fixtures too quiet: {total_spikes}");
}

#[test]
fn global_pool_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..50 {
        let fx = Fixture::random(&mut rng, 16, 6);
        let (_, _, c2) = fx.dense(true);
        assert!(c2.spikes.is_empty());
        let mut net = fx.network();
        let (feature, trace) = net.global_pool(&fx.wave, i).unwrap();
        assert!(trace.outputs[2].is_silent());
        let g = &c2.potentials;
        let expected: Vec<f64> = (0..g.maps)
            .map(|m| {
                let mut best = 0.0f64;
                for y in 0..g.height {
                    for x in 0..g.width {
                        best = best.max(g.at(m, y, x));
                    }
                }
                best
            })
            .collect();
        assert_eq!(feature.values, expected);
    }
}

#[test]
fn forward_is_repeatable_on_the_same_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let fx = Fixture::random(&mut rng, 16, 8);
    let mut net = fx.network();
    let opts = ForwardOptions {
        layers: 3,
        integrate_only_last: false,
        image_id: 0,
    };
    let a = net.forward(&fx.wave, opts).unwrap();
    let other = Fixture::random(&mut rng, 16, 8);
    let _ = net.forward(&other.wave, opts);
    let b = net.forward(&fx.wave, opts).unwrap();
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        assert_eq!(spikes_of_wave(x), spikes_of_wave(y));
    }
}

#[test]
fn stdp_on_frozen_pattern_follows_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (wave, times) = frozen_pattern(&mut rng);
    let early = times.iter().filter(|t| **t == Some(0)).count();
    let n = times.len();
    let spec = ConvLayerSpec {
        maps: 1,
        window: [5, 5],
        threshold: 0.5 * early as f64,
    };
    let conv = ConvLayerState::new(spec, WeightTensor::filled(1, 2, 5, 5, 0.8)).unwrap();
    let mut net = Network::new(vec![Layer::Conv(conv)]);
    let mut params = StdpParams::new(0.004, 0.003, 0);
    params.convergence_stop = 1e-12;
    params.max_iterations = Some(1);

    let mut oracle = vec![0.8; n];
    let mut tick = 0;
    let inputs = [wave];
    for _ in 0..2000 {
        net.forward(
            &inputs[0],
            ForwardOptions {
                layers: 1,
                integrate_only_last: false,
                image_id: 0,
            },
        )
        .unwrap();
        let post = net.conv(0).fire_log()[0].event.step();
        train_layer(&mut net, 0, &inputs, &[0], &params, &mut tick, &mut |_| {}).unwrap();
        let w = net.conv(0).weights().to_canonical();
        for (i, o) in oracle.iter_mut().enumerate() {
            *o = stdp_scalar(*o, times[i].is_some_and(|t| t <= post), 0.004, 0.003);
            assert!((w[i] - *o).abs() <= 1e-9, "synapse {i}: {} vs {}", w[i], o);
        }
    }
    let w = net.conv(0).weights().to_canonical();
    for (i, t) in times.iter().enumerate() {
        if *t == Some(0) {
            assert!(w[i] > 0.99, "pattern synapse {i} at {}", w[i]);
        } else {
            assert!(w[i] < 0.01, "other synapse {i} at {}", w[i]);
        }
    }
    assert!(convergence_index(net.conv(0).weights()) < 0.01);
}

fn standardized(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut out = x.to_vec();
    for j in 0..d {
        let mean = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let sd = (x.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for r in &mut out {
            r[j] = (r[j] - mean) / sd;
        }
    }
    out
}

fn primal(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, c: f64) -> f64 {
    let reg = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = z
        .iter()
        .zip(y)
        .map(|(x, yi)| (1.0 - yi * (x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b)).max(0.0))
        .sum();
    reg + c * hinge
}

#[test]
fn svm_separable_margin_matches_dual_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    while x.len() < 200 {
        let p: Vec<f64> = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let s = p[0] + 0.5 * p[1];
        if s.abs() < 0.3 {
            continue;
        }
        labels.push(usize::from(s > 0.0));
        x.push(p);
    }
    let params = ClassifierParams {
        penalty_c: 1.0,
        epochs: 200,
        ..Default::default()
    };
    let model = svm_train(&x, &labels, &params).unwrap();
    for (f, &l) in x.iter().zip(&labels) {
        assert_eq!(svm_predict(&model, f).unwrap().label, l);
    }
    let z = standardized(&x);
    let oracle = dual_cd_svm(&z, &labels, 2, 1.0, 2000);
    let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let margin = 1.0 / norm(&model.weights[1]);
    let expected = 1.0 / norm(&oracle[1].0);
    assert!(
        (margin - expected).abs() <= 0.1 * expected,
        "margin {margin} vs oracle {expected}"
    );
}

#[test]
fn svm_objective_close_to_dual_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let classes = 3;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for i in 0..300 {
        let k = i % classes;
        x.push(
            centers[k]
                .iter()
                .map(|c| c + rng.gen_range(-1.0..1.0))
                .collect::<Vec<f64>>(),
        );
        labels.push(k);
    }
    let c = 2.4;
    let model = svm_train(
        &x,
        &labels,
        &ClassifierParams {
            penalty_c: c,
            ..Default::default()
        },
    )
    .unwrap();
    let z = standardized(&x);
    let oracle = dual_cd_svm(&z, &labels, classes, c, 3000);
    let (mut agree, mut ours_ok, mut theirs_ok) = (0, 0, 0);
    for ((row, zi), &l) in x.iter().zip(&z).zip(&labels) {
        let ours = svm_predict(&model, row).unwrap().label;
        let scores: Vec<f64> = oracle
            .iter()
            .map(|(w, b)| w.iter().zip(zi).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect();
        let theirs = argmax(&scores);
        agree += usize::from(ours == theirs);
        ours_ok += usize::from(ours == l);
        theirs_ok += usize::from(theirs == l);
    }
    assert!(
        agree as f64 >= 0.97 * x.len() as f64,
        "agreement {agree}/300"
    );
    assert!(
        ours_ok + 6 >= theirs_ok,
        "accuracy {ours_ok} vs oracle {theirs_ok}"
    );
    for (k, (w, b)) in oracle.iter().enumerate() {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == k { 1.0 } else { -1.0 })
            .collect();
        let ours = primal(&z, &y, &model.weights[k], model.bias[k], c);
        let best = primal(&z, &y, w, *b, c);
        assert!(
            ours >= best - 1e-6 * best.abs() - 1.0,
            "class {k}: below the optimum"
        );
        assert!(ours <= 1.05 * best, "class {k}: {ours} vs oracle {best}");
    }
}
