//! Reference implementations shared by the integration and acceptance tests.
//! They favour obviousness over speed and share no code with the library
//! beyond plain data types.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdnn::spike::{Extent, SpikeEvent, SpikeWave};

/// Dense `[map][y][x]` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub maps: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(maps: usize, height: usize, width: usize) -> Self {
        Self {
            maps,
            height,
            width,
            data: vec![0.0; maps * height * width],
        }
    }

    pub fn at(&self, m: usize, y: usize, x: usize) -> f64 {
        self.data[(m * self.height + y) * self.width + x]
    }

    pub fn at_mut(&mut self, m: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(m * self.height + y) * self.width + x]
    }
}

/// Canonical `[map][in][dy][dx]` weights.
#[derive(Debug, Clone)]
pub struct DenseWeights {
    pub maps: usize,
    pub in_maps: usize,
    pub kh: usize,
    pub kw: usize,
    pub w: Vec<f64>,
}

impl DenseWeights {
    pub fn get(&self, f: usize, i: usize, dy: usize, dx: usize) -> f64 {
        self.w[((f * self.in_maps + i) * self.kh + dy) * self.kw + dx]
    }
}

/// Per-step binary spike grids of a wave.
pub fn dense_steps(wave: &SpikeWave) -> Vec<Grid> {
    let e = wave.extent();
    (0..wave.steps())
        .map(|t| {
            let mut g = Grid::zeros(e.maps, e.height, e.width);
            for s in wave.bucket(t) {
                *g.at_mut(s.map(), s.y(), s.x()) = 1.0;
            }
            g
        })
        .collect()
}

pub struct DenseConvResult {
    /// `(step, map, y, x)` of every spike, sorted.
    pub spikes: Vec<(usize, usize, usize, usize)>,
    pub potentials: Grid,
}

/// Straightforward simulation of one conv layer: at every step, every open
/// neuron adds the full correlation of that step's input; then each open
/// location whose best potential reaches threshold fires its best map
/// (lowest index on ties), zeroes all its potentials and closes.
pub fn dense_conv(input: &[Grid], w: &DenseWeights, threshold: f64) -> DenseConvResult {
    let (ih, iw) = (input[0].height, input[0].width);
    let (oh, ow) = (ih - w.kh + 1, iw - w.kw + 1);
    let mut v = Grid::zeros(w.maps, oh, ow);
    let mut closed = vec![false; oh * ow];
    let mut spikes = Vec::new();
    for (t, s) in input.iter().enumerate() {
        for y in 0..oh {
            for x in 0..ow {
                if closed[y * ow + x] {
                    continue;
                }
                for f in 0..w.maps {
                    let mut acc = 0.0;
                    for i in 0..w.in_maps {
                        for dy in 0..w.kh {
                            for dx in 0..w.kw {
                                acc += w.get(f, i, dy, dx) * s.at(i, y + dy, x + dx);
                            }
                        }
                    }
                    *v.at_mut(f, y, x) += acc;
                }
            }
        }
        for y in 0..oh {
            for x in 0..ow {
                if closed[y * ow + x] {
                    continue;
                }
                let mut best: Option<(usize, f64)> = None;
                for f in 0..w.maps {
                    let p = v.at(f, y, x);
                    if p >= threshold && best.is_none_or(|(_, b)| p > b) {
                        best = Some((f, p));
                    }
                }
                if let Some((f, _)) = best {
                    spikes.push((t, f, y, x));
                    closed[y * ow + x] = true;
                    for g in 0..w.maps {
                        *v.at_mut(g, y, x) = 0.0;
                    }
                }
            }
        }
    }
    spikes.sort_unstable();
    DenseConvResult {
        spikes,
        potentials: v,
    }
}

/// First-spike pooling over dense step grids.
pub fn dense_pool(input: &[Grid], window: usize, stride: usize) -> Vec<Grid> {
    let (maps, ih, iw) = (input[0].maps, input[0].height, input[0].width);
    let (oh, ow) = ((ih - window) / stride + 1, (iw - window) / stride + 1);
    let mut done = vec![false; maps * oh * ow];
    input
        .iter()
        .map(|s| {
            let mut g = Grid::zeros(maps, oh, ow);
            for m in 0..maps {
                for y in 0..oh {
                    for x in 0..ow {
                        let k = (m * oh + y) * ow + x;
                        if done[k] {
                            continue;
                        }
                        let any = (0..window).any(|dy| {
                            (0..window).any(|dx| s.at(m, y * stride + dy, x * stride + dx) > 0.0)
                        });
                        if any {
                            done[k] = true;
                            *g.at_mut(m, y, x) = 1.0;
                        }
                    }
                }
            }
            g
        })
        .collect()
}

/// Step grids built from a dense spike list.
pub fn grids_from_spikes(
    spikes: &[(usize, usize, usize, usize)],
    steps: usize,
    maps: usize,
    h: usize,
    w: usize,
) -> Vec<Grid> {
    let mut out = vec![Grid::zeros(maps, h, w); steps];
    for &(t, m, y, x) in spikes {
        *out[t].at_mut(m, y, x) = 1.0;
    }
    out
}

pub fn spikes_of_wave(wave: &SpikeWave) -> Vec<(usize, usize, usize, usize)> {
    let mut v: Vec<_> = wave
        .events()
        .map(|e| (e.step(), e.map(), e.y(), e.x()))
        .collect();
    v.sort_unstable();
    v
}

/// Random wave with each neuron firing at most once, roughly `density` of
/// neurons active.
pub fn random_wave(rng: &mut impl Rng, extent: Extent, steps: usize, density: f64) -> SpikeWave {
    let mut wave = SpikeWave::new(extent, steps);
    for m in 0..extent.maps {
        for y in 0..extent.height {
            for x in 0..extent.width {
                if rng.gen::<f64>() < density {
                    let t = rng.gen_range(0..steps);
                    wave.push(SpikeEvent::new(m, x, y, t)).unwrap();
                }
            }
        }
    }
    wave
}

/// Random dyadic weights `k / 256` in `[lo, 1]`: every partial sum is exact
/// in f64, whatever the summation order.
pub fn dyadic_weights(rng: &mut impl Rng, n: usize, lo: f64) -> Vec<f64> {
    let lo_k = (lo * 256.0).ceil() as u32;
    (0..n)
        .map(|_| rng.gen_range(lo_k..=256) as f64 / 256.0)
        .collect()
}

/// One-vs-rest linear SVM fitted by exact dual coordinate descent on
/// `min 1/2 |w|^2 + C sum hinge` with the bias as an extra constant feature.
/// Returns `(weights, bias)` per class; inputs are used as given.
pub fn dual_cd_svm(
    x: &[Vec<f64>],
    y: &[usize],
    classes: usize,
    c: f64,
    sweeps: usize,
) -> Vec<(Vec<f64>, f64)> {
    let n = x.len();
    let d = x[0].len();
    let q: Vec<f64> = x
        .iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>() + 1.0)
        .collect();
    (0..classes)
        .map(|k| {
            let yk: Vec<f64> = y.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect();
            let mut alpha = vec![0.0; n];
            let mut w = vec![0.0; d];
            let mut b = 0.0;
            for _ in 0..sweeps {
                for i in 0..n {
                    let g =
                        yk[i] * (x[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b) - 1.0;
                    let new = (alpha[i] - g / q[i]).clamp(0.0, c);
                    let delta = new - alpha[i];
                    if delta != 0.0 {
                        alpha[i] = new;
                        for (wj, xj) in w.iter_mut().zip(&x[i]) {
                            *wj += delta * yk[i] * xj;
                        }
                        b += delta * yk[i];
                    }
                }
            }
            (w, b)
        })
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scalar soft-bound STDP iteration for one synapse: `w + a w (1 - w)` with
/// `a = +a_plus` or `-a_minus`.
pub fn stdp_scalar(w: f64, causal: bool, a_plus: f64, a_minus: f64) -> f64 {
    let a = if causal { a_plus } else { -a_minus };
    (w + a * w * (1.0 - w)).clamp(0.0, 1.0)
}

/// A random two-conv-layer fixture: conv, 2x2 pool, conv.
pub struct Fixture {
    pub wave: SpikeWave,
    pub w1: DenseWeights,
    pub w2: DenseWeights,
    pub thr1: f64,
    pub thr2: f64,
}

impl Fixture {
    pub fn random(rng: &mut impl Rng, size: usize, steps: usize) -> Self {
        let density = rng.gen_range(0.1..0.4);
        let wave = random_wave(rng, Extent::new(2, size, size), steps, density);
        let m1 = rng.gen_range(2..6);
        let m2 = rng.gen_range(2..5);
        let w1 = DenseWeights {
            maps: m1,
            in_maps: 2,
            kh: 3,
            kw: 3,
            w: dyadic_weights(rng, m1 * 2 * 9, 0.25),
        };
        let w2 = DenseWeights {
            maps: m2,
            in_maps: m1,
            kh: 3,
            kw: 3,
            w: dyadic_weights(rng, m2 * m1 * 9, 0.25),
        };
        let thr1 = rng.gen_range(4..16) as f64 / 4.0;
        let thr2 = rng.gen_range(4..24) as f64 / 4.0;
        Self {
            wave,
            w1,
            w2,
            thr1,
            thr2,
        }
    }

    pub fn network(&self) -> sdnn::Network {
        use sdnn::snn::{ConvLayerState, PoolLayerState};
        use sdnn::{ConvLayerSpec, Layer, Network, PoolLayerSpec, WeightTensor};
        let conv = |w: &DenseWeights, thr: f64| {
            let spec = ConvLayerSpec {
                maps: w.maps,
                window: [w.kh, w.kw],
                threshold: thr,
            };
            let t = WeightTensor::from_canonical(w.maps, w.in_maps, w.kh, w.kw, &w.w).unwrap();
            Layer::Conv(ConvLayerState::new(spec, t).unwrap())
        };
        Network::new(vec![
            conv(&self.w1, self.thr1),
            Layer::Pool(
                PoolLayerState::new(PoolLayerSpec {
                    window: [2, 2],
                    stride: 2,
                })
                .unwrap(),
            ),
            conv(&self.w2, self.thr2),
        ])
    }

    /// Dense simulation of the whole fixture; the second conv layer runs
    /// with an infinite threshold when `integrate_only_last` is set.
    pub fn dense(
        &self,
        integrate_only_last: bool,
    ) -> (DenseConvResult, Vec<Grid>, DenseConvResult) {
        let steps = self.wave.steps();
        let input = dense_steps(&self.wave);
        let c1 = dense_conv(&input, &self.w1, self.thr1);
        let (h1, w1) = (c1.potentials.height, c1.potentials.width);
        let g1 = grids_from_spikes(&c1.spikes, steps, self.w1.maps, h1, w1);
        let p1 = dense_pool(&g1, 2, 2);
        let thr2 = if integrate_only_last {
            f64::INFINITY
        } else {
            self.thr2
        };
        let c2 = dense_conv(&p1, &self.w2, thr2);
        (c1, p1, c2)
    }
}

pub fn potentials_of(net: &sdnn::Network, layer: usize) -> Grid {
    let conv = net.conv(layer);
    let e = conv.output_extent();
    let mut g = Grid::zeros(e.maps, e.height, e.width);
    for m in 0..e.maps {
        for y in 0..e.height {
            for x in 0..e.width {
                *g.at_mut(m, y, x) = conv.potential(m, y, x);
            }
        }
    }
    g
}

pub fn data_root() -> Option<std::path::PathBuf> {
    let root = match std::env::var_os("SDNN_DATA_ROOT") {
        Some(r) => std::path::PathBuf::from(r),
        None => std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"),
    };
    root.join("mnist/train-images-idx3-ubyte")
        .exists()
        .then(|| root.join("mnist"))
}

pub fn configs_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Three classes of 20x20 images: a horizontal bar, a vertical bar and a
/// diagonal line, each at a random offset over faint noise.
pub fn synthetic_dataset(split: sdnn::Split, per_class: usize, seed: u64) -> sdnn::Dataset {
    use sdnn::datasets::Sample;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 20;
    let mut samples = Vec::new();
    for i in 0..3 * per_class {
        let label = i % 3;
        let mut px: Vec<u8> = (0..size * size).map(|_| rng.gen_range(0..20)).collect();
        let o = rng.gen_range(5..15);
        let len = rng.gen_range(8..14);
        let start = rng.gen_range(2..size - len - 1);
        for k in start..start + len {
            let (x, y) = match label {
                0 => (k, o),
                1 => (o, k),
                _ => (k, (k + o) % size),
            };
            px[y * size + x] = 200 + rng.gen_range(0..40);
        }
        samples.push(Sample {
            image: sdnn::RawImage::new(size, size, px).unwrap(),
            label,
            origin: None,
        });
    }
    let names = ["horizontal", "vertical", "diagonal"]
        .map(String::from)
        .to_vec();
    sdnn::Dataset::new(samples, names, split, None).unwrap()
}

pub const TINY_CONFIG: &str = r#"
seed = 5
time_steps = 10
input_size = [20, 20]

[dog]
kernel_size = 5
sigma_center = 1.0
sigma_surround = 2.0
polarity = "on_and_off"
firing_threshold = 0.02

[[layers]]
kind = "conv"
maps = 4
window = [5, 5]
threshold = 5.0
stdp = { a_plus = 0.1, a_minus = 0.075, inhibition_radius = 2, max_iterations = 2000 }

[[layers]]
kind = "pool"
window = [2, 2]
stride = 2

[[layers]]
kind = "conv"
maps = 6
window = [3, 3]
threshold = 3.0
stdp = { a_plus = 0.1, a_minus = 0.075, inhibition_radius = 1, max_iterations = 2000 }

[classifier]
penalty_c = 1.0

[dataset]
format = "mnist"
root = "unused"
"#;

pub fn tiny_config() -> sdnn::NetworkConfig {
    sdnn::NetworkConfig::from_toml(TINY_CONFIG).unwrap()
}

/// One map whose window covers the whole input: pattern cells spike at step
/// 0, distractor cells after the neuron has fired, the rest stay silent.
pub fn frozen_pattern(rng: &mut ChaCha8Rng) -> (SpikeWave, Vec<Option<usize>>) {
    let (h, w, steps) = (5, 5, 6);
    let mut wave = SpikeWave::new(Extent::new(2, h, w), steps);
    let mut times = vec![None; 2 * h * w];
    for m in 0..2 {
        for y in 0..h {
            for x in 0..w {
                let t = match rng.gen_range(0..4) {
                    0 => Some(0),
                    1 => Some(rng.gen_range(2..steps)),
                    _ => None,
                };
                if let Some(t) = t {
                    wave.push(SpikeEvent::new(m, x, y, t)).unwrap();
                    times[(m * h + y) * w + x] = Some(t);
                }
            }
        }
    }
    (wave, times)
}
