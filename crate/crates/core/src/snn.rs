//! Event-driven forward dynamics.
//!
//! Convolutional layers hold non-leaky integrate-and-fire neurons with shared
//! weights, one-spike coding and per-location lateral inhibition. Pooling
//! layers forward the first spike seen in their window. Only neurons whose
//! window covers an incoming spike are touched during a time step.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spike::{Extent, SpikeEvent, SpikeWave};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvLayerSpec {
    pub maps: usize,
    /// `[height, width]` of the window in presynaptic units. The depth is the
    /// presynaptic map count.
    pub window: [usize; 2],
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolLayerSpec {
    pub window: [usize; 2],
    pub stride: usize,
}

impl ConvLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.maps == 0 || self.maps > u16::MAX as usize {
            return Err(Error::Config(format!("invalid map count {}", self.maps)));
        }
        if self.window[0] == 0 || self.window[1] == 0 {
            return Err(Error::Config("conv window must be non-empty".into()));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::Config(format!(
                "conv threshold must be positive, got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Output extent for a given presynaptic extent (valid convolution, stride 1).
    pub fn output_extent(&self, input: Extent) -> Result<Extent> {
        let [kh, kw] = self.window;
        if input.height < kh || input.width < kw {
            return Err(Error::Config(format!(
                "{}x{} conv window does not fit a {}x{} input",
                kh, kw, input.height, input.width
            )));
        }
        Ok(Extent::new(
            self.maps,
            input.height - kh + 1,
            input.width - kw + 1,
        ))
    }
}

impl PoolLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.window[0] == 0 || self.window[1] == 0 || self.stride == 0 {
            return Err(Error::Config(
                "pool window and stride must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Output grid `floor((in - window) / stride) + 1`; partial windows are dropped.
    pub fn output_extent(&self, input: Extent) -> Result<Extent> {
        let [ph, pw] = self.window;
        if input.height < ph || input.width < pw {
            return Err(Error::Config(format!(
                "{}x{} pool window does not fit a {}x{} input",
                ph, pw, input.height, input.width
            )));
        }
        if self.stride > input.height || self.stride > input.width {
            return Err(Error::Config(format!(
                "pool stride {} exceeds the {}x{} input",
                self.stride, input.height, input.width
            )));
        }
        Ok(Extent::new(
            input.maps,
            (input.height - ph) / self.stride + 1,
            (input.width - pw) / self.stride + 1,
        ))
    }
}

/// Weights shared by all neurons of a map, for every map of a layer.
///
/// Logical indexing is `[map][in_map][dy][dx]`; storage is synapse-major
/// (`[in_map][dy][dx][map]`) so integration walks maps contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTensor {
    maps: usize,
    in_maps: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
}

impl WeightTensor {
    pub fn filled(maps: usize, in_maps: usize, kh: usize, kw: usize, value: f64) -> Self {
        Self {
            maps,
            in_maps,
            kh,
            kw,
            data: vec![value; maps * in_maps * kh * kw],
        }
    }

    /// Builds a tensor from values in `[map][in_map][dy][dx]` order.
    pub fn from_canonical(
        maps: usize,
        in_maps: usize,
        kh: usize,
        kw: usize,
        values: &[f64],
    ) -> Result<Self> {
        let per_map = in_maps * kh * kw;
        if values.len() != maps * per_map {
            return Err(Error::Dimension(format!(
                "{} weights for a {maps}x{in_maps}x{kh}x{kw} tensor",
                values.len()
            )));
        }
        if let Some(w) = values.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(Error::Domain(format!("weight {w} outside [0, 1]")));
        }
        let mut t = Self::filled(maps, in_maps, kh, kw, 0.0);
        for map in 0..maps {
            for s in 0..per_map {
                t.data[s * maps + map] = values[map * per_map + s];
            }
        }
        Ok(t)
    }

    pub fn to_canonical(&self) -> Vec<f64> {
        let per_map = self.synapses_per_map();
        let mut out = vec![0.0; self.data.len()];
        for map in 0..self.maps {
            for s in 0..per_map {
                out[map * per_map + s] = self.data[s * self.maps + map];
            }
        }
        out
    }

    pub fn maps(&self) -> usize {
        self.maps
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }

    pub fn window(&self) -> [usize; 2] {
        [self.kh, self.kw]
    }

    pub fn synapses_per_map(&self) -> usize {
        self.in_maps * self.kh * self.kw
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Synapse index within one map's window.
    #[inline]
    pub fn synapse(&self, in_map: usize, dy: usize, dx: usize) -> usize {
        (in_map * self.kh + dy) * self.kw + dx
    }

    #[inline]
    pub fn get(&self, map: usize, in_map: usize, dy: usize, dx: usize) -> f64 {
        self.data[self.synapse(in_map, dy, dx) * self.maps + map]
    }

    #[inline]
    pub fn at(&self, map: usize, synapse: usize) -> f64 {
        self.data[synapse * self.maps + map]
    }

    #[inline]
    pub fn at_mut(&mut self, map: usize, synapse: usize) -> &mut f64 {
        &mut self.data[synapse * self.maps + map]
    }

    pub fn set(&mut self, map: usize, in_map: usize, dy: usize, dx: usize, w: f64) {
        let s = self.synapse(in_map, dy, dx);
        self.data[s * self.maps + map] = w;
    }

    /// One map's weights in `[in_map][dy][dx]` order.
    pub fn map_weights(&self, map: usize) -> Vec<f64> {
        (0..self.synapses_per_map())
            .map(|s| self.data[s * self.maps + map])
            .collect()
    }

    pub fn set_map_weights(&mut self, map: usize, values: &[f64]) {
        assert_eq!(values.len(), self.synapses_per_map());
        for (s, &v) in values.iter().enumerate() {
            self.data[s * self.maps + map] = v;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    /// Weights for all maps at one synapse, map-contiguous.
    #[inline]
    fn column(&self, synapse: usize) -> &[f64] {
        &self.data[synapse * self.maps..][..self.maps]
    }

    /// Rounds every weight to the nearest `f32`, the precision models are
    /// stored at.
    pub fn round_to_f32(&mut self) {
        for w in &mut self.data {
            *w = *w as f32 as f64;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdNoiseSpec {
    /// Half-width of the uniform jitter as a fraction of the threshold.
    pub alpha: f64,
    pub seed: u64,
}

impl ThresholdNoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "noise alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn noise_rng(seed: u64, image_id: u64, neuron_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(image_id);
    rng.set_word_pos(neuron_id as u128 * 2);
    rng
}

#[inline]
fn unit_interval(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `threshold + u` with `u ~ U(-alpha * threshold, +alpha * threshold)`, drawn
/// from a counter-based stream keyed on `(seed, image_id, neuron_id)`.
pub fn jitter_threshold(
    spec: &ThresholdNoiseSpec,
    threshold: f64,
    neuron_id: u64,
    image_id: u64,
) -> f64 {
    if spec.alpha == 0.0 || !threshold.is_finite() {
        return threshold;
    }
    let u = unit_interval(noise_rng(spec.seed, image_id, neuron_id).next_u64());
    threshold + spec.alpha * threshold * (2.0 * u - 1.0)
}

/// Same draws as [`jitter_threshold`] for the consecutive neuron ids
/// `first_id..first_id + out.len()`.
fn jitter_block(
    spec: &ThresholdNoiseSpec,
    threshold: f64,
    first_id: u64,
    image_id: u64,
    out: &mut [f64],
) {
    let mut rng = noise_rng(spec.seed, image_id, first_id);
    for v in out {
        let u = unit_interval(rng.next_u64());
        *v = threshold + spec.alpha * threshold * (2.0 * u - 1.0);
    }
}

/// A conv spike together with the potential that triggered it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiredSpike {
    pub event: SpikeEvent,
    pub potential: f64,
}

const NOT_FIRED: u16 = u16::MAX;

/// Runtime state of one convolutional layer.
#[derive(Debug, Clone)]
pub struct ConvLayerState {
    spec: ConvLayerSpec,
    weights: WeightTensor,
    input: Extent,
    output: Extent,
    /// `[location][map]`, location = `y * width + x`.
    potentials: Vec<f64>,
    /// Map that fired at each location, or `NOT_FIRED`. A location that has
    /// fired is closed: every other map there is inhibited.
    fired_map: Vec<u16>,
    /// Per-neuron thresholds (`[location][map]`) when threshold noise is on.
    thresholds: Option<Vec<f64>>,
    touched: Vec<u32>,
    touch_stamp: Vec<u32>,
    epoch: u32,
    fire_log: Vec<FiredSpike>,
}

impl ConvLayerState {
    pub fn new(spec: ConvLayerSpec, weights: WeightTensor) -> Result<Self> {
        spec.validate()?;
        if weights.maps() != spec.maps || weights.window() != spec.window {
            return Err(Error::Dimension(format!(
                "weight tensor {}x{:?} does not match layer spec {}x{:?}",
                weights.maps(),
                weights.window(),
                spec.maps,
                spec.window
            )));
        }
        let input = Extent::new(weights.in_maps(), 0, 0);
        Ok(Self {
            spec,
            weights,
            input,
            output: Extent::new(0, 0, 0),
            potentials: Vec::new(),
            fired_map: Vec::new(),
            thresholds: None,
            touched: Vec::new(),
            touch_stamp: Vec::new(),
            epoch: 0,
            fire_log: Vec::new(),
        })
    }

    pub fn spec(&self) -> &ConvLayerSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightTensor {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightTensor {
        &mut self.weights
    }

    pub fn input_extent(&self) -> Extent {
        self.input
    }

    pub fn output_extent(&self) -> Extent {
        self.output
    }

    /// Sizes the layer for a presynaptic extent and resets it.
    pub fn resize(&mut self, input: Extent) -> Result<()> {
        if input.maps != self.weights.in_maps() {
            return Err(Error::Topology(format!(
                "layer expects {} input maps, got {}",
                self.weights.in_maps(),
                input.maps
            )));
        }
        if input != self.input || self.potentials.is_empty() {
            let output = self.spec.output_extent(input)?;
            if output.height > u16::MAX as usize || output.width > u16::MAX as usize {
                return Err(Error::Dimension("layer too large".into()));
            }
            self.input = input;
            self.output = output;
            self.potentials = vec![0.0; output.len()];
            self.fired_map = vec![NOT_FIRED; output.locations()];
            self.touch_stamp = vec![0; output.locations()];
            self.thresholds = None;
        }
        self.reset();
        Ok(())
    }

    /// Clears potentials, fired and inhibited flags and any per-image
    /// threshold jitter.
    pub fn reset(&mut self) {
        self.potentials.iter_mut().for_each(|v| *v = 0.0);
        self.fired_map.iter_mut().for_each(|m| *m = NOT_FIRED);
        self.touched.clear();
        self.fire_log.clear();
        self.thresholds = None;
    }

    /// Draws per-neuron thresholds for the current image. Neuron ids are
    /// `id_base + map-major index`.
    pub fn apply_threshold_noise(
        &mut self,
        noise: &ThresholdNoiseSpec,
        image_id: u64,
        id_base: u64,
    ) {
        if noise.alpha == 0.0 {
            self.thresholds = None;
            return;
        }
        let out = self.output;
        let mut by_map = vec![0.0; out.len()];
        jitter_block(noise, self.spec.threshold, id_base, image_id, &mut by_map);
        let mut t = vec![0.0; out.len()];
        for map in 0..out.maps {
            for loc in 0..out.locations() {
                t[loc * out.maps + map] = by_map[map * out.locations() + loc];
            }
        }
        self.thresholds = Some(t);
    }

    #[inline]
    fn loc(&self, y: usize, x: usize) -> usize {
        y * self.output.width + x
    }

    pub fn potential(&self, map: usize, y: usize, x: usize) -> f64 {
        self.potentials[self.loc(y, x) * self.output.maps + map]
    }

    pub fn set_potential(&mut self, map: usize, y: usize, x: usize, v: f64) {
        let i = self.loc(y, x) * self.output.maps + map;
        self.potentials[i] = v;
    }

    pub fn fired(&self, map: usize, y: usize, x: usize) -> bool {
        self.fired_map[self.loc(y, x)] == map as u16
    }

    pub fn inhibited(&self, map: usize, y: usize, x: usize) -> bool {
        let f = self.fired_map[self.loc(y, x)];
        f != NOT_FIRED && f != map as u16
    }

    pub fn threshold(&self, map: usize, y: usize, x: usize) -> f64 {
        match &self.thresholds {
            Some(t) => t[self.loc(y, x) * self.output.maps + map],
            None => self.spec.threshold,
        }
    }

    /// Spikes emitted since the last reset, with their firing potentials.
    pub fn fire_log(&self) -> &[FiredSpike] {
        &self.fire_log
    }

    /// Adds the weight of every incoming spike to each open neuron whose
    /// window covers it.
    pub fn integrate(&mut self, spikes: &[SpikeEvent]) -> Result<()> {
        let [kh, kw] = self.spec.window;
        let (out_h, out_w, maps) = (self.output.height, self.output.width, self.output.maps);
        self.epoch = self.epoch.wrapping_add(1);
        if self.epoch == 0 {
            self.touch_stamp.iter_mut().for_each(|s| *s = 0);
            self.epoch = 1;
        }
        for e in spikes {
            let (m, sy, sx) = (e.map(), e.y(), e.x());
            if !self.input.contains(m, sy, sx) {
                return Err(Error::Topology(format!(
                    "spike at map {m} ({sx}, {sy}) outside presynaptic extent {:?}",
                    self.input
                )));
            }
            let y_lo = sy.saturating_sub(kh - 1);
            let y_hi = sy.min(out_h - 1);
            let x_lo = sx.saturating_sub(kw - 1);
            let x_hi = sx.min(out_w - 1);
            for oy in y_lo..=y_hi {
                let dy = sy - oy;
                for ox in x_lo..=x_hi {
                    let loc = oy * out_w + ox;
                    if self.fired_map[loc] != NOT_FIRED {
                        continue;
                    }
                    if self.touch_stamp[loc] != self.epoch {
                        self.touch_stamp[loc] = self.epoch;
                        self.touched.push(loc as u32);
                    }
                    let w = self.weights.column(self.weights.synapse(m, dy, sx - ox));
                    let v = &mut self.potentials[loc * maps..][..maps];
                    for (v, w) in v.iter_mut().zip(w) {
                        *v += w;
                    }
                }
            }
        }
        Ok(())
    }

    /// Two-phase firing for the current step. Among neurons touched this step
    /// whose potential reached threshold, each location emits at most one
    /// spike: the highest potential, ties to the lowest map. The location is
    /// then closed: the winner is reset and marked fired, the other maps are
    /// reset and inhibited until the next image.
    pub fn fire(&mut self, step: usize) -> Vec<SpikeEvent> {
        let maps = self.output.maps;
        let mut touched = std::mem::take(&mut self.touched);
        touched.sort_unstable();
        let mut out = Vec::new();
        for &loc in &touched {
            let loc = loc as usize;
            if self.fired_map[loc] != NOT_FIRED {
                continue;
            }
            let v = &self.potentials[loc * maps..][..maps];
            let mut best: Option<(usize, f64)> = None;
            for (map, &pot) in v.iter().enumerate() {
                let thr = match &self.thresholds {
                    Some(t) => t[loc * maps + map],
                    None => self.spec.threshold,
                };
                if pot >= thr && best.is_none_or(|(_, b)| pot > b) {
                    best = Some((map, pot));
                }
            }
            if let Some((map, pot)) = best {
                let (y, x) = (loc / self.output.width, loc % self.output.width);
                let event = SpikeEvent::new(map, x, y, step);
                self.fired_map[loc] = map as u16;
                self.potentials[loc * maps..][..maps]
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
                self.fire_log.push(FiredSpike {
                    event,
                    potential: pot,
                });
                out.push(event);
            }
        }
        touched.clear();
        self.touched = touched;
        out.sort_unstable_by_key(SpikeEvent::raster_key);
        out
    }

    /// Discards the touched list without firing; used when thresholds are
    /// infinite.
    fn skip_fire(&mut self) {
        self.touched.clear();
    }

    /// Maximum current potential of each map over all locations.
    pub fn max_potentials(&self) -> Vec<f64> {
        let maps = self.output.maps;
        let mut best = vec![0.0f64; maps];
        for loc in self.potentials.chunks_exact(maps.max(1)) {
            for (b, &v) in best.iter_mut().zip(loc) {
                if v > *b {
                    *b = v;
                }
            }
        }
        best
    }
}

/// Runtime state of a local max-pooling layer.
#[derive(Debug, Clone)]
pub struct PoolLayerState {
    spec: PoolLayerSpec,
    input: Extent,
    output: Extent,
    fired: Vec<bool>,
}

impl PoolLayerState {
    pub fn new(spec: PoolLayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            input: Extent::new(0, 0, 0),
            output: Extent::new(0, 0, 0),
            fired: Vec::new(),
        })
    }

    pub fn spec(&self) -> &PoolLayerSpec {
        &self.spec
    }

    pub fn output_extent(&self) -> Extent {
        self.output
    }

    pub fn resize(&mut self, input: Extent) -> Result<()> {
        if input != self.input || self.fired.is_empty() {
            self.output = self.spec.output_extent(input)?;
            self.input = input;
            self.fired = vec![false; self.output.len()];
        }
        self.reset();
        Ok(())
    }

    pub fn reset(&mut self) {
        self.fired.iter_mut().for_each(|f| *f = false);
    }

    pub fn fired(&self, map: usize, y: usize, x: usize) -> bool {
        self.fired[self.output.index(map, y, x)]
    }

    /// Emits a spike for every pooling neuron that sees its first afferent
    /// spike during this step.
    pub fn step(&mut self, spikes: &[SpikeEvent], step: usize) -> Result<Vec<SpikeEvent>> {
        let [ph, pw] = self.spec.window;
        let s = self.spec.stride;
        let mut out = Vec::new();
        for e in spikes {
            let (m, sy, sx) = (e.map(), e.y(), e.x());
            if !self.input.contains(m, sy, sx) {
                return Err(Error::Topology(format!(
                    "spike at map {m} ({sx}, {sy}) outside pooling input {:?}",
                    self.input
                )));
            }
            // pooling rows covering sy: py * s <= sy < py * s + ph
            let py_lo = (sy + 1).saturating_sub(ph).div_ceil(s);
            let py_hi = (sy / s).min(self.output.height - 1);
            let px_lo = (sx + 1).saturating_sub(pw).div_ceil(s);
            let px_hi = (sx / s).min(self.output.width - 1);
            for py in py_lo..=py_hi {
                for px in px_lo..=px_hi {
                    let idx = self.output.index(m, py, px);
                    if !self.fired[idx] {
                        self.fired[idx] = true;
                        out.push(SpikeEvent::new(m, px, py, step));
                    }
                }
            }
        }
        out.sort_unstable_by_key(SpikeEvent::raster_key);
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(ConvLayerState),
    Pool(PoolLayerState),
}

impl Layer {
    pub fn output_extent(&self) -> Extent {
        match self {
            Layer::Conv(c) => c.output_extent(),
            Layer::Pool(p) => p.output_extent(),
        }
    }

    fn reset(&mut self) {
        match self {
            Layer::Conv(c) => c.reset(),
            Layer::Pool(p) => p.reset(),
        }
    }

    pub fn as_conv(&self) -> Option<&ConvLayerState> {
        match self {
            Layer::Conv(c) => Some(c),
            Layer::Pool(_) => None,
        }
    }

    pub fn as_conv_mut(&mut self) -> Option<&mut ConvLayerState> {
        match self {
            Layer::Conv(c) => Some(c),
            Layer::Pool(_) => None,
        }
    }
}

/// Per-map global-pooling output of the last conv layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// How far a forward pass goes and under which thresholds.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    /// Number of layers to run, counted from the input.
    pub layers: usize,
    /// Run the last processed layer (which must be conv) with an infinite
    /// threshold: it only integrates.
    pub integrate_only_last: bool,
    /// Image key for threshold noise; ignored when the network has none.
    pub image_id: u64,
}

/// Output waves of every processed layer, in order.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub outputs: Vec<SpikeWave>,
    pub input_spikes: usize,
}

impl ForwardTrace {
    /// Spikes across the input wave and every processed layer.
    pub fn total_spikes(&self) -> usize {
        self.input_spikes
            + self
                .outputs
                .iter()
                .map(SpikeWave::total_spikes)
                .sum::<usize>()
    }
}

/// Neuron ids of different layers never collide under threshold noise.
const LAYER_ID_SHIFT: u32 = 40;

/// Ordered stack of conv and pooling layers fed by a spike wave.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub noise: Option<ThresholdNoiseSpec>,
}

impl Network {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self {
            layers,
            noise: None,
        }
    }

    /// Layer indices of the conv layers, in order.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_conv().map(|_| i))
            .collect()
    }

    pub fn conv(&self, layer: usize) -> &ConvLayerState {
        self.layers[layer].as_conv().expect("not a conv layer")
    }

    pub fn conv_mut(&mut self, layer: usize) -> &mut ConvLayerState {
        self.layers[layer].as_conv_mut().expect("not a conv layer")
    }

    /// Zeroes every potential and clears fired/inhibited flags.
    pub fn reset_all(&mut self) {
        self.layers.iter_mut().for_each(Layer::reset);
    }

    /// Propagates one stimulus from rest through the first `opts.layers`
    /// layers.
    pub fn forward(&mut self, wave: &SpikeWave, opts: ForwardOptions) -> Result<ForwardTrace> {
        if opts.layers > self.layers.len() {
            return Err(Error::Config(format!(
                "network has {} layers, asked for {}",
                self.layers.len(),
                opts.layers
            )));
        }
        let steps = wave.steps();
        let mut outputs: Vec<SpikeWave> = Vec::with_capacity(opts.layers);
        for i in 0..opts.layers {
            let input = outputs.last().unwrap_or(wave);
            let integrate_only = opts.integrate_only_last && i + 1 == opts.layers;
            let noise = self.noise;
            let out = match &mut self.layers[i] {
                Layer::Conv(conv) => {
                    conv.resize(input.extent())?;
                    if let Some(noise) = noise.filter(|_| !integrate_only) {
                        conv.apply_threshold_noise(
                            &noise,
                            opts.image_id,
                            (i as u64) << LAYER_ID_SHIFT,
                        );
                    }
                    let mut out = SpikeWave::new(conv.output_extent(), steps);
                    for t in 0..steps {
                        conv.integrate(input.bucket(t))?;
                        if integrate_only {
                            conv.skip_fire();
                        } else {
                            out.set_bucket(t, conv.fire(t));
                        }
                    }
                    out
                }
                Layer::Pool(pool) => {
                    if integrate_only {
                        return Err(Error::Config(
                            "integrate-only pass must end on a conv layer".into(),
                        ));
                    }
                    pool.resize(input.extent())?;
                    let mut out = SpikeWave::new(pool.output_extent(), steps);
                    for t in 0..steps {
                        out.set_bucket(t, pool.step(input.bucket(t), t)?);
                    }
                    out
                }
            };
            outputs.push(out);
        }
        Ok(ForwardTrace {
            outputs,
            input_spikes: wave.total_spikes(),
        })
    }

    /// Global max pooling: runs the whole network with the last conv layer's
    /// threshold at infinity and returns each of its maps' maximum final
    /// potential.
    pub fn global_pool(
        &mut self,
        wave: &SpikeWave,
        image_id: u64,
    ) -> Result<(FeatureVector, ForwardTrace)> {
        let last = *self
            .conv_layers()
            .last()
            .ok_or_else(|| Error::Config("network has no conv layer".into()))?;
        let trace = self.forward(
            wave,
            ForwardOptions {
                layers: last + 1,
                integrate_only_last: true,
                image_id,
            },
        )?;
        let values = self.conv(last).max_potentials();
        Ok((FeatureVector { values }, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(maps: usize, in_maps: usize, k: usize, thr: f64, w: f64) -> ConvLayerState {
        let spec = ConvLayerSpec {
            maps,
            window: [k, k],
            threshold: thr,
        };
        ConvLayerState::new(spec, WeightTensor::filled(maps, in_maps, k, k, w)).unwrap()
    }

    #[test]
    fn additive_integration() {
        let mut l = layer(1, 1, 2, 100.0, 0.0);
        l.weights_mut().set(0, 0, 0, 0, 0.8);
        l.weights_mut().set(0, 0, 1, 1, 0.7);
        l.resize(Extent::new(1, 3, 3)).unwrap();
        // neuron (0,0) sees input (0,0) at dy=dx=0 and (1,1) at dy=dx=1
        l.integrate(&[SpikeEvent::new(0, 0, 0, 0), SpikeEvent::new(0, 1, 1, 0)])
            .unwrap();
        assert!((l.potential(0, 0, 0) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn locality() {
        let mut l = layer(1, 1, 2, 100.0, 1.0);
        l.resize(Extent::new(1, 4, 4)).unwrap();
        l.integrate(&[SpikeEvent::new(0, 3, 3, 0)]).unwrap();
        assert_eq!(l.potential(0, 0, 0), 0.0);
        assert_eq!(l.potential(0, 2, 2), 1.0);
    }

    #[test]
    fn out_of_range_spike_is_topology_error() {
        let mut l = layer(1, 1, 2, 1.0, 1.0);
        l.resize(Extent::new(1, 4, 4)).unwrap();
        assert!(matches!(
            l.integrate(&[SpikeEvent::new(0, 4, 0, 0)]),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            l.integrate(&[SpikeEvent::new(1, 0, 0, 0)]),
            Err(Error::Topology(_))
        ));
    }

    #[test]
    fn fire_resets_potential() {
        let mut l = layer(1, 1, 1, 10.0, 1.0);
        l.resize(Extent::new(1, 1, 1)).unwrap();
        l.set_potential(0, 0, 0, 10.0);
        l.integrate(&[SpikeEvent::new(0, 0, 0, 0)]).unwrap();
        l.set_potential(0, 0, 0, 10.2);
        let out = l.fire(0);
        assert_eq!(out, vec![SpikeEvent::new(0, 0, 0, 0)]);
        assert_eq!(l.potential(0, 0, 0), 0.0);
        assert!(l.fired(0, 0, 0));
    }

    #[test]
    fn lateral_inhibition_picks_highest() {
        let mut l = layer(2, 1, 1, 10.0, 0.0);
        l.weights_mut().set(0, 0, 0, 0, 12.0 / 16.0);
        l.weights_mut().set(1, 0, 0, 0, 15.0 / 16.0);
        l.resize(Extent::new(1, 1, 1)).unwrap();
        for _ in 0..16 {
            l.integrate(&[SpikeEvent::new(0, 0, 0, 0)]).unwrap();
        }
        assert_eq!((l.potential(0, 0, 0), l.potential(1, 0, 0)), (12.0, 15.0));
        let out = l.fire(0);
        assert_eq!(out, vec![SpikeEvent::new(1, 0, 0, 0)]);
        assert!(l.inhibited(0, 0, 0));
        assert_eq!(l.fire_log()[0].potential, 15.0);
        // inhibited neuron never integrates nor fires again
        l.integrate(&[SpikeEvent::new(0, 0, 0, 1)]).unwrap();
        assert!(l.fire(1).is_empty());
        assert_eq!(l.potential(0, 0, 0), 0.0);
    }

    #[test]
    fn equal_potentials_go_to_lowest_map() {
        let mut l = layer(3, 1, 1, 1.0, 1.0);
        l.resize(Extent::new(1, 1, 1)).unwrap();
        l.integrate(&[SpikeEvent::new(0, 0, 0, 0)]).unwrap();
        assert_eq!(l.fire(0)[0].map, 0);
    }

    #[test]
    fn fired_neuron_fires_once() {
        let mut l = layer(1, 1, 1, 1.0, 1.0);
        l.resize(Extent::new(1, 1, 2)).unwrap();
        l.integrate(&[SpikeEvent::new(0, 0, 0, 0)]).unwrap();
        assert_eq!(l.fire(0).len(), 1);
        l.integrate(&[SpikeEvent::new(0, 0, 0, 1)]).unwrap();
        assert!(l.fire(1).is_empty());
    }

    fn pool(window: usize, stride: usize, input: Extent) -> PoolLayerState {
        let mut p = PoolLayerState::new(PoolLayerSpec {
            window: [window, window],
            stride,
        })
        .unwrap();
        p.resize(input).unwrap();
        p
    }

    #[test]
    fn pool_propagates_first_spike_only() {
        let mut p = pool(2, 2, Extent::new(1, 2, 2));
        let mut emitted = Vec::new();
        // afferents fire at steps 4, 2, 9
        let arrivals = [(4, 0, 0), (2, 1, 0), (9, 1, 1)];
        for t in 0..10 {
            let bucket: Vec<_> = arrivals
                .iter()
                .filter(|a| a.0 == t)
                .map(|&(s, x, y)| SpikeEvent::new(0, x, y, s))
                .collect();
            emitted.extend(p.step(&bucket, t).unwrap());
        }
        assert_eq!(emitted, vec![SpikeEvent::new(0, 0, 0, 2)]);
    }

    #[test]
    fn pool_same_step_afferents_single_output() {
        let mut p = pool(2, 2, Extent::new(1, 4, 4));
        let out = p
            .step(
                &[SpikeEvent::new(0, 0, 0, 3), SpikeEvent::new(0, 1, 1, 3)],
                3,
            )
            .unwrap();
        assert_eq!(out, vec![SpikeEvent::new(0, 0, 0, 3)]);
        assert!(p.step(&[], 4).unwrap().is_empty());
    }

    #[test]
    fn pool_overlapping_windows() {
        // window 3, stride 2 on width 5: pool columns cover [0,3) and [2,5)
        let mut p = pool(3, 2, Extent::new(1, 3, 5));
        assert_eq!(p.output_extent(), Extent::new(1, 1, 2));
        let out = p.step(&[SpikeEvent::new(0, 2, 1, 0)], 0).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn pool_shape_errors() {
        let spec = PoolLayerSpec {
            window: [2, 2],
            stride: 9,
        };
        assert!(spec.output_extent(Extent::new(1, 8, 8)).is_err());
        let spec = PoolLayerSpec {
            window: [9, 9],
            stride: 1,
        };
        assert!(spec.output_extent(Extent::new(1, 8, 8)).is_err());
    }

    #[test]
    fn jitter_zero_alpha_is_exact() {
        let n = ThresholdNoiseSpec {
            alpha: 0.0,
            seed: 3,
        };
        assert_eq!(jitter_threshold(&n, 10.0, 5, 7), 10.0);
    }

    #[test]
    fn jitter_range_and_determinism() {
        let n = ThresholdNoiseSpec {
            alpha: 0.2,
            seed: 11,
        };
        for id in 0..2000 {
            let v = jitter_threshold(&n, 10.0, id, 42);
            assert!((8.0..=12.0).contains(&v), "{v}");
            assert_eq!(v, jitter_threshold(&n, 10.0, id, 42));
        }
        assert_ne!(
            jitter_threshold(&n, 10.0, 1, 42),
            jitter_threshold(&n, 10.0, 1, 43)
        );
    }

    #[test]
    fn jitter_block_matches_single_draws() {
        let n = ThresholdNoiseSpec {
            alpha: 0.3,
            seed: 5,
        };
        let mut block = vec![0.0; 37];
        jitter_block(&n, 15.0, 1000, 9, &mut block);
        for (i, v) in block.iter().enumerate() {
            assert_eq!(*v, jitter_threshold(&n, 15.0, 1000 + i as u64, 9));
        }
    }

    #[test]
    fn weight_tensor_canonical_roundtrip() {
        let vals: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| i as f64 / 24.0).collect();
        let t = WeightTensor::from_canonical(2, 3, 2, 2, &vals).unwrap();
        assert_eq!(t.to_canonical(), vals);
        assert_eq!(t.get(1, 2, 1, 0), vals[12 + 2 * 4 + 2]);
        assert!(WeightTensor::from_canonical(2, 3, 2, 2, &vals[1..]).is_err());
    }

    #[test]
    fn global_pool_max_and_blank() {
        let mut net = Network::new(vec![Layer::Conv(layer(3, 1, 1, 5.0, 0.0))]);
        let c = net.conv_mut(0);
        c.weights_mut().set(0, 0, 0, 0, 0.5);
        c.weights_mut().set(1, 0, 0, 0, 1.0);
        c.weights_mut().set(2, 0, 0, 0, 0.25);
        let mut wave = SpikeWave::new(Extent::new(1, 1, 2), 2);
        let blank = wave.clone();
        wave.push(SpikeEvent::new(0, 0, 0, 0)).unwrap();
        wave.push(SpikeEvent::new(0, 1, 0, 1)).unwrap();
        let (f, trace) = net.global_pool(&wave, 0).unwrap();
        assert_eq!(f.values, vec![0.5, 1.0, 0.25]);
        // infinite threshold: nothing fires in the pooled layer
        assert_eq!(trace.outputs[0].total_spikes(), 0);
        let (f, _) = net.global_pool(&blank, 0).unwrap();
        assert_eq!(f.values, vec![0.0; 3]);
    }

    #[test]
    fn reset_is_idempotent_and_replay_deterministic() {
        let mut net = Network::new(vec![Layer::Conv(layer(2, 1, 2, 1.5, 0.9))]);
        let mut wave = SpikeWave::new(Extent::new(1, 3, 3), 3);
        for (i, (x, y)) in [(0, 0), (1, 1), (2, 2), (1, 0)].into_iter().enumerate() {
            wave.push(SpikeEvent::new(0, x, y, i % 3)).unwrap();
        }
        let opts = ForwardOptions {
            layers: 1,
            integrate_only_last: false,
            image_id: 0,
        };
        let a = net.forward(&wave, opts).unwrap();
        net.reset_all();
        let c = net.conv(0);
        let ext = c.output_extent();
        for y in 0..ext.height {
            for x in 0..ext.width {
                assert_eq!(c.potential(0, y, x), 0.0);
                assert!(!c.fired(0, y, x) && !c.inhibited(1, y, x));
            }
        }
        net.reset_all();
        let b = net.forward(&wave, opts).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }
}
