//! Unsupervised STDP feature learning.
//!
//! The rule only looks at the sign of the pre/post spike-time difference and
//! scales the update by `w (1 - w)`, which keeps weights inside `[0, 1]` and
//! drives them towards 0 or 1. Per image, each map learns at most once: from
//! its earliest spike, subject to a local inter-map competition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::{ConvLayerState, FiredSpike, ForwardOptions, Network, WeightTensor};
use crate::spike::{Extent, SpikeWave};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdpParams {
    pub a_plus: f64,
    pub a_minus: f64,
    /// Chebyshev radius, in layer-local coordinates, inside which an accepted
    /// winner blocks winners of other maps.
    pub inhibition_radius: usize,
    #[serde(default = "default_convergence_stop")]
    pub convergence_stop: f64,
    /// Presentation cap; `None` means ten passes over the training set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<u64>,
}

fn default_convergence_stop() -> f64 {
    0.01
}

impl StdpParams {
    pub fn new(a_plus: f64, a_minus: f64, inhibition_radius: usize) -> Self {
        Self {
            a_plus,
            a_minus,
            inhibition_radius,
            convergence_stop: default_convergence_stop(),
            max_iterations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("a_plus", self.a_plus), ("a_minus", self.a_minus)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.a_minus > self.a_plus {
            log::warn!(
                "a_minus ({}) above a_plus ({}): weights tend to decay until neurons stop firing",
                self.a_minus,
                self.a_plus
            );
        }
        if !(self.convergence_stop > 0.0 && self.convergence_stop <= 0.25) {
            return Err(Error::Config(format!(
                "convergence_stop must lie in (0, 0.25], got {}",
                self.convergence_stop
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightInitSpec {
    pub mean: f64,
    pub std: f64,
    /// Derived from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for WeightInitSpec {
    fn default() -> Self {
        Self {
            mean: 0.8,
            std: 0.05,
            seed: 0,
        }
    }
}

/// Draws i.i.d. `N(mean, std)` weights clamped to `[0, 1]`, in canonical
/// `[map][in_map][dy][dx]` order.
pub fn init_weights(
    spec: &WeightInitSpec,
    maps: usize,
    in_maps: usize,
    kh: usize,
    kw: usize,
) -> Result<WeightTensor> {
    let normal =
        Normal::new(spec.mean, spec.std).map_err(|e| Error::Config(format!("weight init: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let values: Vec<f64> = (0..maps * in_maps * kh * kw)
        .map(|_| normal.sample(&mut rng).clamp(0.0, 1.0))
        .collect();
    WeightTensor::from_canonical(maps, in_maps, kh, kw, &values)
}

/// Signed weight change: `+a_plus w (1 - w)` when the presynaptic spike came
/// no later than the postsynaptic one, `-a_minus w (1 - w)` otherwise
/// (including presynaptic neurons that never fired).
#[inline]
pub fn stdp_delta(w: f64, causal: bool, params: &StdpParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Domain(format!("weight {w} outside [0, 1]")));
    }
    let soft = w * (1.0 - w);
    Ok(if causal {
        params.a_plus * soft
    } else {
        -params.a_minus * soft
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WinnerRecord {
    pub map: usize,
    pub x: usize,
    pub y: usize,
    pub step: usize,
    pub potential: f64,
}

/// Picks the neurons allowed to learn from one image.
///
/// Each map nominates its earliest spike (ties: higher potential, then
/// raster order). Nominees are visited by step, then decreasing potential,
/// then map index, and accepted unless an already accepted winner lies
/// within `radius` (Chebyshev distance).
pub fn select_winners(spikes: &[FiredSpike], maps: usize, radius: usize) -> Vec<WinnerRecord> {
    let mut first: Vec<Option<&FiredSpike>> = vec![None; maps];
    for s in spikes {
        let slot = &mut first[s.event.map()];
        let better = match slot {
            None => true,
            Some(cur) => {
                (s.event.step, cur.potential, (s.event.y, s.event.x))
                    < (cur.event.step, s.potential, (cur.event.y, cur.event.x))
            }
        };
        if better {
            *slot = Some(s);
        }
    }
    let mut candidates: Vec<&FiredSpike> = first.into_iter().flatten().collect();
    candidates.sort_by(|a, b| {
        a.event
            .step
            .cmp(&b.event.step)
            .then(b.potential.total_cmp(&a.potential))
            .then(a.event.map.cmp(&b.event.map))
    });
    let mut winners: Vec<WinnerRecord> = Vec::new();
    for c in candidates {
        let (x, y) = (c.event.x(), c.event.y());
        let blocked = winners
            .iter()
            .any(|w| w.x.abs_diff(x).max(w.y.abs_diff(y)) <= radius);
        if !blocked {
            winners.push(WinnerRecord {
                map: c.event.map(),
                x,
                y,
                step: c.event.step(),
                potential: c.potential,
            });
        }
    }
    winners
}

/// Applies STDP to every synapse in the winner's window and writes the result
/// into the map's shared weights. `presynaptic` holds first-spike steps of
/// the layer's input, indexed by `input`.
///
/// Returns the change of `sum w (1 - w)` over the updated synapses.
pub fn apply_stdp(
    layer: &mut ConvLayerState,
    winner: &WinnerRecord,
    presynaptic: &[Option<u16>],
    input: Extent,
    params: &StdpParams,
) -> Result<f64> {
    let [kh, kw] = layer.spec().window;
    let weights = layer.weights_mut();
    if winner.map >= weights.maps()
        || winner.y + kh > input.height
        || winner.x + kw > input.width
        || input.maps != weights.in_maps()
        || presynaptic.len() != input.len()
    {
        return Err(Error::Topology(format!(
            "winner {winner:?} does not fit presynaptic extent {input:?}"
        )));
    }
    let mut soft_delta = 0.0;
    for in_map in 0..weights.in_maps() {
        for dy in 0..kh {
            for dx in 0..kw {
                let pre = presynaptic[input.index(in_map, winner.y + dy, winner.x + dx)];
                let causal = pre.is_some_and(|s| s as usize <= winner.step);
                let syn = weights.synapse(in_map, dy, dx);
                let w = weights.at_mut(winner.map, syn);
                let old = *w;
                let new = (old + stdp_delta(old, causal, params)?).clamp(0.0, 1.0);
                *w = new;
                soft_delta += new * (1.0 - new) - old * (1.0 - old);
            }
        }
    }
    Ok(soft_delta)
}

/// `sum w (1 - w)` over all synapses of a layer.
pub fn soft_bound_sum(weights: &WeightTensor) -> f64 {
    weights.values().iter().map(|w| w * (1.0 - w)).sum()
}

/// Mean of `w (1 - w)` over every synapse: 0.25 when all weights are 0.5,
/// 0 when they are all binary.
pub fn convergence_index(weights: &WeightTensor) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    soft_bound_sum(weights) / weights.len() as f64
}

/// Convergence history of one conv layer's training.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConvergenceTracker {
    /// Position of the layer in the network's layer list.
    pub layer: usize,
    /// `(presentations so far, C_l)`, starting with the untrained value.
    pub history: Vec<(u64, f64)>,
    pub converged: bool,
    pub iterations: u64,
    /// Logical clock (global presentation count) at start and end.
    pub start_tick: u64,
    pub end_tick: u64,
}

impl ConvergenceTracker {
    pub fn initial(&self) -> Option<f64> {
        self.history.first().map(|h| h.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.history.last().map(|h| h.1)
    }

    pub fn peak(&self) -> Option<f64> {
        self.history.iter().map(|h| h.1).reduce(f64::max)
    }
}

/// Per-presentation training record for the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainingRecord {
    pub layer: usize,
    pub iteration: u64,
    pub convergence: f64,
    pub spikes: usize,
    pub winners: usize,
}

/// Full recomputation interval for the incrementally tracked `C_l`.
const RESYNC_EVERY: u64 = 1024;

/// Trains one conv layer with STDP until `C_l < convergence_stop` or the
/// presentation cap is hit. Layers below are run frozen; layers above are
/// not run.
///
/// `order` lists indices into `inputs` and is cycled. `tick` is the global
/// presentation counter; it keys threshold noise and is advanced.
pub fn train_layer(
    network: &mut Network,
    layer: usize,
    inputs: &[SpikeWave],
    order: &[usize],
    params: &StdpParams,
    tick: &mut u64,
    observer: &mut dyn FnMut(&TrainingRecord),
) -> Result<ConvergenceTracker> {
    params.validate()?;
    if inputs.is_empty() || order.is_empty() {
        return Err(Error::Config("training stream is empty".into()));
    }
    if let Some(&bad) = order.iter().find(|&&i| i >= inputs.len()) {
        return Err(Error::Config(format!(
            "training order refers to missing image {bad}"
        )));
    }
    if network
        .layers
        .get(layer)
        .and_then(|l| l.as_conv())
        .is_none()
    {
        return Err(Error::Config(format!("layer {layer} is not a conv layer")));
    }
    let max_iterations = params.max_iterations.unwrap_or(10 * inputs.len() as u64);
    let maps = network.conv(layer).spec().maps;
    let n_w = network.conv(layer).weights().len() as f64;
    let mut sum = soft_bound_sum(network.conv(layer).weights());
    let mut tracker = ConvergenceTracker {
        layer,
        history: vec![(0, sum / n_w)],
        start_tick: *tick,
        ..Default::default()
    };
    tracker.converged = sum / n_w < params.convergence_stop;

    while !tracker.converged && tracker.iterations < max_iterations {
        let wave = &inputs[order[(tracker.iterations % order.len() as u64) as usize]];
        let trace = network.forward(
            wave,
            ForwardOptions {
                layers: layer + 1,
                integrate_only_last: false,
                image_id: *tick,
            },
        )?;
        let presyn_wave = if layer == 0 {
            wave
        } else {
            &trace.outputs[layer - 1]
        };
        let presynaptic = presyn_wave.first_spike_steps();
        let input_extent = presyn_wave.extent();
        let conv = network.conv_mut(layer);
        let winners = select_winners(conv.fire_log(), maps, params.inhibition_radius);
        for w in &winners {
            sum += apply_stdp(conv, w, &presynaptic, input_extent, params)?;
        }
        tracker.iterations += 1;
        *tick += 1;
        if tracker.iterations % RESYNC_EVERY == 0 {
            sum = soft_bound_sum(conv.weights());
        }
        let c = (sum / n_w).max(0.0);
        tracker.history.push((tracker.iterations, c));
        observer(&TrainingRecord {
            layer,
            iteration: tracker.iterations,
            convergence: c,
            spikes: trace.total_spikes(),
            winners: winners.len(),
        });
        tracker.converged = c < params.convergence_stop;
    }
    tracker.end_tick = *tick;
    if !tracker.converged {
        log::warn!(
            "layer {layer} stopped at {} presentations with C_l = {:.4} (target {})",
            tracker.iterations,
            tracker.last().unwrap_or(f64::NAN),
            params.convergence_stop
        );
    }
    Ok(tracker)
}
