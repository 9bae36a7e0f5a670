//! End-to-end orchestration: layer-wise STDP training, feature extraction,
//! classification, experiments and model files.

mod config;
mod model_io;
mod reconstruct;

use std::time::Instant;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{
    select_penalty, single_neuron_accuracy, svm_predict, svm_train, LinearModel, SingleNeuronReport,
};
use crate::datasets::{Dataset, Split};
use crate::encoding::encode_image;
use crate::error::{Error, Result};
use crate::plasticity::{train_layer, ConvergenceTracker, TrainingRecord};
use crate::snn::{FeatureVector, Network, WeightTensor};
use crate::spike::SpikeWave;

pub use config::{
    build, build_with_weights, ConvConfig, DatasetConfig, FolderSource, LayerConfig, MnistSource,
    NetworkConfig, NoiseConfig, DATA_ROOT_ENV,
};
pub use model_io::{
    load_model, model_from_bytes, model_to_bytes, save_model, MODEL_MAGIC, MODEL_VERSION,
};
pub use reconstruct::{receptive_field, reconstruct_feature};

use config::{derive_seed, SeedStream};

/// Training history of one conv layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProvenance {
    /// Position of the layer in the config's layer list.
    pub layer: usize,
    pub converged: bool,
    pub iterations: u64,
    /// Global presentation count when the layer started and stopped learning.
    pub start_tick: u64,
    pub end_tick: u64,
    /// `(presentations, C_l)` after every presentation, from the initial value.
    pub trajectory: Vec<(u64, f64)>,
}

impl From<ConvergenceTracker> for LayerProvenance {
    fn from(t: ConvergenceTracker) -> Self {
        Self {
            layer: t.layer,
            converged: t.converged,
            iterations: t.iterations,
            start_tick: t.start_tick,
            end_tick: t.end_tick,
            trajectory: t.history,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub dataset_digest: String,
    pub train_samples: u64,
    /// One entry per conv layer, in order.
    pub layers: Vec<LayerProvenance>,
}

/// A trained network plus its classifier. Weights and classifier parameters
/// are held at single precision so a saved model reloads bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: NetworkConfig,
    /// One tensor per conv layer, in order.
    pub weights: Vec<WeightTensor>,
    pub classifier: LinearModel,
    pub provenance: Provenance,
}

impl TrainedModel {
    pub fn network(&self) -> Result<Network> {
        build_with_weights(&self.config, self.weights.clone())
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }
}

/// Spike counts of one image: input wave first, then each processed layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageActivity {
    pub feature: FeatureVector,
    pub spikes_per_layer: Vec<usize>,
}

impl ImageActivity {
    pub fn total_spikes(&self) -> usize {
        self.spikes_per_layer.iter().sum()
    }
}

/// Threshold-noise image keys for feature extraction; training uses the
/// presentation counter, which stays far below these.
fn image_key(split: Split, index: usize) -> u64 {
    let tag: u64 = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    (tag << 62) | index as u64
}

/// Encodes every image of `data` into an input spike wave.
pub fn encode_dataset(config: &NetworkConfig, data: &Dataset) -> Result<Vec<SpikeWave>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| encode_image(&data.image(i)?, &config.dog, config.time_steps))
        .collect()
}

/// Global-pooling features and spike counts for every image.
pub fn extract_features(
    network: &Network,
    config: &NetworkConfig,
    data: &Dataset,
) -> Result<Vec<ImageActivity>> {
    (0..data.len())
        .into_par_iter()
        .map_init(
            || network.clone(),
            |net, i| {
                let wave = encode_image(&data.image(i)?, &config.dog, config.time_steps)?;
                let (feature, trace) = net.global_pool(&wave, image_key(data.split(), i))?;
                let mut spikes_per_layer = vec![trace.input_spikes];
                spikes_per_layer.extend(trace.outputs.iter().map(SpikeWave::total_spikes));
                Ok(ImageActivity {
                    feature,
                    spikes_per_layer,
                })
            },
        )
        .collect()
}

fn check_nonempty(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config(format!(
            "{:?} split has no images",
            data.split()
        )));
    }
    Ok(())
}

/// Trains every conv layer in order with STDP, then the classifier on the
/// training split's features.
pub fn train_all(config: &NetworkConfig, train: &Dataset) -> Result<TrainedModel> {
    train_all_observed(config, train, &mut |_| {})
}

/// [`train_all`] with a callback for every training presentation.
pub fn train_all_observed(
    config: &NetworkConfig,
    train: &Dataset,
    observer: &mut dyn FnMut(&TrainingRecord),
) -> Result<TrainedModel> {
    check_nonempty(train)?;
    let mut network = build(config)?;
    let inputs = encode_dataset(config, train)?;
    let mut tick = 0u64;
    let mut layers = Vec::new();
    let conv_positions = network.conv_layers();
    for (ordinal, (&position, conv)) in conv_positions.iter().zip(config.conv_configs()).enumerate()
    {
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            SeedStream::Order(ordinal),
        )));
        let tracker = train_layer(
            &mut network,
            position,
            &inputs,
            &order,
            &conv.stdp,
            &mut tick,
            observer,
        )?;
        log::info!(
            "conv layer {} trained: {} presentations, C_l {:.4}",
            ordinal + 1,
            tracker.iterations,
            tracker.last().unwrap_or(f64::NAN)
        );
        network.conv_mut(position).weights_mut().round_to_f32();
        layers.push(LayerProvenance::from(tracker));
    }
    drop(inputs);

    let weights: Vec<WeightTensor> = conv_positions
        .iter()
        .map(|&p| network.conv(p).weights().clone())
        .collect();
    let classifier = fit_classifier(config, &network, train)?;
    Ok(TrainedModel {
        config: config.clone(),
        weights,
        classifier,
        provenance: Provenance {
            seed: config.seed,
            dataset_digest: train.digest().to_string(),
            train_samples: train.len() as u64,
            layers,
        },
    })
}

fn fit_classifier(
    config: &NetworkConfig,
    network: &Network,
    train: &Dataset,
) -> Result<LinearModel> {
    let activity = extract_features(network, config, train)?;
    let features: Vec<&[f64]> = activity
        .iter()
        .map(|a| a.feature.values.as_slice())
        .collect();
    let labels = train.labels();
    let mut params = config.classifier_params();
    if params.sweep {
        params.penalty_c = select_penalty(&features, &labels, &params)?;
        log::info!("selected penalty C = {}", params.penalty_c);
    }
    let mut model = svm_train(&features, &labels, &params)?;
    model.round_to_f32();
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikeStats {
    pub mean: f64,
    pub median: f64,
    pub p90: f64,
    pub max: usize,
    /// Mean count for the input wave, then for each layer that fires.
    pub mean_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub feature_seconds: f64,
    pub classify_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub samples: usize,
    pub class_names: Vec<String>,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    pub spikes: SpikeStats,
    /// Each feature used alone, two-fold cross-fitted on the evaluated split.
    pub single_neuron: Option<SingleNeuronReport>,
    pub feature_dim: usize,
    pub timings: Timings,
}

fn percentile(sorted: &[usize], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let frac = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - frac) + sorted[hi] as f64 * frac
}

fn spike_stats(activity: &[ImageActivity]) -> SpikeStats {
    let n = activity.len().max(1) as f64;
    let mut totals: Vec<usize> = activity.iter().map(ImageActivity::total_spikes).collect();
    totals.sort_unstable();
    let layers = activity.first().map_or(0, |a| a.spikes_per_layer.len());
    let mut per_layer = vec![0usize; layers];
    for a in activity {
        for (acc, &s) in per_layer.iter_mut().zip(&a.spikes_per_layer) {
            *acc += s;
        }
    }
    SpikeStats {
        mean: totals.iter().sum::<usize>() as f64 / n,
        median: percentile(&totals, 0.5),
        p90: percentile(&totals, 0.9),
        max: totals.last().copied().unwrap_or(0),
        mean_per_layer: per_layer.iter().map(|&s| s as f64 / n).collect(),
    }
}

/// Two-fold single-feature accuracy on one split: fit on even samples and
/// test on odd ones, then the reverse, averaging the two.
fn single_neuron_two_fold(features: &[&[f64]], labels: &[usize]) -> Option<SingleNeuronReport> {
    if features.len() < 4 {
        return None;
    }
    let fold = |parity: usize| {
        let pick = |p: usize| -> (Vec<&[f64]>, Vec<usize>) {
            (0..features.len())
                .filter(|i| i % 2 == p)
                .map(|i| (features[i], labels[i]))
                .unzip()
        };
        let (trx, trl) = pick(parity);
        let (tex, tel) = pick(1 - parity);
        single_neuron_accuracy(&trx, &trl, &tex, &tel).ok()
    };
    let (a, b) = (fold(0)?, fold(1)?);
    let per_dimension: Vec<f64> = a
        .per_dimension
        .iter()
        .zip(&b.per_dimension)
        .map(|(x, y)| (x + y) / 2.0)
        .collect();
    let mean = per_dimension.iter().sum::<f64>() / per_dimension.len().max(1) as f64;
    let max = per_dimension.iter().cloned().fold(0.0, f64::max);
    Some(SingleNeuronReport {
        per_dimension,
        mean,
        max,
    })
}

/// Classifies every image of `data` and aggregates the metrics. The model is
/// not modified.
pub fn evaluate(model: &TrainedModel, data: &Dataset) -> Result<MetricsReport> {
    check_nonempty(data)?;
    let network = model.network()?;
    let t0 = Instant::now();
    let activity = extract_features(&network, &model.config, data)?;
    let feature_seconds = t0.elapsed().as_secs_f64();
    report_from_activity(&model.classifier, data, &activity, feature_seconds)
}

fn report_from_activity(
    classifier: &LinearModel,
    data: &Dataset,
    activity: &[ImageActivity],
    feature_seconds: f64,
) -> Result<MetricsReport> {
    let classes = data.classes();
    if classifier.classes() != classes {
        return Err(Error::Dimension(format!(
            "model predicts {} classes, dataset has {classes}",
            classifier.classes()
        )));
    }
    let t1 = Instant::now();
    let labels = data.labels();
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (a, &l) in activity.iter().zip(&labels) {
        let p = svm_predict(classifier, &a.feature.values)?;
        confusion[l][p.label] += 1;
    }
    let classify_seconds = t1.elapsed().as_secs_f64();
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let n: usize = row.iter().sum();
            if n == 0 {
                0.0
            } else {
                row[c] as f64 / n as f64
            }
        })
        .collect();
    let features: Vec<&[f64]> = activity
        .iter()
        .map(|a| a.feature.values.as_slice())
        .collect();
    Ok(MetricsReport {
        split: data.split(),
        samples: data.len(),
        class_names: data.class_names().to_vec(),
        accuracy: correct as f64 / data.len() as f64,
        confusion,
        per_class_accuracy,
        spikes: spike_stats(activity),
        single_neuron: single_neuron_two_fold(&features, &labels),
        feature_dim: classifier.dim(),
        timings: Timings {
            feature_seconds,
            classify_seconds,
        },
    })
}

/// Active synapses of a map: weights above one half.
pub fn active_synapses(weights: &WeightTensor, map: usize) -> usize {
    weights
        .map_weights(map)
        .iter()
        .filter(|&&w| w > 0.5)
        .count()
}

/// Replaces each map's weights with a random binary tensor. The first conv
/// layer keeps each map's active-synapse count; deeper layers get twice as
/// many (capped at the map size).
pub fn randomize_layer(weights: &mut WeightTensor, ordinal: usize, rng: &mut ChaCha8Rng) {
    let n = weights.synapses_per_map();
    for map in 0..weights.maps() {
        let active = active_synapses(weights, map);
        let k = if ordinal == 0 {
            active
        } else {
            (2 * active).min(n)
        };
        let mut values = vec![0.0; n];
        for i in sample(rng, n, k) {
            values[i] = 1.0;
        }
        weights.set_map_weights(map, &values);
    }
}

/// Randomizes the listed conv layers (0-based conv ordinals), retrains the
/// classifier on the new features and evaluates on `test`.
pub fn ablate_random_features(
    model: &TrainedModel,
    layers: &[usize],
    train: &Dataset,
    test: &Dataset,
) -> Result<(TrainedModel, MetricsReport)> {
    let convs = model.weights.len();
    if let Some(&bad) = layers.iter().find(|&&l| l >= convs) {
        return Err(Error::Config(format!(
            "conv layer {bad} does not exist (model has {convs})"
        )));
    }
    check_nonempty(train)?;
    let mut ablated = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(model.config.seed, SeedStream::Ablation));
    for ordinal in 0..convs {
        if layers.contains(&ordinal) {
            randomize_layer(&mut ablated.weights[ordinal], ordinal, &mut rng);
        }
    }
    let network = ablated.network()?;
    ablated.classifier = fit_classifier(&ablated.config, &network, train)?;
    let report = evaluate(&ablated, test)?;
    Ok((ablated, report))
}

/// Full train and test run per noise level, with threshold noise active in
/// both phases.
pub fn noise_sweep(
    config: &NetworkConfig,
    alphas: &[f64],
    train: &Dataset,
    test: &Dataset,
) -> Result<Vec<(f64, MetricsReport)>> {
    alphas
        .iter()
        .map(|&alpha| {
            let mut cfg = config.clone();
            cfg.noise = Some(NoiseConfig { alpha });
            cfg.validate()?;
            let model = train_all(&cfg, train)?;
            Ok((alpha, evaluate(&model, test)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v = [1, 2, 3, 4, 5];
        assert_eq!(percentile(&v, 0.5), 3.0);
        assert_eq!(percentile(&v, 0.9), 4.6);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn randomize_keeps_active_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = WeightTensor::filled(3, 2, 3, 3, 0.0);
        for (map, k) in [(0, 4), (1, 0), (2, 12)] {
            let mut v = vec![0.1; 18];
            v.iter_mut().take(k).for_each(|x| *x = 0.9);
            w.set_map_weights(map, &v);
        }
        let mut first = w.clone();
        randomize_layer(&mut first, 0, &mut rng);
        let mut deeper = w.clone();
        randomize_layer(&mut deeper, 1, &mut rng);
        for (map, k) in [(0, 4), (1, 0), (2, 12)] {
            assert_eq!(active_synapses(&first, map), k);
            assert_eq!(active_synapses(&deeper, map), (2 * k).min(18));
            assert!(first.map_weights(map).iter().all(|&x| x == 0.0 || x == 1.0));
        }
    }

    #[test]
    fn image_keys_disjoint() {
        assert_ne!(image_key(Split::Train, 5), image_key(Split::Test, 5));
        assert!(image_key(Split::Train, 0) > 1 << 40);
    }
}
