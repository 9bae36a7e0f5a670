//! Linear SVM on global-pooling features.
//!
//! One-vs-rest, L2-regularized hinge loss with regularization `1 / (C N)`,
//! trained by seeded stochastic subgradient descent on standardized inputs.
//! The returned model is the best epoch-end iterate, so the primal objective
//! never goes up from one epoch to the next.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snn::FeatureVector;

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierParams {
    pub penalty_c: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Scale of the `1 / (lambda t)` step at the `t`-th sample.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Derived from the run seed; not part of the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Pick `penalty_c` from a log-spaced grid on a held-out fifth of the
    /// training set.
    #[serde(default)]
    pub sweep: bool,
}

fn default_epochs() -> usize {
    50
}

fn default_learning_rate() -> f64 {
    1.0
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self {
            penalty_c: 2.4,
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            seed: 0,
            sweep: false,
        }
    }
}

impl ClassifierParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_c > 0.0 && self.penalty_c.is_finite()) {
            return Err(Error::Config(format!(
                "penalty C must be positive, got {}",
                self.penalty_c
            )));
        }
        if !(self.learning_rate > 0.0) || self.epochs == 0 {
            return Err(Error::Config(
                "classifier needs a positive learning rate and at least one epoch".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Per-dimension training mean and standard deviation (1 for constant
    /// dimensions).
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// One weight vector per class, in standardized feature space.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub scores: Vec<f64>,
}

impl LinearModel {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature has {} dimensions, model expects {}",
                x.len(),
                self.dim()
            )));
        }
        let z = self.standardize(x);
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &z) + b)
            .collect())
    }

    pub fn round_to_f32(&mut self) {
        let r = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        r(&mut self.mean);
        r(&mut self.scale);
        r(&mut self.bias);
        self.weights.iter_mut().for_each(r);
    }

    pub fn is_finite(&self) -> bool {
        self.mean
            .iter()
            .chain(&self.scale)
            .chain(&self.bias)
            .chain(self.weights.iter().flatten())
            .all(|v| v.is_finite())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Argmax of the per-class scores; ties go to the lowest class index.
pub fn svm_predict(model: &LinearModel, feature: &[f64]) -> Result<Prediction> {
    let scores = model.scores(feature)?;
    let mut label = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s > scores[label] {
            label = k;
        }
    }
    Ok(Prediction { label, scores })
}

/// Objective trajectory of one binary sub-problem.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryTrace {
    /// Primal objective after each epoch, starting from the zero model.
    pub objective: Vec<f64>,
    /// Mean hinge loss after each epoch.
    pub hinge: Vec<f64>,
}

pub fn svm_train<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[usize],
    params: &ClassifierParams,
) -> Result<LinearModel> {
    Ok(svm_train_traced(features, labels, params)?.0)
}

/// Like [`svm_train`], also returning each class's objective trajectory.
pub fn svm_train_traced<F: AsRef<[f64]>>(
    features: &[F],
    labels: &[usize],
    params: &ClassifierParams,
) -> Result<(LinearModel, Vec<BinaryTrace>)> {
    params.validate()?;
    if features.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} features but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    labels.iter().for_each(|&l| counts[l] += 1);
    if classes < 2 || counts.contains(&0) {
        return Err(Error::Config(format!(
            "classifier needs at least two classes with samples, got counts {counts:?}"
        )));
    }
    let dim = features[0].as_ref().len();
    if let Some(f) = features.iter().find(|f| f.as_ref().len() != dim) {
        return Err(Error::Dimension(format!(
            "mixed feature dimensions {} and {}",
            dim,
            f.as_ref().len()
        )));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in scale.iter_mut().zip(f.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut scale {
        *s = (*s / n).sqrt();
        if !(*s > 1e-12) {
            *s = 1.0;
        }
    }
    let mut model = LinearModel {
        mean,
        scale,
        weights: Vec::with_capacity(classes),
        bias: Vec::with_capacity(classes),
    };
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| model.standardize(f.as_ref()))
        .collect();

    let mut traces = Vec::with_capacity(classes);
    for class in 0..classes {
        let y: Vec<f64> = labels
            .iter()
            .map(|&l| if l == class { 1.0 } else { -1.0 })
            .collect();
        let seed = params.seed ^ (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (w, b, trace) = train_binary(&z, &y, params, seed);
        model.weights.push(w);
        model.bias.push(b);
        traces.push(trace);
    }
    Ok((model, traces))
}

/// Primal objective `lambda / 2 (|w|^2 + b^2) + mean hinge` and the mean
/// hinge on its own.
fn objective(z: &[Vec<f64>], y: &[f64], w: &[f64], b: f64, lambda: f64) -> (f64, f64) {
    let hinge = z
        .iter()
        .zip(y)
        .map(|(x, &yi)| (1.0 - yi * (dot(w, x) + b)).max(0.0))
        .sum::<f64>()
        / z.len() as f64;
    (0.5 * lambda * (dot(w, w) + b * b) + hinge, hinge)
}

/// Pegasos: step `learning_rate / (lambda t)` at the `t`-th sample, projection
/// onto the ball of radius `1 / sqrt(lambda)`, and an average of the iterates
/// from the second half of training. The bias is an extra constant input.
/// At the end of every epoch the better of the current and averaged iterates
/// replaces the returned model only if it lowers the objective.
fn train_binary(
    z: &[Vec<f64>],
    y: &[f64],
    params: &ClassifierParams,
    seed: u64,
) -> (Vec<f64>, f64, BinaryTrace) {
    let n = z.len();
    let dim = z[0].len();
    let lambda = 1.0 / (params.penalty_c * n as f64);
    let radius = 1.0 / lambda.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();

    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    let (mut best_w, mut best_b) = (w.clone(), b);
    let (mut best, hinge0) = objective(z, y, &w, b, lambda);
    let mut trace = BinaryTrace {
        objective: vec![best],
        hinge: vec![hinge0],
    };
    let total = (params.epochs * n) as u64;
    let average_from = total / 2;
    let (mut avg_w, mut avg_b, mut averaged) = (vec![0.0; dim], 0.0, 0u64);
    let mut t = 0u64;
    for _ in 0..params.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = params.learning_rate / (lambda * t as f64);
            let margin = y[i] * (dot(&w, &z[i]) + b);
            let shrink = (1.0 - eta * lambda).max(0.0);
            w.iter_mut().for_each(|v| *v *= shrink);
            b *= shrink;
            if margin < 1.0 {
                for (v, x) in w.iter_mut().zip(&z[i]) {
                    *v += eta * y[i] * x;
                }
                b += eta * y[i];
            }
            let norm = (dot(&w, &w) + b * b).sqrt();
            if norm > radius {
                let k = radius / norm;
                w.iter_mut().for_each(|v| *v *= k);
                b *= k;
            }
            if t > average_from {
                averaged += 1;
                let k = 1.0 / averaged as f64;
                for (a, v) in avg_w.iter_mut().zip(&w) {
                    *a += (v - *a) * k;
                }
                avg_b += (b - avg_b) * k;
            }
        }
        let mut epoch_best = (objective(z, y, &w, b, lambda), false);
        if averaged > 0 {
            let avg = objective(z, y, &avg_w, avg_b, lambda);
            if avg.0 <= epoch_best.0 .0 {
                epoch_best = (avg, true);
            }
        }
        let ((obj, hinge), use_avg) = epoch_best;
        if obj < best {
            best = obj;
            if use_avg {
                best_w.copy_from_slice(&avg_w);
                best_b = avg_b;
            } else {
                best_w.copy_from_slice(&w);
                best_b = b;
            }
            trace.hinge.push(hinge);
        } else {
            trace.hinge.push(*trace.hinge.last().unwrap());
        }
        trace.objective.push(best);
    }
    (best_w, best_b, trace)
}

/// Twenty log-spaced penalties in `(0, 10]`.
pub fn penalty_grid() -> Vec<f64> {
    (0..20)
        .map(|i| 10f64.powf(-2.0 + 3.0 * i as f64 / 19.0))
        .collect()
}

/// Chooses the penalty with the best accuracy on a seeded 20% hold-out.
/// Ties keep the smaller penalty.
pub fn select_penalty<F: AsRef<[f64]> + Clone>(
    features: &[F],
    labels: &[usize],
    params: &ClassifierParams,
) -> Result<f64> {
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed ^ 0x5EED));
    let cut = features.len() - features.len() / 5;
    let (fit, hold) = idx.split_at(cut);
    let pick = |ids: &[usize]| -> (Vec<F>, Vec<usize>) {
        (
            ids.iter().map(|&i| features[i].clone()).collect(),
            ids.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (fx, fy) = pick(fit);
    let (hx, hy) = pick(hold);
    let mut best = (params.penalty_c, -1.0);
    for c in penalty_grid() {
        let p = ClassifierParams {
            penalty_c: c,
            sweep: false,
            ..params.clone()
        };
        let model = svm_train(&fx, &fy, &p)?;
        let correct = hx
            .iter()
            .zip(&hy)
            .filter(|(x, &l)| matches!(svm_predict(&model, x.as_ref()), Ok(p) if p.label == l))
            .count();
        let acc = correct as f64 / hx.len().max(1) as f64;
        if acc > best.1 {
            best = (c, acc);
        }
    }
    Ok(best.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleNeuronReport {
    pub per_dimension: Vec<f64>,
    pub mean: f64,
    pub max: f64,
}

/// Accuracy of each feature dimension used on its own.
///
/// Two classes: the best single-threshold rule on the training split.
/// More classes: nearest class mean, ties to the more frequent class.
pub fn single_neuron_accuracy<F: AsRef<[f64]>>(
    train: &[F],
    train_labels: &[usize],
    test: &[F],
    test_labels: &[usize],
) -> Result<SingleNeuronReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config(
            "single-neuron analysis needs both splits".into(),
        ));
    }
    let dim = train[0].as_ref().len();
    let classes = train_labels
        .iter()
        .chain(test_labels)
        .max()
        .map_or(1, |m| m + 1);
    let mut counts = vec![0usize; classes];
    train_labels.iter().for_each(|&l| counts[l] += 1);
    let mut per_dimension = Vec::with_capacity(dim);
    for d in 0..dim {
        let xs: Vec<f64> = train.iter().map(|f| f.as_ref()[d]).collect();
        let rule = if classes == 2 {
            fit_stump(&xs, train_labels, &counts)
        } else {
            fit_nearest_mean(&xs, train_labels, &counts)
        };
        let correct = test
            .iter()
            .zip(test_labels)
            .filter(|(f, &l)| rule.predict(f.as_ref()[d]) == l)
            .count();
        per_dimension.push(correct as f64 / test.len() as f64);
    }
    let mean = per_dimension.iter().sum::<f64>() / dim.max(1) as f64;
    let max = per_dimension.iter().cloned().fold(0.0, f64::max);
    Ok(SingleNeuronReport {
        per_dimension,
        mean,
        max,
    })
}

enum OneDimRule {
    /// `above` if `x > threshold`, else `below`.
    Stump {
        threshold: f64,
        above: usize,
        below: usize,
    },
    /// Class means ordered by preference (frequency, then index).
    NearestMean(Vec<(usize, f64)>),
}

impl OneDimRule {
    fn predict(&self, x: f64) -> usize {
        match self {
            OneDimRule::Stump {
                threshold,
                above,
                below,
            } => {
                if x > *threshold {
                    *above
                } else {
                    *below
                }
            }
            OneDimRule::NearestMean(means) => {
                let mut best = means[0];
                for &(c, m) in &means[1..] {
                    if (x - m).abs() < (x - best.1).abs() {
                        best = (c, m);
                    }
                }
                best.0
            }
        }
    }
}

fn fit_stump(xs: &[f64], labels: &[usize], counts: &[usize]) -> OneDimRule {
    let majority = if counts[1] > counts[0] { 1 } else { 0 };
    let mut pairs: Vec<(f64, usize)> = xs.iter().cloned().zip(labels.iter().cloned()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // start with everything predicted as the majority class
    let mut best = (counts[majority], f64::NEG_INFINITY, majority, majority);
    // below[c] = samples of class c with x <= threshold
    let mut below = [0usize; 2];
    for i in 0..pairs.len() {
        below[pairs[i].1] += 1;
        if i + 1 < pairs.len() && pairs[i + 1].0 == pairs[i].0 {
            continue;
        }
        let threshold = pairs[i].0;
        for (lo, hi) in [(0usize, 1usize), (1, 0)] {
            let correct = below[lo] + (counts[hi] - below[hi]);
            if correct > best.0 {
                best = (correct, threshold, hi, lo);
            }
        }
    }
    OneDimRule::Stump {
        threshold: best.1,
        above: best.2,
        below: best.3,
    }
}

fn fit_nearest_mean(xs: &[f64], labels: &[usize], counts: &[usize]) -> OneDimRule {
    let mut sums = vec![0.0; counts.len()];
    for (&x, &l) in xs.iter().zip(labels) {
        sums[l] += x;
    }
    let mut means: Vec<(usize, f64)> = (0..counts.len())
        .filter(|&c| counts[c] > 0)
        .map(|c| (c, sums[c] / counts[c] as f64))
        .collect();
    means.sort_by(|a, b| counts[b.0].cmp(&counts[a.0]).then(a.0.cmp(&b.0)));
    OneDimRule::NearestMean(means)
}
