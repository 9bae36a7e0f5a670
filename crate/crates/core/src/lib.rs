//! Spiking deep convolutional network with STDP-learned features.
//!
//! Images are turned into rank-ordered spike waves by a difference-of-Gaussians
//! front end, propagated through integrate-and-fire convolution and pooling
//! layers, and the last layer's maximum potentials are classified by a linear
//! SVM.

pub mod classifier;
pub mod datasets;
pub mod encoding;
pub mod error;
pub mod pipeline;
pub mod plasticity;
pub mod snn;
pub mod spike;

pub use classifier::{ClassifierParams, LinearModel, Prediction};
pub use datasets::{Dataset, Split, SplitSpec};
pub use encoding::{ContrastField, DoGSpec, GrayImage, Polarity, RawImage};
pub use error::{Error, Result};
pub use pipeline::{MetricsReport, NetworkConfig, TrainedModel};
pub use plasticity::{ConvergenceTracker, StdpParams, TrainingRecord, WeightInitSpec};
pub use snn::{
    ConvLayerSpec, FeatureVector, Layer, Network, PoolLayerSpec, ThresholdNoiseSpec, WeightTensor,
};
pub use spike::{Extent, SpikeEvent, SpikeWave};
