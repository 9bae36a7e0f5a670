use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierParams;
use crate::datasets::{load_folder, load_mnist, Dataset, Split, SplitSpec};
use crate::encoding::DoGSpec;
use crate::error::{Error, Result};
use crate::plasticity::{init_weights, StdpParams, WeightInitSpec};
use crate::snn::{
    ConvLayerSpec, ConvLayerState, Layer, Network, PoolLayerSpec, PoolLayerState,
    ThresholdNoiseSpec, WeightTensor,
};
use crate::spike::Extent;

/// Environment variable naming the directory that relative dataset roots
/// are resolved against.
pub const DATA_ROOT_ENV: &str = "SDNN_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub seed: u64,
    pub time_steps: usize,
    /// Nominal `[height, width]` of preprocessed images, used for shape
    /// inference.
    pub input_size: [usize; 2],
    pub dog: DoGSpec,
    pub layers: Vec<LayerConfig>,
    #[serde(default)]
    pub init: WeightInitSpec,
    #[serde(default)]
    pub classifier: ClassifierParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    pub dataset: DatasetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    Conv(ConvConfig),
    Pool(PoolLayerSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub maps: usize,
    pub window: [usize; 2],
    pub threshold: f64,
    pub stdp: StdpParams,
}

impl ConvConfig {
    pub fn spec(&self) -> ConvLayerSpec {
        ConvLayerSpec {
            maps: self.maps,
            window: self.window,
            threshold: self.threshold,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum DatasetConfig {
    Mnist(MnistSource),
    Folder(FolderSource),
}

/// IDX files under `root`, optionally narrowed to some digits and capped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MnistSource {
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_per_class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FolderSource {
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_height: Option<usize>,
    pub split: SplitSpec,
}

impl DatasetConfig {
    pub fn root(&self) -> &Path {
        match self {
            DatasetConfig::Mnist(m) => &m.root,
            DatasetConfig::Folder(f) => &f.root,
        }
    }

    /// Resolves the root: an explicit override wins, then relative roots are
    /// taken from [`DATA_ROOT_ENV`] when it is set.
    pub fn resolved_root(&self, override_root: Option<&Path>) -> PathBuf {
        if let Some(r) = override_root {
            return r.to_path_buf();
        }
        let root = self.root();
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(base) if root.is_relative() => PathBuf::from(base).join(root),
            _ => root.to_path_buf(),
        }
    }

    /// Loads the train and test splits.
    pub fn load(&self, override_root: Option<&Path>) -> Result<(Dataset, Dataset)> {
        let root = self.resolved_root(override_root);
        if !root.exists() {
            return Err(Error::Io {
                path: root.clone(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "dataset root does not exist",
                ),
            });
        }
        match self {
            DatasetConfig::Mnist(m) => {
                let classes = m.classes.as_deref();
                let train = load_mnist(&root, Split::Train)?.select(
                    classes,
                    m.train_per_class,
                    m.train_limit,
                )?;
                let test = load_mnist(&root, Split::Test)?.select(
                    classes,
                    m.test_per_class,
                    m.test_limit,
                )?;
                Ok((train, test))
            }
            DatasetConfig::Folder(f) => load_folder(&root, &f.split, f.target_height),
        }
    }
}

/// Stream tags for seeds derived from the run seed.
#[derive(Debug, Clone, Copy)]
pub(crate) enum SeedStream {
    Init(usize),
    Order(usize),
    Noise,
    Classifier,
    Ablation,
}

/// Independent 64-bit seed for one consumer of randomness (splitmix64 over
/// the run seed and the stream tag).
pub(crate) fn derive_seed(seed: u64, stream: SeedStream) -> u64 {
    let tag = match stream {
        SeedStream::Init(l) => 0x1000 + l as u64,
        SeedStream::Order(l) => 0x2000 + l as u64,
        SeedStream::Noise => 0x3000,
        SeedStream::Classifier => 0x4000,
        SeedStream::Ablation => 0x5000,
    };
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl NetworkConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn conv_configs(&self) -> impl Iterator<Item = &ConvConfig> {
        self.layers.iter().filter_map(|l| match l {
            LayerConfig::Conv(c) => Some(c),
            LayerConfig::Pool(_) => None,
        })
    }

    pub fn noise_spec(&self) -> Option<ThresholdNoiseSpec> {
        self.noise.map(|n| ThresholdNoiseSpec {
            alpha: n.alpha,
            seed: derive_seed(self.seed, SeedStream::Noise),
        })
    }

    pub fn classifier_params(&self) -> ClassifierParams {
        ClassifierParams {
            seed: derive_seed(self.seed, SeedStream::Classifier),
            ..self.classifier.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!(
                "seed must be at most {}, got {}",
                i64::MAX,
                self.seed
            )));
        }
        if self.time_steps == 0 {
            return Err(Error::Config("time_steps must be positive".into()));
        }
        self.dog.validate()?;
        self.classifier.validate()?;
        if let Some(n) = self.noise_spec() {
            n.validate()?;
        }
        if !(self.init.std >= 0.0 && (0.0..=1.0).contains(&self.init.mean)) {
            return Err(Error::Config(
                "init needs a mean in [0, 1] and a non-negative std".into(),
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerConfig::Conv(c) = layer {
                c.stdp
                    .validate()
                    .map_err(|e| Error::Config(format!("layer {} (conv): {e}", i + 1)))?;
            }
        }
        self.shape_chain().map(|_| ())
    }

    /// Extent after the DoG stage and after every layer.
    pub fn shape_chain(&self) -> Result<Vec<Extent>> {
        let [h, w] = self.input_size;
        let k = self.dog.kernel_size;
        if h < k || w < k {
            return Err(Error::Config(format!(
                "{k}x{k} DoG kernel does not fit the {h}x{w} input"
            )));
        }
        let mut chain = vec![Extent::new(self.dog.polarity.maps(), h - k + 1, w - k + 1)];
        for (i, layer) in self.layers.iter().enumerate() {
            let input = *chain.last().expect("chain starts non-empty");
            let out = match layer {
                LayerConfig::Conv(c) => {
                    let spec = c.spec();
                    spec.validate().and_then(|_| spec.output_extent(input))
                }
                LayerConfig::Pool(p) => p.validate().and_then(|_| p.output_extent(input)),
            };
            let kind = match layer {
                LayerConfig::Conv(_) => "conv",
                LayerConfig::Pool(_) => "pool",
            };
            chain.push(out.map_err(|e| Error::Config(format!("layer {} ({kind}): {e}", i + 1)))?);
        }
        match self.layers.last() {
            Some(LayerConfig::Conv(_)) => Ok(chain),
            Some(LayerConfig::Pool(_)) => Err(Error::Config(format!(
                "layer {} (pool): the last layer must be conv; global pooling follows it",
                self.layers.len()
            ))),
            None => Err(Error::Config("network has no layers".into())),
        }
    }

    /// Feature dimension: map count of the last conv layer.
    pub fn feature_dim(&self) -> usize {
        self.conv_configs().last().map_or(0, |c| c.maps)
    }
}

/// Builds the network described by `config` with freshly initialized
/// weights.
pub fn build(config: &NetworkConfig) -> Result<Network> {
    config.validate()?;
    let chain = config.shape_chain()?;
    let mut weights = Vec::new();
    let mut conv_index = 0;
    for (i, layer) in config.layers.iter().enumerate() {
        if let LayerConfig::Conv(c) = layer {
            let init = WeightInitSpec {
                seed: derive_seed(config.seed, SeedStream::Init(conv_index)),
                ..config.init.clone()
            };
            let [kh, kw] = c.window;
            weights.push(init_weights(&init, c.maps, chain[i].maps, kh, kw)?);
            conv_index += 1;
        }
    }
    build_with_weights(config, weights)
}

/// Builds the network with the given conv weights, in conv-layer order.
pub fn build_with_weights(config: &NetworkConfig, weights: Vec<WeightTensor>) -> Result<Network> {
    let chain = config.shape_chain()?;
    let mut weights = weights.into_iter();
    let mut layers = Vec::with_capacity(config.layers.len());
    for (i, layer) in config.layers.iter().enumerate() {
        let input = chain[i];
        let mut built = match layer {
            LayerConfig::Conv(c) => {
                let w = weights
                    .next()
                    .ok_or_else(|| Error::Config("fewer weight tensors than conv layers".into()))?;
                let [kh, kw] = c.window;
                if (w.maps(), w.in_maps(), w.window()) != (c.maps, input.maps, [kh, kw]) {
                    return Err(Error::Dimension(format!(
                        "layer {}: weight tensor {}x{}x{}x{} does not match {}x{}x{}x{}",
                        i + 1,
                        w.maps(),
                        w.in_maps(),
                        w.window()[0],
                        w.window()[1],
                        c.maps,
                        input.maps,
                        kh,
                        kw
                    )));
                }
                Layer::Conv(ConvLayerState::new(c.spec(), w)?)
            }
            LayerConfig::Pool(p) => Layer::Pool(PoolLayerState::new(p.clone())?),
        };
        match &mut built {
            Layer::Conv(c) => c.resize(input)?,
            Layer::Pool(p) => p.resize(input)?,
        }
        layers.push(built);
    }
    if weights.next().is_some() {
        return Err(Error::Config("more weight tensors than conv layers".into()));
    }
    let mut net = Network::new(layers);
    net.noise = config.noise_spec();
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MNIST: &str = r#"
seed = 7
time_steps = 30
input_size = [28, 28]

[dog]
kernel_size = 7
sigma_center = 1.0
sigma_surround = 2.0
polarity = "on_and_off"
firing_threshold = 0.2

[[layers]]
kind = "conv"
maps = 30
window = [5, 5]
threshold = 15.0
stdp = { a_plus = 0.004, a_minus = 0.003, inhibition_radius = 2 }

[[layers]]
kind = "pool"
window = [2, 2]
stride = 2

[[layers]]
kind = "conv"
maps = 100
window = [5, 5]
threshold = 10.0
stdp = { a_plus = 0.004, a_minus = 0.003, inhibition_radius = 1 }

[dataset]
format = "mnist"
root = "mnist"
train_limit = 10000
"#;

    #[test]
    fn mnist_shape_chain() {
        let cfg = NetworkConfig::from_toml(MNIST).unwrap();
        let sizes: Vec<_> = cfg
            .shape_chain()
            .unwrap()
            .iter()
            .map(|e| (e.maps, e.height, e.width))
            .collect();
        assert_eq!(
            sizes,
            vec![(2, 22, 22), (30, 18, 18), (30, 9, 9), (100, 5, 5)]
        );
        assert_eq!(cfg.feature_dim(), 100);
        let net = build(&cfg).unwrap();
        assert_eq!(net.conv_layers(), vec![0, 2]);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = NetworkConfig::from_toml(MNIST).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(NetworkConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let bad = MNIST.replace("threshold = 15.0", "threshold = 15.0\nthreshhold = 1.0");
        assert!(matches!(
            NetworkConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
        let bad = MNIST.replace("train_limit", "train_limt");
        assert!(matches!(
            NetworkConfig::from_toml(&bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bad_stride_names_layer() {
        let bad = MNIST.replace("stride = 2", "stride = 40");
        let err = NetworkConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("layer 2 (pool)"), "{err}");
        let bad = MNIST.replace(
            "window = [5, 5]\nthreshold = 10.0",
            "window = [12, 12]\nthreshold = 10.0",
        );
        let err = NetworkConfig::from_toml(&bad).unwrap_err().to_string();
        assert!(err.contains("layer 3 (conv)"), "{err}");
    }

    #[test]
    fn derived_seeds_differ() {
        let a = derive_seed(1, SeedStream::Init(0));
        assert_ne!(a, derive_seed(1, SeedStream::Init(1)));
        assert_ne!(a, derive_seed(2, SeedStream::Init(0)));
        assert_eq!(a, derive_seed(1, SeedStream::Init(0)));
    }
}
