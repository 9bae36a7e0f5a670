use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sdnn::pipeline::{
    ablate_random_features, active_synapses, evaluate, load_model, noise_sweep, receptive_field,
    reconstruct_feature, save_model, train_all_observed, MetricsReport, TrainedModel,
};
use sdnn::plasticity::convergence_index;
use sdnn::{Dataset, NetworkConfig};

use crate::manifest::{CliError, RunManifest};

pub const MODEL_FILE: &str = "model.sdnn";

#[derive(Debug, Parser)]
#[command(
    name = "sdnn",
    version,
    about = "Spiking deep network with STDP feature learning"
)]
pub struct Cli {
    /// Cap on worker threads for feature extraction.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all conv layers and the classifier.
    Train(TrainArgs),
    /// Evaluate a model on the test split of its dataset.
    Eval(EvalArgs),
    /// Render the preferred stimulus of conv-layer maps.
    Reconstruct(ReconstructArgs),
    /// Replace learned features with random ones and re-evaluate.
    Ablate(AblateArgs),
    /// Train and evaluate under increasing threshold noise.
    NoiseSweep(NoiseArgs),
    /// Summarize a model's shapes, convergence and weights.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset root, overriding the config and SDNN_DATA_ROOT.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset root, overriding the one recorded in the model.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report directory; defaults to `eval/` next to the model.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate the training split instead of the test split.
    #[arg(long)]
    pub train_split: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Conv layer, counted from 1.
    #[arg(long)]
    pub layer: usize,
    /// Map, counted from 0; all maps when omitted.
    #[arg(long)]
    pub map: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Conv layers (counted from 1) to randomize; repeat or comma-separate.
    /// None means the unmodified network.
    #[arg(long, value_delimiter = ',')]
    pub layer: Vec<usize>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Noise levels in [0, 1]; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.5])]
    pub alpha: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Also write `stats.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(command: &Command, manifest: &mut RunManifest) -> Result<(), CliError> {
    match command {
        Command::Train(a) => train(a, manifest),
        Command::Eval(a) => eval(a, manifest),
        Command::Reconstruct(a) => reconstruct(a, manifest),
        Command::Ablate(a) => ablate(a, manifest),
        Command::NoiseSweep(a) => sweep(a, manifest),
        Command::Stats(a) => stats(a, manifest),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

fn write_json<T: Serialize>(
    dir: &Path,
    name: &str,
    value: &T,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    fs::write(&path, text + "\n").map_err(|e| CliError::output(&path, e))?;
    manifest.outputs.push(name.to_string());
    Ok(())
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    manifest: &mut RunManifest,
) -> Result<NetworkConfig, CliError> {
    manifest.config = Some(path.to_path_buf());
    let mut config = NetworkConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
        config.validate()?;
    }
    manifest.seed = Some(config.seed);
    Ok(config)
}

fn open_model(path: &Path, manifest: &mut RunManifest) -> Result<TrainedModel, CliError> {
    manifest.model = Some(path.to_path_buf());
    let model = load_model(path)?;
    manifest.seed = Some(model.config.seed);
    Ok(model)
}

fn load_data(config: &NetworkConfig, data: Option<&Path>) -> Result<(Dataset, Dataset), CliError> {
    let (train, test) = config.dataset.load(data)?;
    log::info!(
        "dataset: {} training and {} test images, {} classes",
        train.len(),
        test.len(),
        train.classes()
    );
    Ok((train, test))
}

fn print_summary(title: &str, r: &MetricsReport) {
    println!(
        "{title}: accuracy {:.2}% on {} images ({} classes)",
        100.0 * r.accuracy,
        r.samples,
        r.class_names.len()
    );
    println!(
        "  spikes per image: mean {:.1}, median {:.0}, p90 {:.0}, max {}",
        r.spikes.mean, r.spikes.median, r.spikes.p90, r.spikes.max
    );
    if let Some(s) = &r.single_neuron {
        println!(
            "  single-feature accuracy: mean {:.2}%, best {:.2}%",
            100.0 * s.mean,
            100.0 * s.max
        );
    }
}

fn train(a: &TrainArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    manifest.output_dir = Some(a.out.clone());
    let config = load_config(&a.config, a.seed, manifest)?;
    create_dir(&a.out)?;
    let (train, _) = load_data(&config, a.data.as_deref())?;

    let metrics_path = a.out.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| CliError::output(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut write_error = None;
    let model = train_all_observed(&config, &train, &mut |record| {
        if write_error.is_none() {
            let line = serde_json::to_string(record).expect("records serialize");
            if let Err(e) = writeln!(metrics, "{line}") {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(CliError::output(&metrics_path, e));
    }
    metrics
        .flush()
        .map_err(|e| CliError::output(&metrics_path, e))?;
    manifest.outputs.push("metrics.jsonl".into());

    let csv_path = a.out.join("convergence.csv");
    let mut csv = String::from("conv_layer,iteration,convergence\n");
    for (ordinal, layer) in model.provenance.layers.iter().enumerate() {
        for (it, c) in &layer.trajectory {
            csv.push_str(&format!("{},{it},{c}\n", ordinal + 1));
        }
    }
    fs::write(&csv_path, csv).map_err(|e| CliError::output(&csv_path, e))?;
    manifest.outputs.push("convergence.csv".into());

    save_model(&model, &a.out.join(MODEL_FILE))?;
    manifest.outputs.push(MODEL_FILE.into());

    for (ordinal, layer) in model.provenance.layers.iter().enumerate() {
        println!(
            "conv layer {}: {} presentations, C_l {:.4} -> {:.4}{}",
            ordinal + 1,
            layer.iterations,
            layer.trajectory.first().map_or(f64::NAN, |p| p.1),
            layer.trajectory.last().map_or(f64::NAN, |p| p.1),
            if layer.converged {
                ""
            } else {
                " (not converged)"
            }
        );
    }
    println!("model written to {}", a.out.join(MODEL_FILE).display());
    Ok(())
}

fn eval(a: &EvalArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.model.parent().unwrap_or(Path::new(".")).join("eval"));
    manifest.output_dir = Some(out.clone());
    let model = open_model(&a.model, manifest)?;
    let (train, test) = load_data(&model.config, a.data.as_deref())?;
    let split = if a.train_split { &train } else { &test };
    let report = evaluate(&model, split)?;
    create_dir(&out)?;
    write_json(&out, "report.json", &report, manifest)?;
    print_summary("evaluation", &report);
    Ok(())
}

fn reconstruct(a: &ReconstructArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    manifest.output_dir = Some(a.out.clone());
    let model = open_model(&a.model, manifest)?;
    let convs = model.weights.len();
    if a.layer == 0 || a.layer > convs {
        return Err(CliError::Usage(format!(
            "--layer must lie in 1..={convs}, got {}",
            a.layer
        )));
    }
    let ordinal = a.layer - 1;
    let maps: Vec<usize> = match a.map {
        Some(m) => vec![m],
        None => (0..model.weights[ordinal].maps()).collect(),
    };
    create_dir(&a.out)?;
    for map in maps {
        let img = reconstruct_feature(&model, ordinal, map)?;
        let name = format!("layer{}_map{map:03}.png", a.layer);
        let path = a.out.join(&name);
        image::GrayImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| CliError::output(&path, std::io::Error::other(e)))?;
        manifest.outputs.push(name);
    }
    let [h, w] = receptive_field(&model.config, ordinal)?;
    println!(
        "wrote {} reconstructions ({w}x{h} pixels) to {}",
        manifest.outputs.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    randomized_layers: &'a [usize],
    report: &'a MetricsReport,
}

fn ablate(a: &AblateArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    manifest.output_dir = Some(a.out.clone());
    let model = open_model(&a.model, manifest)?;
    let convs = model.weights.len();
    if let Some(bad) = a.layer.iter().find(|&&l| l == 0 || l > convs) {
        return Err(CliError::Usage(format!(
            "--layer must lie in 1..={convs}, got {bad}"
        )));
    }
    let ordinals: Vec<usize> = a.layer.iter().map(|l| l - 1).collect();
    let (train, test) = load_data(&model.config, a.data.as_deref())?;
    let (_, report) = ablate_random_features(&model, &ordinals, &train, &test)?;
    create_dir(&a.out)?;
    write_json(
        &a.out,
        "ablation.json",
        &AblationOutput {
            randomized_layers: &a.layer,
            report: &report,
        },
        manifest,
    )?;
    print_summary(
        &format!("random features in conv layers {:?}", a.layer),
        &report,
    );
    Ok(())
}

#[derive(Serialize)]
struct NoisePoint<'a> {
    alpha: f64,
    report: &'a MetricsReport,
}

fn sweep(a: &NoiseArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    manifest.output_dir = Some(a.out.clone());
    if let Some(bad) = a.alpha.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(CliError::Usage(format!(
            "--alpha values must lie in [0, 1], got {bad}"
        )));
    }
    let config = load_config(&a.config, a.seed, manifest)?;
    create_dir(&a.out)?;
    let (train, test) = load_data(&config, a.data.as_deref())?;
    let results = noise_sweep(&config, &a.alpha, &train, &test)?;
    let points: Vec<NoisePoint> = results
        .iter()
        .map(|(alpha, report)| NoisePoint {
            alpha: *alpha,
            report,
        })
        .collect();
    write_json(&a.out, "noise.json", &points, manifest)?;
    for p in &points {
        println!(
            "alpha {:.2}: accuracy {:.2}%",
            p.alpha,
            100.0 * p.report.accuracy
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct LayerStats {
    conv_layer: usize,
    maps: usize,
    window: [usize; 2],
    in_maps: usize,
    receptive_field: [usize; 2],
    presentations: u64,
    converged: bool,
    convergence_start: f64,
    convergence_peak: f64,
    convergence_end: f64,
    /// Fraction of weights within 0.1 of 0 or 1.
    bimodal_fraction: f64,
    active_synapses_per_map: Vec<usize>,
}

#[derive(Serialize)]
struct ModelStats {
    seed: u64,
    dataset_digest: String,
    train_samples: u64,
    feature_dim: usize,
    classes: usize,
    /// `[maps, height, width]` after DoG and after each layer.
    shapes: Vec<[usize; 3]>,
    layers: Vec<LayerStats>,
}

fn stats(a: &StatsArgs, manifest: &mut RunManifest) -> Result<(), CliError> {
    manifest.output_dir = a.out.clone();
    let model = open_model(&a.model, manifest)?;
    let shapes = model
        .config
        .shape_chain()?
        .iter()
        .map(|e| [e.maps, e.height, e.width])
        .collect();
    let mut layers = Vec::new();
    for (ordinal, w) in model.weights.iter().enumerate() {
        let p = model.provenance.layers.get(ordinal);
        let traj = p.map(|p| p.trajectory.as_slice()).unwrap_or(&[]);
        let values = w.values();
        let bimodal = values.iter().filter(|&&v| v <= 0.1 || v >= 0.9).count() as f64
            / values.len().max(1) as f64;
        layers.push(LayerStats {
            conv_layer: ordinal + 1,
            maps: w.maps(),
            window: w.window(),
            in_maps: w.in_maps(),
            receptive_field: receptive_field(&model.config, ordinal)?,
            presentations: p.map_or(0, |p| p.iterations),
            converged: p.is_some_and(|p| p.converged),
            convergence_start: traj.first().map_or(f64::NAN, |t| t.1),
            convergence_peak: traj.iter().map(|t| t.1).fold(f64::NAN, f64::max),
            convergence_end: convergence_index(w),
            bimodal_fraction: bimodal,
            active_synapses_per_map: (0..w.maps()).map(|m| active_synapses(w, m)).collect(),
        });
    }
    let stats = ModelStats {
        seed: model.provenance.seed,
        dataset_digest: model.provenance.dataset_digest.clone(),
        train_samples: model.provenance.train_samples,
        feature_dim: model.feature_dim(),
        classes: model.classifier.classes(),
        shapes,
        layers,
    };
    println!(
        "model: seed {}, {} training images, {} features, {} classes",
        stats.seed, stats.train_samples, stats.feature_dim, stats.classes
    );
    for l in &stats.layers {
        println!(
            "conv layer {}: {} maps, {} presentations, C_l {:.4} (peak {:.4}) -> {:.4}, {:.1}% bimodal",
            l.conv_layer,
            l.maps,
            l.presentations,
            l.convergence_start,
            l.convergence_peak,
            l.convergence_end,
            100.0 * l.bimodal_fraction
        );
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(out, "stats.json", &stats, manifest)?;
    }
    Ok(())
}
