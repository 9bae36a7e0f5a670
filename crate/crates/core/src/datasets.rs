//! Dataset ingestion: MNIST IDX files and directory-per-class image folders.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoding::{decode_image, preprocess, GrayImage, RawImage};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: RawImage,
    pub label: usize,
    /// File the sample came from, relative to the dataset root.
    pub origin: Option<PathBuf>,
}

/// Labelled grayscale images, decoded in memory. Labels are dense `0..K`.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    split: Split,
    target_height: Option<usize>,
    digest: String,
}

impl Dataset {
    pub fn new(
        samples: Vec<Sample>,
        class_names: Vec<String>,
        split: Split,
        target_height: Option<usize>,
    ) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.label >= class_names.len()) {
            return Err(Error::Config(format!(
                "label {} outside {} classes",
                s.label,
                class_names.len()
            )));
        }
        let digest = digest_samples(&samples);
        Ok(Self {
            samples,
            class_names,
            split,
            target_height,
            digest,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// SHA-256 over every sample's label, geometry and pixels, hex encoded.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        self.samples.iter().for_each(|s| counts[s.label] += 1);
        counts
    }

    /// Preprocessed image of sample `i`.
    pub fn image(&self, i: usize) -> Result<GrayImage> {
        preprocess(&self.samples[i].image, self.target_height)
    }

    /// Keeps only the listed original classes (relabelled densely in the
    /// given order), at most `per_class` samples of each, and at most
    /// `limit` samples overall. Sample order is preserved.
    pub fn select(
        &self,
        classes: Option<&[usize]>,
        per_class: Option<usize>,
        limit: Option<usize>,
    ) -> Result<Dataset> {
        let keep: Vec<usize> = match classes {
            Some(c) => c.to_vec(),
            None => (0..self.classes()).collect(),
        };
        if let Some(&bad) = keep.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::Config(format!("dataset has no class {bad}")));
        }
        let mut remap = vec![None; self.classes()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = Some(new);
        }
        let mut taken = vec![0usize; keep.len()];
        let mut samples = Vec::new();
        for s in &self.samples {
            if limit.is_some_and(|l| samples.len() >= l) {
                break;
            }
            let Some(new) = remap[s.label] else { continue };
            if per_class.is_some_and(|p| taken[new] >= p) {
                continue;
            }
            taken[new] += 1;
            samples.push(Sample {
                label: new,
                ..s.clone()
            });
        }
        let names = keep.iter().map(|&c| self.class_names[c].clone()).collect();
        Dataset::new(samples, names, self.split, self.target_height)
    }
}

fn digest_samples(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.label as u64).to_le_bytes());
        h.update((s.image.width as u64).to_le_bytes());
        h.update((s.image.height as u64).to_le_bytes());
        h.update(&s.image.pixels);
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Parses an IDX image file (magic `0x00000803`) and label file (magic
/// `0x00000801`), all header fields 32-bit big-endian.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let lbl_bytes = read_file(labels_path)?;

    let mut cur = Cursor::new(&img_bytes);
    let short = |_| format_err(images_path, "truncated header");
    let magic = cur.read_u32::<BigEndian>().map_err(short)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            images_path,
            format!("bad image magic {magic:#010x}"),
        ));
    }
    let count = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let rows = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let cols = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let body = &img_bytes[16..];
    if body.len() != count * rows * cols {
        return Err(format_err(
            images_path,
            format!(
                "expected {count} images of {rows}x{cols} ({} bytes), found {} bytes",
                count * rows * cols,
                body.len()
            ),
        ));
    }

    let mut cur = Cursor::new(&lbl_bytes);
    let short = |_| format_err(labels_path, "truncated header");
    let magic = cur.read_u32::<BigEndian>().map_err(short)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            labels_path,
            format!("bad label magic {magic:#010x}"),
        ));
    }
    let label_count = cur.read_u32::<BigEndian>().map_err(short)? as usize;
    let mut labels = Vec::with_capacity(label_count);
    cur.read_to_end(&mut labels)
        .map_err(|e| Error::io(labels_path, e))?;
    if labels.len() != label_count {
        return Err(format_err(
            labels_path,
            format!(
                "header promises {label_count} labels, found {}",
                labels.len()
            ),
        ));
    }
    if label_count != count {
        return Err(format_err(
            labels_path,
            format!("{label_count} labels for {count} images"),
        ));
    }

    let classes = labels.iter().max().map_or(0, |&m| m as usize + 1);
    let samples = body
        .chunks_exact((rows * cols).max(1))
        .zip(&labels)
        .map(|(px, &l)| Sample {
            image: RawImage {
                width: cols,
                height: rows,
                pixels: px.to_vec(),
            },
            label: l as usize,
            origin: None,
        })
        .collect();
    let names = (0..classes).map(|c| c.to_string()).collect();
    Dataset::new(samples, names, Split::Train, None)
}

/// Standard MNIST file names inside a directory.
pub fn mnist_files(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let (images, labels) = mnist_files(dir, split);
    Ok(load_idx(&images, &labels)?.with_split(split))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Training images per class; the rest of the class is the test set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_per_class: Option<usize>,
    /// Fraction of each class used for training (when no count is given).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_ratio: Option<f64>,
    /// Explicit file lists instead of a seeded split, relative to the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
}

impl SplitSpec {
    pub fn per_class(count: usize, seed: u64) -> Self {
        Self {
            train_per_class: Some(count),
            train_ratio: None,
            manifest: None,
            seed,
        }
    }

    fn train_count(&self, available: usize, class: &str) -> Result<usize> {
        let n = match (self.train_per_class, self.train_ratio) {
            (Some(n), _) => n,
            (None, Some(r)) if (0.0..=1.0).contains(&r) => (available as f64 * r).round() as usize,
            (None, Some(r)) => {
                return Err(Error::Config(format!("train ratio {r} outside [0, 1]")))
            }
            (None, None) => {
                return Err(Error::Config(
                    "split needs train_per_class, train_ratio or a manifest".into(),
                ))
            }
        };
        if n > available {
            return Err(Error::Config(format!(
                "class {class} has {available} images, {n} requested for training"
            )));
        }
        Ok(n)
    }
}

fn class_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') {
            continue;
        }
        if entry.path().is_dir() {
            dirs.push((name, entry.path()));
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Config(format!(
            "{} contains no class directories",
            root.display()
        )));
    }
    Ok(dirs)
}

fn class_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let hidden = entry.file_name().to_string_lossy().starts_with('.');
        if !hidden && entry.path().is_file() {
            files.push(entry.path());
        }
    }
    files.sort();
    Ok(files)
}

fn load_sample(root: &Path, path: &Path, label: usize) -> Result<Sample> {
    let bytes = read_file(path)?;
    let image =
        decode_image(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    Ok(Sample {
        image,
        label,
        origin: Some(path.strip_prefix(root).unwrap_or(path).to_path_buf()),
    })
}

/// Loads a directory-per-class tree and splits each class with a seeded
/// shuffle (or the spec's manifest).
pub fn load_folder(
    root: &Path,
    split: &SplitSpec,
    target_height: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    if let Some(manifest) = &split.manifest {
        return load_manifest(root, &root.join(manifest), target_height);
    }
    let dirs = class_dirs(root)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut names = Vec::new();
    for (label, (name, dir)) in dirs.iter().enumerate() {
        let mut files = class_files(dir)?;
        if files.is_empty() {
            return Err(Error::Config(format!("class {name} has no images")));
        }
        let n = split.train_count(files.len(), name)?;
        let mut rng = ChaCha8Rng::seed_from_u64(split.seed);
        rng.set_stream(label as u64);
        files.shuffle(&mut rng);
        let (tr, te) = files.split_at(n);
        let mut tr = tr.to_vec();
        let mut te = te.to_vec();
        tr.sort();
        te.sort();
        for f in tr {
            train.push(load_sample(root, &f, label)?);
        }
        for f in te {
            test.push(load_sample(root, &f, label)?);
        }
        names.push(name.clone());
    }
    Ok((
        Dataset::new(train, names.clone(), Split::Train, target_height)?,
        Dataset::new(test, names, Split::Test, target_height)?,
    ))
}

/// Manifest lines are `train <class>/<file>` or `test <class>/<file>`;
/// blank lines and `#` comments are ignored. Classes are numbered in sorted
/// name order.
pub fn load_manifest(
    root: &Path,
    manifest: &Path,
    target_height: Option<usize>,
) -> Result<(Dataset, Dataset)> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut entries: Vec<(Split, String, PathBuf)> = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || {
            format_err(
                manifest,
                format!("line {}: expected '<train|test> <class>/<file>'", no + 1),
            )
        };
        let (tag, rel) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
        let split = match tag {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad()),
        };
        let rel = PathBuf::from(rel.trim());
        let class = rel
            .components()
            .next()
            .filter(|_| rel.components().count() >= 2)
            .ok_or_else(bad)?
            .as_os_str()
            .to_string_lossy()
            .into_owned();
        entries.push((split, class, rel));
    }
    let mut names: Vec<String> = entries.iter().map(|e| e.1.clone()).collect();
    names.sort();
    names.dedup();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (split, class, rel) in &entries {
        let label = names.binary_search(class).expect("class collected above");
        let sample = load_sample(root, &root.join(rel), label)?;
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    let train_paths: std::collections::HashSet<_> = train.iter().map(|s| &s.origin).collect();
    if test.iter().any(|s| train_paths.contains(&s.origin)) {
        return Err(format_err(
            manifest,
            "a file is listed in both train and test",
        ));
    }
    Ok((
        Dataset::new(train, names.clone(), Split::Train, target_height)?,
        Dataset::new(test, names, Split::Test, target_height)?,
    ))
}
