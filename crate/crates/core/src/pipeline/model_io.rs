//! Versioned binary model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "SDNNMODL" | version u32
//! config: u32 length + canonical TOML
//! conv layers: u32 count, each (maps, in_maps, kh, kw: u32) + f32 weights [map][in][dy][dx]
//! classifier: classes u32, dim u32, mean f32[dim], scale f32[dim],
//!             weights f32[classes][dim], bias f32[classes]
//! provenance: seed u64, digest (u32 length + bytes), train samples u64,
//!             u32 layer count, each: layer u32, converged u8, iterations u64,
//!             start u64, end u64, u32 points + (u64, f64) pairs
//! sha256 of everything above
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use super::{LayerProvenance, NetworkConfig, Provenance, TrainedModel};
use crate::classifier::LinearModel;
use crate::error::{Error, Result};
use crate::snn::WeightTensor;

pub const MODEL_MAGIC: &[u8; 8] = b"SDNNMODL";
pub const MODEL_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;
const VEC: &str = "writing to a Vec cannot fail";

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit the container")))
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.write_f32::<LE>(v as f32).expect(VEC);
    }
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    out.write_u32::<LE>(u32_len(bytes.len())?).expect(VEC);
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.write_u32::<LE>(MODEL_VERSION).expect(VEC);
    put_bytes(&mut out, model.config.to_toml()?.as_bytes())?;

    out.write_u32::<LE>(u32_len(model.weights.len())?)
        .expect(VEC);
    for w in &model.weights {
        let [kh, kw] = w.window();
        for d in [w.maps(), w.in_maps(), kh, kw] {
            out.write_u32::<LE>(u32_len(d)?).expect(VEC);
        }
        put_f32s(&mut out, &w.to_canonical());
    }

    let c = &model.classifier;
    out.write_u32::<LE>(u32_len(c.classes())?).expect(VEC);
    out.write_u32::<LE>(u32_len(c.dim())?).expect(VEC);
    put_f32s(&mut out, &c.mean);
    put_f32s(&mut out, &c.scale);
    for row in &c.weights {
        put_f32s(&mut out, row);
    }
    put_f32s(&mut out, &c.bias);

    let p = &model.provenance;
    out.write_u64::<LE>(p.seed).expect(VEC);
    put_bytes(&mut out, p.dataset_digest.as_bytes())?;
    out.write_u64::<LE>(p.train_samples).expect(VEC);
    out.write_u32::<LE>(u32_len(p.layers.len())?).expect(VEC);
    for l in &p.layers {
        out.write_u32::<LE>(u32_len(l.layer)?).expect(VEC);
        out.write_u8(l.converged as u8).expect(VEC);
        out.write_u64::<LE>(l.iterations).expect(VEC);
        out.write_u64::<LE>(l.start_tick).expect(VEC);
        out.write_u64::<LE>(l.end_tick).expect(VEC);
        out.write_u32::<LE>(u32_len(l.trajectory.len())?)
            .expect(VEC);
        for &(i, c) in &l.trajectory {
            out.write_u64::<LE>(i).expect(VEC);
            out.write_f64::<LE>(c).expect(VEC);
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn short(_: std::io::Error) -> Error {
        Error::Format("model file is truncated".into())
    }

    fn u8(&mut self) -> Result<u8> {
        self.0.read_u8().map_err(Self::short)
    }

    fn u32(&mut self) -> Result<usize> {
        self.0
            .read_u32::<LE>()
            .map(|v| v as usize)
            .map_err(Self::short)
    }

    fn u64(&mut self) -> Result<u64> {
        self.0.read_u64::<LE>().map_err(Self::short)
    }

    fn f64(&mut self) -> Result<f64> {
        self.0.read_f64::<LE>().map_err(Self::short)
    }

    fn remaining(&self) -> usize {
        self.0.get_ref().len() - self.0.position() as usize
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        if n > self.remaining() {
            return Err(Error::Format("model file is truncated".into()));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).map_err(Self::short)?;
        Ok(buf)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(4) > self.remaining() {
            return Err(Error::Format("model file is truncated".into()));
        }
        (0..n)
            .map(|_| self.0.read_f32::<LE>().map(f64::from).map_err(Self::short))
            .collect()
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?)
            .map_err(|_| Error::Format("model file holds invalid text".into()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    if bytes.len() < MODEL_MAGIC.len() + 4 || &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    if bytes.len() < 12 + CHECKSUM_LEN {
        return Err(Error::Format("model file is truncated".into()));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(Error::Format(
            "model checksum mismatch (file truncated or corrupted)".into(),
        ));
    }

    let mut r = Reader(Cursor::new(&body[12..]));
    let config = NetworkConfig::from_toml(&r.string()?)
        .map_err(|e| Error::Format(format!("embedded config: {e}")))?;

    let convs = r.u32()?;
    let mut weights = Vec::with_capacity(convs.min(64));
    for _ in 0..convs {
        let (maps, in_maps, kh, kw) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let n = maps
            .checked_mul(in_maps)
            .and_then(|v| v.checked_mul(kh))
            .and_then(|v| v.checked_mul(kw))
            .ok_or_else(|| Error::Format("weight tensor shape overflows".into()))?;
        let values = r.f32s(n)?;
        weights.push(
            WeightTensor::from_canonical(maps, in_maps, kh, kw, &values)
                .map_err(|e| Error::Format(format!("weight tensor: {e}")))?,
        );
    }

    let classes = r.u32()?;
    let dim = r.u32()?;
    let mean = r.f32s(dim)?;
    let scale = r.f32s(dim)?;
    let class_weights = (0..classes)
        .map(|_| r.f32s(dim))
        .collect::<Result<Vec<_>>>()?;
    let bias = r.f32s(classes)?;
    let classifier = LinearModel {
        mean,
        scale,
        weights: class_weights,
        bias,
    };

    let seed = r.u64()?;
    let dataset_digest = r.string()?;
    let train_samples = r.u64()?;
    let n_layers = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let layer = r.u32()?;
        let converged = r.u8()? != 0;
        let iterations = r.u64()?;
        let start_tick = r.u64()?;
        let end_tick = r.u64()?;
        let points = r.u32()?;
        if points.saturating_mul(16) > r.remaining() {
            return Err(Error::Format("model file is truncated".into()));
        }
        let trajectory = (0..points)
            .map(|_| Ok((r.u64()?, r.f64()?)))
            .collect::<Result<Vec<_>>>()?;
        layers.push(LayerProvenance {
            layer,
            converged,
            iterations,
            start_tick,
            end_tick,
            trajectory,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Format("trailing bytes after model".into()));
    }

    let model = TrainedModel {
        config,
        weights,
        classifier,
        provenance: Provenance {
            seed,
            dataset_digest,
            train_samples,
            layers,
        },
    };
    model
        .network()
        .map_err(|e| Error::Format(format!("weights do not match the config: {e}")))?;
    if model.classifier.dim() != model.feature_dim() {
        return Err(Error::Format(format!(
            "classifier expects {} features, network yields {}",
            model.classifier.dim(),
            model.feature_dim()
        )));
    }
    Ok(model)
}

/// Writes the model atomically (temporary file, then rename).
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let bytes = model_to_bytes(model)?;
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let mut tmp = tempfile_in(dir, path)?;
    tmp.1.write_all(&bytes).map_err(|e| Error::io(&tmp.0, e))?;
    tmp.1.sync_all().map_err(|e| Error::io(&tmp.0, e))?;
    drop(tmp.1);
    fs::rename(&tmp.0, path).map_err(|e| Error::io(path, e))
}

fn tempfile_in(dir: &Path, target: &Path) -> Result<(std::path::PathBuf, fs::File)> {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    Ok((tmp, file))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
