//! Backward rendering of a map's preferred stimulus in input pixel space.

use super::{LayerConfig, NetworkConfig, TrainedModel};
use crate::encoding::{GrayImage, Polarity};
use crate::error::{Error, Result};
use crate::snn::WeightTensor;

/// Input-space renderings of every map at one depth.
struct Level {
    height: usize,
    width: usize,
    /// Input pixels between horizontally adjacent units.
    jump: usize,
    maps: Vec<Vec<f64>>,
}

impl Level {
    fn grown(&self, kh: usize, kw: usize) -> (usize, usize) {
        (
            self.height + (kh - 1) * self.jump,
            self.width + (kw - 1) * self.jump,
        )
    }

    /// Adds `weight * maps[src]`, shifted by `(dy, dx)` units, into `out`.
    fn accumulate(
        &self,
        out: &mut [f64],
        out_w: usize,
        src: usize,
        dy: usize,
        dx: usize,
        weight: f64,
    ) {
        if weight == 0.0 {
            return;
        }
        let (oy, ox) = (dy * self.jump, dx * self.jump);
        let m = &self.maps[src];
        for y in 0..self.height {
            let row = &mut out[(oy + y) * out_w + ox..][..self.width];
            for (o, &v) in row.iter_mut().zip(&m[y * self.width..][..self.width]) {
                *o += weight * v;
            }
        }
    }

    fn conv(&self, w: &WeightTensor, only: Option<usize>) -> Level {
        let [kh, kw] = w.window();
        let (height, width) = self.grown(kh, kw);
        let maps = (0..w.maps())
            .map(|f| {
                let mut out = vec![0.0; height * width];
                if only.is_none_or(|o| o == f) {
                    for i in 0..w.in_maps() {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                self.accumulate(&mut out, width, i, dy, dx, w.get(f, i, dy, dx));
                            }
                        }
                    }
                }
                out
            })
            .collect();
        Level {
            height,
            width,
            jump: self.jump,
            maps,
        }
    }

    fn pool(&self, window: [usize; 2], stride: usize) -> Level {
        let [ph, pw] = window;
        let (height, width) = self.grown(ph, pw);
        let share = 1.0 / (ph * pw) as f64;
        let maps = (0..self.maps.len())
            .map(|m| {
                let mut out = vec![0.0; height * width];
                for dy in 0..ph {
                    for dx in 0..pw {
                        self.accumulate(&mut out, width, m, dy, dx, share);
                    }
                }
                out
            })
            .collect();
        Level {
            height,
            width,
            jump: self.jump * stride,
            maps,
        }
    }
}

/// Config-layer position of the conv layer with the given 0-based ordinal.
fn conv_position(config: &NetworkConfig, ordinal: usize) -> Result<usize> {
    config
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l, LayerConfig::Conv(_)))
        .nth(ordinal)
        .map(|(i, _)| i)
        .ok_or_else(|| {
            Error::Config(format!(
                "conv layer {ordinal} does not exist (config has {})",
                config.conv_configs().count()
            ))
        })
}

/// `[height, width]` in input pixels seen by one unit of the given conv
/// layer (0-based conv ordinal).
pub fn receptive_field(config: &NetworkConfig, ordinal: usize) -> Result<[usize; 2]> {
    let position = conv_position(config, ordinal)?;
    let k = config.dog.kernel_size;
    let (mut h, mut w, mut jump) = (k, k, 1);
    for layer in &config.layers[..=position] {
        let (window, stride) = match layer {
            LayerConfig::Conv(c) => (c.window, 1),
            LayerConfig::Pool(p) => (p.window, p.stride),
        };
        h += (window[0] - 1) * jump;
        w += (window[1] - 1) * jump;
        jump *= stride;
    }
    Ok([h, w])
}

/// Renders map `map` of conv layer `ordinal` (0-based) as a weighted sum of
/// the renderings of the layer below, down to signed DoG kernels, then maps
/// `v` to `0.5 + 0.5 v / max|v|`.
pub fn reconstruct_feature(model: &TrainedModel, ordinal: usize, map: usize) -> Result<GrayImage> {
    let config = &model.config;
    let position = conv_position(config, ordinal)?;
    if model.provenance.layers.len() <= ordinal {
        return Err(Error::State(format!(
            "conv layer {ordinal} has not been trained"
        )));
    }
    let maps = model.weights[ordinal].maps();
    if map >= maps {
        return Err(Error::Config(format!(
            "map {map} does not exist (layer has {maps})"
        )));
    }
    let k = config.dog.kernel_size;
    let kernel = config.dog.kernel();
    let mut level = Level {
        height: k,
        width: k,
        jump: 1,
        maps: match config.dog.polarity {
            Polarity::OnOnly => vec![kernel],
            Polarity::OnAndOff => {
                let off = kernel.iter().map(|v| -v).collect();
                vec![kernel, off]
            }
        },
    };
    let mut conv_ordinal = 0;
    for (i, layer) in config.layers[..=position].iter().enumerate() {
        level = match layer {
            LayerConfig::Conv(_) => {
                let only = (i == position).then_some(map);
                let next = level.conv(&model.weights[conv_ordinal], only);
                conv_ordinal += 1;
                next
            }
            LayerConfig::Pool(p) => level.pool(p.window, p.stride),
        };
    }
    let field = &level.maps[map];
    let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pixels = field
        .iter()
        .map(|&v| {
            if peak == 0.0 {
                0.5
            } else {
                (0.5 + 0.5 * v / peak).clamp(0.0, 1.0)
            }
        })
        .collect();
    GrayImage::new(level.width, level.height, pixels)
}
