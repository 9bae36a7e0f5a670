//! Retina-like front end: grayscale preprocessing, ON/OFF difference-of-Gaussians
//! contrast maps and rank-order latency coding into a [`SpikeWave`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spike::{Extent, SpikeEvent, SpikeWave};

/// Undecoded 8-bit grayscale pixels, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::Decode(format!(
                "{} pixels do not fill a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Decodes any format supported by the `image` crate into 8-bit luma.
pub fn decode_image(bytes: &[u8]) -> Result<RawImage> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::Decode(e.to_string()))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    RawImage::new(w as usize, h as usize, luma.into_raw())
}

/// Grayscale intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension("image has zero area".into()));
        }
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "{} intensities for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Quantizes to 8 bits, e.g. for writing PNG/PGM files.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    /// Multiplies every intensity by `factor`, clamping to `[0, 1]`.
    pub fn scaled(&self, factor: f64) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|v| (v * factor).clamp(0.0, 1.0))
                .collect(),
        }
    }
}

/// Scales 8-bit pixels to `[0, 1]` and optionally rescales (bilinear) to a
/// target height, keeping the aspect ratio. The new width is rounded half up.
pub fn preprocess(image: &RawImage, target_height: Option<usize>) -> Result<GrayImage> {
    if image.width == 0 || image.height == 0 || image.pixels.is_empty() {
        return Err(Error::Decode("empty image".into()));
    }
    if image.pixels.len() != image.width * image.height {
        return Err(Error::Decode(
            "pixel buffer does not match dimensions".into(),
        ));
    }
    let data: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let img = GrayImage {
        width: image.width,
        height: image.height,
        data,
    };
    match target_height {
        None => Ok(img),
        Some(0) => Err(Error::Dimension("target height must be positive".into())),
        Some(h) if h == img.height => Ok(img),
        Some(h) => {
            let w = (2 * img.width * h + img.height) / (2 * img.height);
            Ok(resize_bilinear(&img, w.max(1), h))
        }
    }
}

fn resize_bilinear(src: &GrayImage, out_w: usize, out_h: usize) -> GrayImage {
    let sx = src.width as f64 / out_w as f64;
    let sy = src.height as f64 / out_h as f64;
    let max_x = (src.width - 1) as f64;
    let max_y = (src.height - 1) as f64;
    let mut data = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.height - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.width - 1);
            let tx = fx - x0 as f64;
            let top = src.get(x0, y0) * (1.0 - tx) + src.get(x1, y0) * tx;
            let bottom = src.get(x0, y1) * (1.0 - tx) + src.get(x1, y1) * tx;
            data.push((top * (1.0 - ty) + bottom * ty).clamp(0.0, 1.0));
        }
    }
    GrayImage {
        width: out_w,
        height: out_h,
        data,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    OnOnly,
    OnAndOff,
}

impl Polarity {
    pub fn maps(self) -> usize {
        match self {
            Polarity::OnOnly => 1,
            Polarity::OnAndOff => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoGSpec {
    pub kernel_size: usize,
    pub sigma_center: f64,
    pub sigma_surround: f64,
    pub polarity: Polarity,
    /// Minimum contrast for a DoG cell to fire at all.
    pub firing_threshold: f64,
}

impl DoGSpec {
    /// ON and OFF cells, 7x7 kernel, sigmas 1 and 2 pixels.
    pub fn mnist() -> Self {
        Self {
            kernel_size: 7,
            sigma_center: 1.0,
            sigma_surround: 2.0,
            polarity: Polarity::OnAndOff,
            firing_threshold: 50.0 / 255.0,
        }
    }

    /// ON cells only, as used for large natural images.
    pub fn natural_images() -> Self {
        Self {
            polarity: Polarity::OnOnly,
            firing_threshold: 15.0 / 255.0,
            ..Self::mnist()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "DoG kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma_center > 0.0 && self.sigma_center < self.sigma_surround) {
            return Err(Error::Config(format!(
                "DoG sigmas must satisfy 0 < center < surround, got {} and {}",
                self.sigma_center, self.sigma_surround
            )));
        }
        if !(self.firing_threshold >= 0.0 && self.firing_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "DoG firing threshold must be finite and non-negative, got {}",
                self.firing_threshold
            )));
        }
        Ok(())
    }

    /// Center-minus-surround kernel, row-major `kernel_size x kernel_size`.
    /// Each Gaussian is normalized to unit sum; the difference is then
    /// mean-subtracted so the kernel sums to zero.
    pub fn kernel(&self) -> Vec<f64> {
        let k = self.kernel_size;
        let center = gaussian(k, self.sigma_center);
        let surround = gaussian(k, self.sigma_surround);
        let mut kernel: Vec<f64> = center.iter().zip(&surround).map(|(c, s)| c - s).collect();
        let mean = kernel.iter().sum::<f64>() / kernel.len() as f64;
        for v in &mut kernel {
            *v -= mean;
        }
        kernel
    }
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let two_s2 = 2.0 * sigma * sigma;
    let mut g = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 - r, y as f64 - r);
            g.push((-(dx * dx + dy * dy) / two_s2).exp());
        }
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Sign-split DoG responses. Map 0 holds ON (positive) contrast, map 1 the
/// negated OFF (negative) contrast when present.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastField {
    pub width: usize,
    pub height: usize,
    pub firing_threshold: f64,
    pub on: Vec<f64>,
    pub off: Option<Vec<f64>>,
}

impl ContrastField {
    pub fn maps(&self) -> usize {
        if self.off.is_some() {
            2
        } else {
            1
        }
    }

    pub fn extent(&self) -> Extent {
        Extent::new(self.maps(), self.height, self.width)
    }

    pub fn map(&self, map: usize) -> &[f64] {
        match map {
            0 => &self.on,
            1 => self.off.as_deref().expect("field has no OFF map"),
            _ => panic!("contrast field has no map {map}"),
        }
    }

    pub fn value(&self, map: usize, x: usize, y: usize) -> f64 {
        self.map(map)[y * self.width + x]
    }

    /// Multiplies every contrast and the firing threshold by `factor`.
    pub fn scaled(&self, factor: f64) -> ContrastField {
        let scale = |v: &Vec<f64>| v.iter().map(|x| x * factor).collect::<Vec<_>>();
        ContrastField {
            width: self.width,
            height: self.height,
            firing_threshold: self.firing_threshold * factor,
            on: scale(&self.on),
            off: self.off.as_ref().map(scale),
        }
    }
}

/// Valid-region DoG correlation. Each response is taken relative to the
/// window's center pixel, which is exact for zero-sum kernels and makes
/// constant images produce exactly zero.
pub fn dog_filter(img: &GrayImage, spec: &DoGSpec) -> Result<ContrastField> {
    spec.validate()?;
    let k = spec.kernel_size;
    if img.width < k || img.height < k {
        return Err(Error::Dimension(format!(
            "{}x{} image is smaller than the {k}x{k} DoG kernel",
            img.width, img.height
        )));
    }
    let kernel = spec.kernel();
    let r = k / 2;
    let (out_w, out_h) = (img.width - k + 1, img.height - k + 1);
    let mut on = vec![0.0; out_w * out_h];
    let mut off = match spec.polarity {
        Polarity::OnAndOff => Some(vec![0.0; out_w * out_h]),
        Polarity::OnOnly => None,
    };
    for oy in 0..out_h {
        for ox in 0..out_w {
            let reference = img.get(ox + r, oy + r);
            let mut acc = 0.0;
            for dy in 0..k {
                let row = &img.data[(oy + dy) * img.width + ox..][..k];
                let krow = &kernel[dy * k..][..k];
                for (p, w) in row.iter().zip(krow) {
                    acc += w * (p - reference);
                }
            }
            let i = oy * out_w + ox;
            if acc > 0.0 {
                on[i] = acc;
            } else if acc < 0.0 {
                if let Some(off) = off.as_mut() {
                    off[i] = -acc;
                }
            }
        }
    }
    Ok(ContrastField {
        width: out_w,
        height: out_h,
        firing_threshold: spec.firing_threshold,
        on,
        off,
    })
}

/// Rank-order coding. Cells whose contrast exceeds the field's firing
/// threshold are sorted by decreasing contrast (ties by map, row, column)
/// and cut into `steps` consecutive packets of `ceil(N / steps)` spikes.
pub fn latency_encode(field: &ContrastField, steps: usize) -> Result<SpikeWave> {
    if steps == 0 {
        return Err(Error::Domain(
            "latency coding needs at least one time step".into(),
        ));
    }
    if steps > u16::MAX as usize + 1 {
        return Err(Error::Domain(format!(
            "{steps} time steps exceed the supported range"
        )));
    }
    let extent = field.extent();
    let mut eligible: Vec<(f64, SpikeEvent)> = Vec::new();
    for map in 0..extent.maps {
        let values = field.map(map);
        for y in 0..field.height {
            for x in 0..field.width {
                let r = values[y * field.width + x];
                if r > field.firing_threshold {
                    eligible.push((r, SpikeEvent::new(map, x, y, 0)));
                }
            }
        }
    }
    // Collected in (map, y, x) order, so a stable sort keeps that as the tie order.
    eligible.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut wave = SpikeWave::new(extent, steps);
    if eligible.is_empty() {
        return Ok(wave);
    }
    let packet = eligible.len().div_ceil(steps);
    for (step, chunk) in eligible.chunks(packet).enumerate() {
        let bucket = chunk
            .iter()
            .map(|(_, e)| SpikeEvent {
                step: step as u16,
                ..*e
            })
            .collect();
        wave.set_bucket(step, bucket);
    }
    Ok(wave)
}

/// DoG filtering followed by latency coding.
pub fn encode_image(img: &GrayImage, spec: &DoGSpec, steps: usize) -> Result<SpikeWave> {
    latency_encode(&dog_filter(img, spec)?, steps)
}
