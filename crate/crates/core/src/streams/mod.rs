//! Visual and tactile feature extractors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::dataset::{bilinear_rgb, TactileWindow, TextureImage, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{Activation, ConvBlock, DenseModule};
use crate::seed::Rng;

/// Image augmentation. Ranges are half-widths (`rotation_max_deg`,
/// `translate_max_px`, `crop_jitter_px`) or multiplicative `[lo, hi]` intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub rotation_max_deg: f64,
    pub contrast_range: [f64; 2],
    pub translate_max_px: f64,
    pub zoom_range: [f64; 2],
    /// Largest offset of a training crop from the image center; the offset is
    /// further limited so the crop stays inside the image.
    pub crop_jitter_px: f64,
    pub crop_size: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            rotation_max_deg: 10.0,
            contrast_range: [0.8, 1.2],
            translate_max_px: 8.0,
            zoom_range: [0.9, 1.1],
            crop_jitter_px: 1000.0,
            crop_size: 64,
        }
    }
}

impl AugmentConfig {
    /// No augmentation: training crops equal the center crop.
    pub fn none(crop_size: usize) -> Self {
        Self {
            flip_prob: 0.0,
            rotation_max_deg: 0.0,
            contrast_range: [1.0, 1.0],
            translate_max_px: 0.0,
            zoom_range: [1.0, 1.0],
            crop_jitter_px: 0.0,
            crop_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.rotation_max_deg >= 0.0
            && self.translate_max_px >= 0.0
            && self.crop_jitter_px >= 0.0
            && self.contrast_range[0] >= 0.0
            && self.contrast_range[0] <= self.contrast_range[1]
            && self.zoom_range[0] > 0.0
            && self.zoom_range[0] <= self.zoom_range[1]
            && self.crop_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation settings {self:?}")))
        }
    }
}

fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crop of `cfg.crop_size²` RGB values in [0, 1], row-major HWC.
///
/// Without `rng` (inference) this is the exact center crop. With `rng` the
/// crop is flipped, rotated, zoomed, moved, and contrast-adjusted about its
/// per-channel mean; resampling is bilinear with edge clamping.
pub fn augment_image(img: &TextureImage, cfg: &AugmentConfig, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
    let c = cfg.crop_size;
    if c > img.height || c > img.width {
        return Err(Error::Parameter(format!(
            "crop {c} is larger than the {}x{} image",
            img.height, img.width
        )));
    }
    let (r0, c0) = ((img.height - c) / 2, (img.width - c) / 2);
    let Some(rng) = rng else {
        let mut out = Vec::with_capacity(c * c * 3);
        for i in 0..c {
            let start = ((r0 + i) * img.width + c0) * 3;
            out.extend(img.pixels[start..start + c * 3].iter().map(|&p| f64::from(p) / 255.0));
        }
        return Ok(out);
    };

    let flip = rng.random_bool(cfg.flip_prob);
    let theta = uniform(rng, -cfg.rotation_max_deg, cfg.rotation_max_deg).to_radians();
    let zoom = uniform(rng, cfg.zoom_range[0], cfg.zoom_range[1]);
    let contrast = uniform(rng, cfg.contrast_range[0], cfg.contrast_range[1]);
    let (sin, cos) = theta.sin_cos();
    // half-extent of the rotated, zoomed footprint
    let half = c as f64 / 2.0 * (cos.abs() + sin.abs()) / zoom;
    let center = (r0 as f64 + c as f64 / 2.0, c0 as f64 + c as f64 / 2.0);
    let mut place = |mid: f64, size: usize| -> f64 {
        let room = (size as f64 / 2.0 - half).max(0.0);
        let jitter = cfg.crop_jitter_px.min(room);
        let pos = mid + uniform(rng, -jitter, jitter) + uniform(rng, -cfg.translate_max_px, cfg.translate_max_px);
        pos.clamp(size as f64 / 2.0 - room, size as f64 / 2.0 + room)
    };
    let cy = place(center.0, img.height);
    let cx = place(center.1, img.width);

    let mut out = Vec::with_capacity(c * c * 3);
    for i in 0..c {
        let v = i as f64 + 0.5 - c as f64 / 2.0;
        for j in 0..c {
            let mut u = j as f64 + 0.5 - c as f64 / 2.0;
            if flip {
                u = -u;
            }
            let x = cx + (cos * u - sin * v) / zoom;
            let y = cy + (sin * u + cos * v) / zoom;
            out.extend(bilinear_rgb(img, x, y).map(|p| p / 255.0));
        }
    }
    if contrast != 1.0 {
        apply_contrast(&mut out, contrast);
    }
    Ok(out)
}

/// `m + factor·(x − m)` per channel, with `m` the channel mean, clamped to [0, 1].
pub fn apply_contrast(hwc: &mut [f64], factor: f64) {
    let n = (hwc.len() / 3) as f64;
    let mut mean = [0.0; 3];
    for px in hwc.chunks_exact(3) {
        for k in 0..3 {
            mean[k] += px[k] / n;
        }
    }
    for px in hwc.chunks_exact_mut(3) {
        for k in 0..3 {
            px[k] = (mean[k] + factor * (px[k] - mean[k])).clamp(0.0, 1.0);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VisualConfig {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dense_widths: Vec<usize>,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16, 32],
            kernel_size: 3,
            dense_widths: vec![128],
        }
    }
}

/// Convolutional encoder and dense head mapping a crop to `d_f` features.
#[derive(Debug, Clone)]
pub struct VisualStream {
    pub augment: AugmentConfig,
    convs: Vec<ConvBlock>,
    head: Vec<DenseModule>,
    d_f: usize,
}

/// Dense stack `widths... → d_f`; every module is linear, ReLU, dropout.
fn dense_stack(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    widths: &[usize],
    d_f: usize,
    dropout: f64,
    init_seed: u64,
) -> Result<Vec<DenseModule>> {
    let mut layers = Vec::with_capacity(widths.len() + 1);
    let mut width = d_in;
    for (k, &w) in widths.iter().enumerate() {
        layers.push(DenseModule::new(store, &format!("{name}.dense{k}"), width, w, Activation::Relu, dropout, init_seed)?);
        width = w;
    }
    layers.push(DenseModule::new(store, &format!("{name}.out"), width, d_f, Activation::Relu, dropout, init_seed)?);
    Ok(layers)
}

impl VisualStream {
    pub fn new(
        store: &mut ParamStore,
        cfg: &VisualConfig,
        augment: AugmentConfig,
        d_f: usize,
        dropout: f64,
        init_seed: u64,
    ) -> Result<Self> {
        augment.validate()?;
        let mut convs = Vec::with_capacity(cfg.conv_channels.len());
        let mut c_in = 3;
        let mut side = augment.crop_size;
        for (k, &c_out) in cfg.conv_channels.iter().enumerate() {
            let block = ConvBlock::new(store, &format!("visual.conv{k}"), cfg.kernel_size, c_in, c_out, 1, true, init_seed)?;
            side = block.output_size(side).ok_or_else(|| {
                Error::Config(format!(
                    "crop {} is too small for {} conv blocks",
                    augment.crop_size,
                    cfg.conv_channels.len()
                ))
            })?;
            c_in = c_out;
            convs.push(block);
        }
        let head = dense_stack(store, "visual", side * side * c_in, &cfg.dense_widths, d_f, dropout, init_seed)?;
        Ok(Self { augment, convs, head, d_f })
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn crop_size(&self) -> usize {
        self.augment.crop_size
    }

    /// Crops for a batch, stacked into `[b, crop, crop, 3]`.
    pub fn prepare(&self, images: &[&TextureImage], mut rng: Option<&mut Rng>) -> Result<Tensor> {
        let c = self.crop_size();
        let mut data = Vec::with_capacity(images.len() * c * c * 3);
        for img in images {
            data.extend(augment_image(img, &self.augment, rng.as_deref_mut())?);
        }
        Tensor::new(&[images.len(), c, c, 3], data)
    }

    /// Features of prepared crops `[b, crop, crop, 3]`; dropout is active only with `rng`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, crops: Var, mut rng: Option<&mut Rng>) -> Result<Var> {
        let s = tape.shape(crops).to_vec();
        let c = self.crop_size();
        if s.len() != 4 || s[1] != c || s[2] != c || s[3] != 3 {
            return Err(Error::Dimension(format!("visual stream expects [b, {c}, {c}, 3], got {s:?}")));
        }
        let mut x = crops;
        for block in &self.convs {
            x = block.forward(tape, store, x)?;
        }
        let flat = tape.shape(x)[1..].iter().product();
        let mut x = tape.reshape(x, &[s[0], flat])?;
        for layer in &self.head {
            x = layer.forward(tape, store, x, rng.as_deref_mut())?;
        }
        Ok(x)
    }

    /// Augments (training) or center-crops (inference), then encodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        images: &[&TextureImage],
        training: Option<(&mut Rng, &mut Rng)>,
    ) -> Result<Var> {
        match training {
            Some((augment_rng, dropout_rng)) => {
                let crops = self.prepare(images, Some(augment_rng))?;
                let x = tape.constant(crops);
                self.encode(tape, store, x, Some(dropout_rng))
            }
            None => {
                let crops = self.prepare(images, None)?;
                let x = tape.constant(crops);
                self.encode(tape, store, x, None)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TactileConfig {
    pub window: usize,
    pub stride: usize,
    pub dense_widths: Vec<usize>,
}

impl Default for TactileConfig {
    fn default() -> Self {
        Self {
            window: 50,
            stride: 50,
            dense_widths: vec![128],
        }
    }
}

/// Flatten, layer norm, and a dense stack mapping a `W×D` window to `d_f` features.
#[derive(Debug, Clone)]
pub struct TactileStream {
    window: usize,
    norm_gain: ParamId,
    norm_bias: ParamId,
    trunk: Vec<DenseModule>,
    d_f: usize,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl TactileStream {
    pub fn new(store: &mut ParamStore, cfg: &TactileConfig, d_f: usize, dropout: f64, init_seed: u64) -> Result<Self> {
        if cfg.window == 0 {
            return Err(Error::Config("tactile window must be >= 1".into()));
        }
        let width = cfg.window * CHANNELS;
        let norm_gain = store.add("tactile.norm.gain", Tensor::filled(&[width], 1.0))?;
        let norm_bias = store.add("tactile.norm.bias", Tensor::zeros(&[width]))?;
        let trunk = dense_stack(store, "tactile", width, &cfg.dense_widths, d_f, dropout, init_seed)?;
        Ok(Self {
            window: cfg.window,
            norm_gain,
            norm_bias,
            trunk,
            d_f,
        })
    }

    pub fn d_f(&self) -> usize {
        self.d_f
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Stacks windows into `[b, W, D]`.
    pub fn prepare(&self, windows: &[&TactileWindow]) -> Result<Tensor> {
        if let Some(w) = windows.iter().find(|w| w.rows.len() != self.window) {
            return Err(Error::Dimension(format!(
                "tactile stream expects {}x{CHANNELS} windows, got {} rows",
                self.window,
                w.rows.len()
            )));
        }
        let data = windows.iter().flat_map(|w| w.flat()).collect();
        Tensor::new(&[windows.len(), self.window, CHANNELS], data)
    }

    /// Flattened, layer-normalized windows.
    pub fn normalize(&self, tape: &mut Tape, store: &ParamStore, windows: Var) -> Result<Var> {
        let s = tape.shape(windows).to_vec();
        if s.len() != 3 || s[1] != self.window || s[2] != CHANNELS {
            return Err(Error::Dimension(format!(
                "tactile stream expects [b, {}, {CHANNELS}], got {s:?}",
                self.window
            )));
        }
        let x = tape.reshape(windows, &[s[0], self.window * CHANNELS])?;
        let g = tape.param(store, self.norm_gain);
        let b = tape.param(store, self.norm_bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, windows: Var, mut rng: Option<&mut Rng>) -> Result<Var> {
        let mut x = self.normalize(tape, store, windows)?;
        for layer in &self.trunk {
            x = layer.forward(tape, store, x, rng.as_deref_mut())?;
        }
        Ok(x)
    }
}
