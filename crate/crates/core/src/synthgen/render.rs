use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::HeightField;
use crate::dataset::TextureImage;
use crate::seed::Rng;

/// Camera and lighting parameters. Jitter terms are half-widths of uniform
/// ranges except `pixel_noise`, which is a standard deviation; all zero gives
/// a noiseless render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub rows: usize,
    pub cols: usize,
    /// µm per pixel along rows (specimen length) and columns (width).
    pub pixel_pitch_um: [f64; 2],
    pub light_azimuth_deg: f64,
    pub gain: f64,
    pub base: f64,
    pub pitch_jitter: f64,
    pub azimuth_jitter_deg: f64,
    pub brightness_jitter: f64,
    pub color_jitter: f64,
    pub pixel_noise: f64,
    /// Randomize the sampling grid by up to half a pixel.
    pub subpixel_offset: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            rows: super::IMAGE_ROWS,
            cols: super::IMAGE_COLS,
            pixel_pitch_um: super::PIXEL_PITCH_UM,
            light_azimuth_deg: 45.0,
            gain: 0.8,
            base: 0.5,
            pitch_jitter: 0.04,
            azimuth_jitter_deg: 15.0,
            brightness_jitter: 0.05,
            color_jitter: 0.03,
            pixel_noise: 0.02,
            subpixel_offset: true,
        }
    }
}

impl RenderConfig {
    pub fn noiseless(rows: usize, cols: usize, pixel_pitch_um: [f64; 2]) -> Self {
        Self {
            rows,
            cols,
            pixel_pitch_um,
            pitch_jitter: 0.0,
            azimuth_jitter_deg: 0.0,
            brightness_jitter: 0.0,
            color_jitter: 0.0,
            pixel_noise: 0.0,
            subpixel_offset: false,
            ..Self::default()
        }
    }
}

fn jitter(rng: &mut Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..half_width)
    } else {
        0.0
    }
}

/// Shaded image of the field: intensity is `base + gain·(∇h · light)`,
/// sampled at one point per pixel with no prefiltering, so grooves finer than
/// two pixels alias.
pub fn render_image(field: &HeightField, cfg: &RenderConfig, rng: &mut Rng) -> TextureImage {
    let scale = 1.0 + jitter(rng, cfg.pitch_jitter);
    let pitch = [cfg.pixel_pitch_um[0] * scale, cfg.pixel_pitch_um[1] * scale];
    let azimuth = (cfg.light_azimuth_deg + jitter(rng, cfg.azimuth_jitter_deg)).to_radians();
    let (lx, ly) = (azimuth.cos(), azimuth.sin());
    let offset = if cfg.subpixel_offset {
        (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
    } else {
        (0.5, 0.5)
    };
    let brightness = jitter(rng, cfg.brightness_jitter);
    let color: [f64; 3] = std::array::from_fn(|_| 1.0 + jitter(rng, cfg.color_jitter));
    let mut pixels = Vec::with_capacity(cfg.rows * cfg.cols * 3);
    for i in 0..cfg.rows {
        let x = (i as f64 + offset.0) * pitch[0];
        for j in 0..cfg.cols {
            let y = (j as f64 + offset.1) * pitch[1];
            let (_, (gx, gy)) = field.height_and_gradient(x, y);
            let shade = cfg.base + cfg.gain * (lx * gx + ly * gy);
            for c in color {
                let mut v = shade * c + brightness;
                if cfg.pixel_noise > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    v += cfg.pixel_noise * z;
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let mut img = TextureImage::new(cfg.rows, cfg.cols, pixels).expect("sizes agree");
    img.pixel_pitch = Some(cfg.pixel_pitch_um);
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::synthgen::{make_height_field, Milling, SurfaceSpec};

    fn v_field(period: f64, amplitude: f64) -> HeightField {
        let spec = SurfaceSpec {
            milling: Milling::V,
            granularity_index: 0,
            period_um: period,
            amplitude_um: amplitude,
            noise_level: 0.0,
            seed: 0,
        };
        make_height_field(&spec, (20000.0, 10000.0), period / 8.0, &mut seed::stream(3, "f", 0)).unwrap()
    }

    #[test]
    fn flat_field_renders_constant() {
        let f = v_field(100.0, 0.0);
        let img = render_image(&f, &RenderConfig::noiseless(20, 10, [32.44, 35.97]), &mut seed::stream(0, "r", 0));
        assert!(img.pixels.iter().all(|&p| p == img.pixels[0]));
        assert_eq!(img.pixels[0], 128);
    }

    #[test]
    fn stripe_count_matches_period_above_nyquist() {
        // period of 4 pixels: 64 rows hold 16 cycles
        let pitch = 32.44;
        let f = v_field(4.0 * pitch, 10.0);
        let img = render_image(&f, &RenderConfig::noiseless(64, 4, [pitch, 35.97]), &mut seed::stream(0, "r", 0));
        let column: Vec<f64> = (0..64).map(|r| f64::from(img.pixel(r, 0)[0])).collect();
        let mean = column.iter().sum::<f64>() / 64.0;
        let peaks = (0..64)
            .filter(|&r| column[r] > mean && column[r] >= column[(r + 63) % 64] && column[r] > column[(r + 1) % 64])
            .count();
        assert_eq!(peaks, 16);
    }
}
