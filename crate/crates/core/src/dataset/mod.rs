//! Dataset containers, on-disk formats, tactile windowing, the stratified
//! split, and perspective rectification of photographs.

mod io;
mod rectify;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub use io::{
    load_image, load_manifest, load_sweep_csv, parse_ppm, parse_sweep_csv, save_image, save_manifest,
    save_sweep_csv, write_ppm, write_sweep_csv, MANIFEST_FILE,
};
pub use rectify::{bilinear_rgb, homography, rectify_image, Homography};

/// Number of tactile channels: accelerometer x, y, z then pressure x, y, z.
pub const CHANNELS: usize = 6;

/// Number of classes in the default table (3 milling types × 6 granularities).
pub const NUM_CLASSES: usize = 18;

/// Tactile time series with one row of [`CHANNELS`] values per timestamp (seconds).
#[derive(Debug, Clone, PartialEq)]
pub struct TactileSweep {
    pub times: Vec<f64>,
    pub samples: Vec<[f64; CHANNELS]>,
}

impl TactileSweep {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample rate in Hz, from the first timestamp interval.
    pub fn sample_rate(&self) -> Option<f64> {
        match self.times[..] {
            [t0, t1, ..] if t1 > t0 => Some(1.0 / (t1 - t0)),
            _ => None,
        }
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[c]).collect()
    }
}

/// 8-bit RGB image, row-major, with the physical size of one pixel when known
/// (µm along rows, µm along columns).
#[derive(Debug, Clone, PartialEq)]
pub struct TextureImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
    pub pixel_pitch: Option<[f64; 2]>,
}

impl TextureImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width} RGB image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            pixel_pitch: None,
        })
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Mean of the three channels, scaled to [0, 1].
    pub fn gray(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| (f64::from(p[0]) + f64::from(p[1]) + f64::from(p[2])) / (3.0 * 255.0))
            .collect()
    }
}

/// `W` consecutive rows of a sweep starting at `start`.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileWindow {
    pub start: usize,
    pub rows: Vec<[f64; CHANNELS]>,
}

impl TactileWindow {
    /// Row-major `W·D` values.
    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().flatten().copied()
    }
}

/// Cuts `sweep` into windows of `w` rows starting every `stride` samples;
/// a trailing partial window is dropped.
pub fn window_sweep(sweep: &TactileSweep, w: usize, stride: usize) -> Result<Vec<TactileWindow>> {
    let t = sweep.len();
    if w == 0 {
        return Err(Error::Parameter("window length must be >= 1".into()));
    }
    if t < w {
        return Err(Error::Data(format!("sweep of T={t} samples is shorter than window W={w}")));
    }
    if stride == 0 || stride > t {
        return Err(Error::Parameter(format!("stride must be in [1, {t}], got {stride}")));
    }
    Ok((0..=(t - w) / stride)
        .map(|k| {
            let start = k * stride;
            TactileWindow {
                start,
                rows: sweep.samples[start..start + w].to_vec(),
            }
        })
        .collect())
}

/// Physical length covered by one pixel.
pub fn compute_pixel_pitch(real_length_um: f64, pixels: usize) -> Result<f64> {
    if pixels == 0 {
        return Err(Error::Parameter("pixel count must be >= 1".into()));
    }
    Ok(real_length_um / pixels as f64)
}

/// One specimen's files and labels. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub item_id: String,
    pub class_id: usize,
    pub class_name: String,
    pub specimen_id: String,
    pub images: Vec<String>,
    pub sweeps: Vec<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Checks class ids are in range, item ids are unique, and names map
    /// one-to-one onto ids.
    pub fn validate(&self) -> Result<()> {
        let mut by_id: BTreeMap<usize, &str> = BTreeMap::new();
        let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
        let mut items = std::collections::BTreeSet::new();
        for r in &self.records {
            if r.class_id >= NUM_CLASSES {
                return Err(Error::Data(format!("item {}: class_id {} out of range", r.item_id, r.class_id)));
            }
            if !items.insert(r.item_id.as_str()) {
                return Err(Error::Data(format!("duplicate item_id {}", r.item_id)));
            }
            let name = *by_id.entry(r.class_id).or_insert(&r.class_name);
            let id = *by_name.entry(&r.class_name).or_insert(r.class_id);
            if name != r.class_name || id != r.class_id {
                return Err(Error::Data(format!(
                    "item {}: class {} / {} conflicts with an earlier record",
                    r.item_id, r.class_id, r.class_name
                )));
            }
        }
        Ok(())
    }

    /// Class names indexed by class id; ids with no records get `"class-<id>"`.
    pub fn class_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..NUM_CLASSES).map(|c| format!("class-{c}")).collect();
        for r in &self.records {
            names[r.class_id] = r.class_name.clone();
        }
        names
    }
}

/// A manifest with its images and sweeps loaded, indexed like `manifest.records`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<Vec<TextureImage>>,
    pub sweeps: Vec<Vec<TactileSweep>>,
}

impl Dataset {
    pub fn load(dir: &std::path::Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let mut images = Vec::with_capacity(manifest.records.len());
        let mut sweeps = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            images.push(r.images.iter().map(|p| load_image(&dir.join(p))).collect::<Result<_>>()?);
            sweeps.push(r.sweeps.iter().map(|p| load_sweep_csv(&dir.join(p))).collect::<Result<_>>()?);
        }
        Ok(Self {
            manifest,
            images,
            sweeps,
        })
    }

    /// Writes every file, then the manifest.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        for (i, r) in self.manifest.records.iter().enumerate() {
            for (img, p) in self.images[i].iter().zip(&r.images) {
                save_image(img, &dir.join(p))?;
            }
            for (sw, p) in self.sweeps[i].iter().zip(&r.sweeps) {
                save_sweep_csv(sw, &dir.join(p))?;
            }
        }
        save_manifest(&self.manifest, dir)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    pub roles: BTreeMap<String, Role>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitAssignment {
    /// Record indices of `manifest` with the given role, in manifest order.
    pub fn indices(&self, manifest: &DatasetManifest, role: Role) -> Vec<usize> {
        manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.roles.get(&r.item_id) == Some(&role))
            .map(|(i, _)| i)
            .collect()
    }
}

/// Stratified split by class: each class sends `round(ratio·n)` items to
/// training, clamped so both sides are non-empty.
pub fn split_train_test(manifest: &DatasetManifest, ratio: f64, seed: u64) -> Result<SplitAssignment> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Parameter(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let mut by_class: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for r in &manifest.records {
        by_class.entry(r.class_id).or_default().push(&r.item_id);
    }
    let mut roles = BTreeMap::new();
    for (class, mut items) in by_class {
        let n = items.len();
        if n < 2 {
            return Err(Error::Data(format!("class {class} has {n} item(s); a split needs at least 2")));
        }
        items.sort_unstable();
        items.shuffle(&mut seed::stream(seed, "data/split", class as u64));
        let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
        for (k, id) in items.into_iter().enumerate() {
            roles.insert(id.to_string(), if k < n_train { Role::Train } else { Role::Test });
        }
    }
    Ok(SplitAssignment { roles, ratio, seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sweep(t: usize) -> TactileSweep {
        TactileSweep {
            times: (0..t).map(|k| k as f64 * 0.005).collect(),
            samples: (0..t).map(|k| [k as f64, 1.0, 2.0, 3.0, 4.0, -(k as f64)]).collect(),
        }
    }

    fn manifest(per_class: &[usize]) -> DatasetManifest {
        let mut records = Vec::new();
        for (c, &n) in per_class.iter().enumerate() {
            for j in 0..n {
                records.push(ManifestRecord {
                    item_id: format!("c{c}_{j}"),
                    class_id: c,
                    class_name: format!("C-{c}"),
                    specimen_id: format!("c{c}/{j}"),
                    images: vec![],
                    sweeps: vec![],
                    seed: 0,
                });
            }
        }
        DatasetManifest { records }
    }

    #[test]
    fn window_counts() {
        let w = window_sweep(&sweep(500), 50, 50).unwrap();
        assert_eq!(w.len(), 10);
        assert!(w.iter().all(|w| w.rows.len() == 50));
        assert_eq!(w[3].start, 150);
        assert_eq!(w[3].rows[0][0], 150.0);

        let s = sweep(50);
        for stride in [1, 7, 50] {
            let w = window_sweep(&s, 50, stride).unwrap();
            assert_eq!(w.len(), 1);
            assert_eq!(w[0].rows, s.samples);
        }
        assert_eq!(window_sweep(&sweep(107), 50, 10).unwrap().len(), (107 - 50) / 10 + 1);
        match window_sweep(&sweep(49), 50, 50) {
            Err(Error::Data(m)) => assert!(m.contains("49") && m.contains("50")),
            other => panic!("{other:?}"),
        }
        assert!(window_sweep(&sweep(60), 50, 0).is_err());
    }

    #[test]
    fn pixel_pitch_values() {
        assert!((compute_pixel_pitch(19788.4, 610).unwrap() - 32.44).abs() < 1e-9);
        assert!((compute_pixel_pitch(10000.0, 278).unwrap() - 35.97).abs() < 5e-3);
        assert_eq!(compute_pixel_pitch(100.0, 1).unwrap(), 100.0);
        assert!(compute_pixel_pitch(1.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let m = manifest(&[10; 18]);
        let a = split_train_test(&m, 0.8, 3).unwrap();
        let b = split_train_test(&m, 0.8, 3).unwrap();
        assert_eq!(a, b);
        for c in 0..18 {
            let train = m
                .records
                .iter()
                .filter(|r| r.class_id == c && a.roles[&r.item_id] == Role::Train)
                .count();
            assert_eq!(train, 8);
        }
        assert_ne!(a.roles, split_train_test(&m, 0.8, 4).unwrap().roles);
        assert!(split_train_test(&m, 1.0, 0).is_err());
        assert!(split_train_test(&m, 0.0, 0).is_err());
        assert!(matches!(split_train_test(&manifest(&[3, 1]), 0.8, 0), Err(Error::Data(_))));
    }

    #[test]
    fn manifest_validation() {
        let mut m = manifest(&[2, 2]);
        m.validate().unwrap();
        m.records[1].class_name = "other".into();
        assert!(m.validate().is_err());
        let mut m = manifest(&[1]);
        m.records[0].class_id = 18;
        assert!(m.validate().is_err());
    }
}
