//! Synthetic paired visuotactile data.
//!
//! Each specimen is a procedural [`HeightField`] with grooves of a class
//! specific direction and period. Images are shaded renders of the field at a
//! fixed pixel pitch; sweeps drag a simulated probe across it.

mod field;
mod render;
mod sweep;

use std::fmt;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetManifest, ManifestRecord, TactileSweep, TextureImage};
use crate::error::{Error, Result};
use crate::seed;

pub use field::{make_height_field, HeightField, TURNING_CENTER_UM};
pub use render::{render_image, RenderConfig};
pub use sweep::{random_path, simulate_sweep, SweepConfig, SweepPath};

/// Specimen size (µm along length, width).
pub const SPECIMEN_EXTENT_UM: (f64, f64) = (19_788.4, 10_000.0);
/// Full-specimen image size (rows along length, columns along width).
pub const IMAGE_ROWS: usize = 610;
pub const IMAGE_COLS: usize = 278;
/// µm per pixel along rows and columns of a full-specimen image.
pub const PIXEL_PITCH_UM: [f64; 2] = [
    SPECIMEN_EXTENT_UM.0 / IMAGE_ROWS as f64,
    SPECIMEN_EXTENT_UM.1 / IMAGE_COLS as f64,
];
/// Groove periods (µm) from coarsest to finest granularity. The last two are
/// shorter than two pixels, so their images alias.
pub const DEFAULT_PERIODS_UM: [f64; 6] = [320.0, 200.0, 128.0, 80.0, 32.0, 16.0];
pub const GRANULARITIES: usize = 6;

/// Machining pattern: horizontal milling, vertical milling, or turning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Milling {
    H = 0,
    V = 1,
    T = 2,
}

impl Milling {
    pub const ALL: [Milling; 3] = [Milling::H, Milling::V, Milling::T];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "H" | "h" => Some(Milling::H),
            "V" | "v" => Some(Milling::V),
            "T" | "t" => Some(Milling::T),
            _ => None,
        }
    }
}

impl fmt::Display for Milling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Milling::H => "H",
            Milling::V => "V",
            Milling::T => "T",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub milling: Milling,
    pub granularity_index: usize,
    pub period_um: f64,
    pub amplitude_um: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl SurfaceSpec {
    pub fn class_id(&self) -> usize {
        GRANULARITIES * self.milling as usize + self.granularity_index
    }
}

/// Period and amplitude for each of the 18 classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassTable {
    pub periods_um: Vec<f64>,
    /// Groove amplitude as a fraction of the period.
    pub amplitude_ratio: f64,
    /// Half-width of the per-specimen relative amplitude variation.
    pub amplitude_jitter: f64,
    pub noise_level: f64,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self {
            periods_um: DEFAULT_PERIODS_UM.to_vec(),
            amplitude_ratio: 0.05,
            amplitude_jitter: 0.2,
            noise_level: 0.2,
        }
    }
}

impl ClassTable {
    pub fn validate(&self) -> Result<()> {
        if self.periods_um.len() != GRANULARITIES {
            return Err(Error::Config(format!("class table needs {GRANULARITIES} periods")));
        }
        if self.periods_um.windows(2).any(|w| !(w[1] < w[0])) || !(self.periods_um[GRANULARITIES - 1] > 0.0) {
            return Err(Error::Config("periods must be positive and strictly decreasing".into()));
        }
        if !(self.amplitude_ratio >= 0.0 && (0.0..1.0).contains(&self.amplitude_jitter) && self.noise_level >= 0.0) {
            return Err(Error::Config("amplitude and noise settings must be non-negative".into()));
        }
        Ok(())
    }

    pub fn class_name(&self, class_id: usize) -> String {
        let m = Milling::from_index(class_id / GRANULARITIES).expect("class id in range");
        format!("{m}-{}", self.periods_um[class_id % GRANULARITIES])
    }

    /// Nominal surface for a class.
    pub fn spec(&self, class_id: usize, seed: u64) -> SurfaceSpec {
        let g = class_id % GRANULARITIES;
        let period = self.periods_um[g];
        SurfaceSpec {
            milling: Milling::from_index(class_id / GRANULARITIES).expect("class id in range"),
            granularity_index: g,
            period_um: period,
            amplitude_um: self.amplitude_ratio * period,
            noise_level: self.noise_level,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub specimens_per_class: usize,
    pub sweeps_per_specimen: usize,
    pub images_per_specimen: usize,
    pub seed: u64,
    /// Class ids to generate; empty means all.
    pub classes: Vec<usize>,
    pub lattice_pitch_um: f64,
    pub table: ClassTable,
    pub render: RenderConfig,
    pub sweep: SweepConfig,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            specimens_per_class: 10,
            sweeps_per_specimen: 2,
            images_per_specimen: 2,
            seed: 0,
            classes: Vec::new(),
            lattice_pitch_um: 2.0,
            table: ClassTable::default(),
            render: RenderConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl GenerateConfig {
    pub fn class_ids(&self) -> Vec<usize> {
        if self.classes.is_empty() {
            (0..dataset::NUM_CLASSES).collect()
        } else {
            self.classes.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.specimens_per_class == 0 || self.sweeps_per_specimen == 0 || self.images_per_specimen == 0 {
            return Err(Error::Parameter("specimen, sweep and image counts must be >= 1".into()));
        }
        if let Some(c) = self.classes.iter().find(|&&c| c >= dataset::NUM_CLASSES) {
            return Err(Error::Parameter(format!("class id {c} out of range")));
        }
        self.table.validate()
    }
}

/// Seed of one specimen. It depends only on the master seed, the class, and
/// the specimen index, so any subset of the dataset regenerates identically.
pub fn specimen_seed(master_seed: u64, class_id: usize, index: usize) -> u64 {
    seed::derive(master_seed, "data/specimen", ((class_id as u64) << 32) | index as u64)
}

/// Everything generated for one specimen.
pub struct Specimen {
    pub record: ManifestRecord,
    pub field: HeightField,
    pub images: Vec<TextureImage>,
    pub sweeps: Vec<TactileSweep>,
}

pub fn generate_specimen(cfg: &GenerateConfig, class_id: usize, index: usize) -> Result<Specimen> {
    let seed = specimen_seed(cfg.seed, class_id, index);
    let mut spec = cfg.table.spec(class_id, seed);
    let mut rng = seed::stream(seed, "field", 0);
    if cfg.table.amplitude_jitter > 0.0 {
        spec.amplitude_um *= 1.0 + rng.random_range(-cfg.table.amplitude_jitter..cfg.table.amplitude_jitter);
    }
    let field = make_height_field(&spec, SPECIMEN_EXTENT_UM, cfg.lattice_pitch_um, &mut rng)?;
    let class_name = cfg.table.class_name(class_id);
    let item_id = format!("{class_name}_{index:03}");
    let images: Vec<TextureImage> = (0..cfg.images_per_specimen)
        .map(|k| render_image(&field, &cfg.render, &mut seed::stream(seed, "image", k as u64)))
        .collect();
    let sweeps = (0..cfg.sweeps_per_specimen)
        .map(|k| {
            let mut rng = seed::stream(seed, "sweep", k as u64);
            let path = random_path(&field, &cfg.sweep, &mut rng)?;
            simulate_sweep(&field, &path, &cfg.sweep, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let record = ManifestRecord {
        images: (0..images.len()).map(|k| format!("images/{item_id}_i{k}.ppm")).collect(),
        sweeps: (0..sweeps.len()).map(|k| format!("sweeps/{item_id}_s{k}.csv")).collect(),
        item_id,
        class_id,
        class_name,
        specimen_id: format!("specimen-{class_id:02}-{index:03}"),
        seed,
    };
    Ok(Specimen {
        record,
        field,
        images,
        sweeps,
    })
}

/// Generates the dataset in memory.
pub fn generate(cfg: &GenerateConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut data = Dataset::default();
    for class_id in cfg.class_ids() {
        for j in 0..cfg.specimens_per_class {
            let s = generate_specimen(cfg, class_id, j)?;
            data.manifest.records.push(s.record);
            data.images.push(s.images);
            data.sweeps.push(s.sweeps);
        }
    }
    Ok(data)
}

/// Generates the dataset and writes it under `out_dir`.
pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<DatasetManifest> {
    let data = generate(cfg)?;
    data.save(out_dir)?;
    Ok(data.manifest)
}
