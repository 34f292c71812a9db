use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::dataset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::fusion::{fuse_attention, fuse_concat, fuse_max, fuse_sum, AttentionBlock, AttentionConfig, FusionStrategy};
use crate::nn::{Activation, DenseModule};
use crate::seed::Rng;
use crate::streams::{AugmentConfig, TactileConfig, TactileStream, VisualConfig, VisualStream};

/// Which inputs feed the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Both,
    Visual,
    Tactile,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Both => "both",
            Modality::Visual => "visual",
            Modality::Tactile => "tactile",
        }
    }

    pub fn uses_visual(self) -> bool {
        self != Modality::Tactile
    }

    pub fn uses_tactile(self) -> bool {
        self != Modality::Visual
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Modality::Both),
            "visual" => Ok(Modality::Visual),
            "tactile" => Ok(Modality::Tactile),
            _ => Err(Error::Config(format!("unknown modality `{s}` (both, visual, tactile)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub fusion: FusionStrategy,
    pub modality: Modality,
    /// Feature width of both streams.
    pub d_f: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
    pub visual: VisualConfig,
    pub augment: AugmentConfig,
    pub tactile: TactileConfig,
    pub attention: AttentionConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionStrategy::Attention,
            modality: Modality::Both,
            d_f: 64,
            classifier_hidden: 64,
            dropout: 0.2,
            visual: VisualConfig::default(),
            augment: AugmentConfig::default(),
            tactile: TactileConfig::default(),
            attention: AttentionConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Short label: the fusion strategy, or `visual` / `tactile` for one stream.
    pub fn family(&self) -> String {
        match self.modality {
            Modality::Both => self.fusion.name().to_string(),
            m => m.name().to_string(),
        }
    }

    pub fn attention_active(&self) -> bool {
        self.modality == Modality::Both && self.fusion == FusionStrategy::Attention
    }
}

/// Two-stream network: visual and tactile features, a fusion operator, and a
/// classifier of two linear layers (no activation between them) over the 18
/// classes.
#[derive(Debug, Clone)]
pub struct VisTaNet {
    pub store: ParamStore,
    pub config: ModelConfig,
    visual: Option<VisualStream>,
    tactile: Option<TactileStream>,
    attention: Option<AttentionBlock>,
    classifier: [DenseModule; 2],
}

pub struct ForwardOutput {
    pub logits: Var,
    /// `[b, 2]` per-sample `(p, q)` for attention fusion.
    pub weights: Option<Var>,
}

impl VisTaNet {
    pub fn new(config: &ModelConfig, init_seed: u64) -> Result<Self> {
        if config.d_f == 0 || config.classifier_hidden == 0 {
            return Err(Error::Config("feature and classifier widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", config.dropout)));
        }
        let mut store = ParamStore::new();
        let visual = if config.modality.uses_visual() {
            Some(VisualStream::new(
                &mut store,
                &config.visual,
                config.augment.clone(),
                config.d_f,
                config.dropout,
                init_seed,
            )?)
        } else {
            None
        };
        let tactile = if config.modality.uses_tactile() {
            Some(TactileStream::new(&mut store, &config.tactile, config.d_f, config.dropout, init_seed)?)
        } else {
            None
        };
        let attention = if config.attention_active() {
            Some(AttentionBlock::new(&mut store, "fusion.attention", config.d_f, &config.attention, init_seed)?)
        } else {
            None
        };
        let d_in = match config.modality {
            Modality::Both => config.fusion.output_width(config.d_f),
            _ => config.d_f,
        };
        let classifier = [
            DenseModule::new(&mut store, "classifier.0", d_in, config.classifier_hidden, Activation::Linear, 0.0, init_seed)?,
            DenseModule::new(&mut store, "classifier.1", config.classifier_hidden, NUM_CLASSES, Activation::Linear, 0.0, init_seed)?,
        ];
        Ok(Self {
            store,
            config: config.clone(),
            visual,
            tactile,
            attention,
            classifier,
        })
    }

    pub fn visual(&self) -> Option<&VisualStream> {
        self.visual.as_ref()
    }

    pub fn tactile(&self) -> Option<&TactileStream> {
        self.tactile.as_ref()
    }

    pub fn attention(&self) -> Option<&AttentionBlock> {
        self.attention.as_ref()
    }

    /// Visual features of prepared crops `[b, c, c, 3]`.
    pub fn visual_features(&self, tape: &mut Tape, crops: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let vs = self.visual.as_ref().ok_or_else(|| Error::Contract("model has no visual stream".into()))?;
        vs.encode(tape, &self.store, crops, rng)
    }

    /// Tactile features of windows `[b, W, D]`.
    pub fn tactile_features(&self, tape: &mut Tape, windows: Var, rng: Option<&mut Rng>) -> Result<Var> {
        let ts = self.tactile.as_ref().ok_or_else(|| Error::Contract("model has no tactile stream".into()))?;
        ts.forward(tape, &self.store, windows, rng)
    }

    /// Fusion and classifier on stream features; each present feature is `[b, d_f]`.
    pub fn head(&self, tape: &mut Tape, visual: Option<Var>, tactile: Option<Var>) -> Result<ForwardOutput> {
        let (features, weights) = match (self.config.modality, visual, tactile) {
            (Modality::Both, Some(xa), Some(xb)) => {
                let r = match self.config.fusion {
                    FusionStrategy::Sum => fuse_sum(tape, xa, xb)?,
                    FusionStrategy::Max => fuse_max(tape, xa, xb)?,
                    FusionStrategy::Concat => fuse_concat(tape, xa, xb)?,
                    FusionStrategy::Attention => {
                        fuse_attention(tape, &self.store, self.attention.as_ref().expect("built"), xa, xb)?
                    }
                };
                (r.fused, r.weights)
            }
            (Modality::Visual, Some(xa), _) => (xa, None),
            (Modality::Tactile, _, Some(xb)) => (xb, None),
            (m, v, t) => {
                return Err(Error::Contract(format!(
                    "{m} model given visual={} tactile={}",
                    v.is_some(),
                    t.is_some()
                )))
            }
        };
        let hidden = self.classifier[0].forward(tape, &self.store, features, None)?;
        let logits = self.classifier[1].forward(tape, &self.store, hidden, None)?;
        Ok(ForwardOutput { logits, weights })
    }

    /// Full forward pass on prepared inputs. Dropout is active only with `rng`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        crops: Option<Tensor>,
        windows: Option<Tensor>,
        mut rng: Option<&mut Rng>,
    ) -> Result<ForwardOutput> {
        let v = match (self.visual.is_some(), crops) {
            (true, Some(c)) => {
                let x = tape.constant(c);
                Some(self.visual_features(tape, x, rng.as_deref_mut())?)
            }
            (true, None) => return Err(Error::Contract("visual input missing".into())),
            (false, _) => None,
        };
        let t = match (self.tactile.is_some(), windows) {
            (true, Some(w)) => {
                let x = tape.constant(w);
                Some(self.tactile_features(tape, x, rng.as_deref_mut())?)
            }
            (true, None) => return Err(Error::Contract("tactile input missing".into())),
            (false, _) => None,
        };
        self.head(tape, v, t)
    }
}
