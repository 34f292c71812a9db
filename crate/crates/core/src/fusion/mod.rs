//! Fusion operators combining visual features `xa` and tactile features `xb`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{init_uniform, Activation};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Sum,
    Max,
    Concat,
    Attention,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [
        FusionStrategy::Sum,
        FusionStrategy::Max,
        FusionStrategy::Concat,
        FusionStrategy::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Sum => "sum",
            FusionStrategy::Max => "max",
            FusionStrategy::Concat => "concat",
            FusionStrategy::Attention => "attention",
        }
    }

    /// Width of the fused feature for stream width `d_f`.
    pub fn output_width(self, d_f: usize) -> usize {
        match self {
            FusionStrategy::Concat => 2 * d_f,
            _ => d_f,
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion strategy `{s}` (sum, max, concat, attention)")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FusionResult {
    pub fused: Var,
    /// Per-sample `(p, q)` attention on the visual and tactile tokens.
    pub weights: Option<Var>,
    /// Output of the tactile query token; computed but not used downstream.
    pub y_b: Option<Var>,
}

impl FusionResult {
    fn plain(fused: Var) -> Self {
        Self {
            fused,
            weights: None,
            y_b: None,
        }
    }
}

fn check_same(tape: &Tape, xa: Var, xb: Var) -> Result<()> {
    let (sa, sb) = (tape.shape(xa), tape.shape(xb));
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension(format!(
            "fusion needs equal [batch, width] features, got widths {} and {} (shapes {sa:?}, {sb:?})",
            sa.last().unwrap_or(&0),
            sb.last().unwrap_or(&0)
        )));
    }
    Ok(())
}

pub fn fuse_sum(tape: &mut Tape, xa: Var, xb: Var) -> Result<FusionResult> {
    check_same(tape, xa, xb)?;
    Ok(FusionResult::plain(tape.add(xa, xb)?))
}

/// Elementwise maximum; ties send the gradient to `xa`.
pub fn fuse_max(tape: &mut Tape, xa: Var, xb: Var) -> Result<FusionResult> {
    check_same(tape, xa, xb)?;
    Ok(FusionResult::plain(tape.maximum(xa, xb)?))
}

/// `[xa | xb]` along the feature axis.
pub fn fuse_concat(tape: &mut Tape, xa: Var, xb: Var) -> Result<FusionResult> {
    let (sa, sb) = (tape.shape(xa), tape.shape(xb));
    if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
        return Err(Error::Dimension(format!("concat fusion of batches {sa:?} and {sb:?}")));
    }
    Ok(FusionResult::plain(tape.concat_last(xa, xb)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    pub heads: usize,
    /// Total query/key width across heads; 0 means the feature width.
    pub d_k: usize,
    pub learned_values: bool,
    /// Multiplies the initial query projection; 0 starts fusion as the plain
    /// average of the two features.
    pub query_init_scale: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 1,
            d_k: 0,
            learned_values: false,
            query_init_scale: 0.0,
        }
    }
}

/// Scaled dot-product self-attention over a short token sequence.
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: Option<ParamId>,
    pub heads: usize,
    d_model: usize,
    d_k: usize,
}

pub struct AttentionOutput {
    /// `[b, n, d_v]`
    pub output: Var,
    /// One `[b, n, n]` row-stochastic matrix per head.
    pub attention: Vec<Var>,
}

impl AttentionBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, cfg: &AttentionConfig, init_seed: u64) -> Result<Self> {
        let d_k = if cfg.d_k == 0 { d_model } else { cfg.d_k };
        if cfg.heads == 0 || d_k % cfg.heads != 0 || d_model % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide both d_k = {d_k} and the feature width {d_model}",
                cfg.heads
            )));
        }
        if !(cfg.query_init_scale.is_finite() && cfg.query_init_scale >= 0.0) {
            return Err(Error::Config(format!("query_init_scale must be >= 0, got {}", cfg.query_init_scale)));
        }
        let mut param = |suffix: &str, cols: usize, scale: f64| {
            let full = format!("{name}.{suffix}");
            let mut rng = seed::stream(init_seed, &format!("init/{full}"), 0);
            let mut w = init_uniform(&[d_model, cols], d_model, Activation::Linear, &mut rng);
            w.data_mut().iter_mut().for_each(|v| *v *= scale);
            store.add(full, w)
        };
        let w_q = param("w_q", d_k, cfg.query_init_scale)?;
        let w_k = param("w_k", d_k, 1.0)?;
        let w_v = if cfg.learned_values { Some(param("w_v", d_model, 1.0)?) } else { None };
        Ok(Self {
            w_q,
            w_k,
            w_v,
            heads: cfg.heads,
            d_model,
            d_k,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_k
    }

    /// `A = softmax(Q·Kᵀ/√d_head)` and `A·V` per head, heads concatenated.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<AttentionOutput> {
        let s = tape.shape(h).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] != self.d_model {
            return Err(Error::Dimension(format!(
                "attention expects [b, n, {}], got {s:?}",
                self.d_model
            )));
        }
        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let q = tape.matmul(h, wq)?;
        let k = tape.matmul(h, wk)?;
        let v = match self.w_v {
            Some(id) => {
                let wv = tape.param(store, id);
                tape.matmul(h, wv)?
            }
            None => h,
        };
        let dh = self.d_k / self.heads;
        let dv = self.d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut attention = Vec::with_capacity(self.heads);
        let mut output: Option<Var> = None;
        for head in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.narrow_last(q, head * dh, dh)?,
                    tape.narrow_last(k, head * dh, dh)?,
                    tape.narrow_last(v, head * dv, dv)?,
                )
            };
            let kt = tape.transpose_last2(kh)?;
            let logits = tape.batch_matmul(qh, kt)?;
            let logits = tape.scale(logits, scale);
            let a = tape.softmax(logits, 2)?;
            let out = tape.batch_matmul(a, vh)?;
            output = Some(match output {
                None => out,
                Some(prev) => tape.concat_last(prev, out)?,
            });
            attention.push(a);
        }
        Ok(AttentionOutput {
            output: output.expect("at least one head"),
            attention,
        })
    }
}

/// Attention over the two-token sequence `[xa; xb]`. The fused feature is the
/// output at the visual token, `p·v_a + q·v_b`, with `(p, q)` its attention
/// row (averaged over heads).
pub fn fuse_attention(tape: &mut Tape, store: &ParamStore, blk: &AttentionBlock, xa: Var, xb: Var) -> Result<FusionResult> {
    check_same(tape, xa, xb)?;
    let (b, d) = (tape.shape(xa)[0], tape.shape(xa)[1]);
    let pair = tape.concat_last(xa, xb)?;
    let h = tape.reshape(pair, &[b, 2, d])?;
    let out = blk.forward(tape, store, h)?;
    let width = tape.shape(out.output)[2];
    let flat = tape.reshape(out.output, &[b, 2 * width])?;
    let y_a = tape.narrow_last(flat, 0, width)?;
    let y_b = tape.narrow_last(flat, width, width)?;

    let mut weights = vec![0.0; b * 2];
    for &a in &out.attention {
        for (w, row) in weights.chunks_exact_mut(2).zip(tape.value(a).chunks_exact(4)) {
            w[0] += row[0] / blk.heads as f64;
            w[1] += row[1] / blk.heads as f64;
        }
    }
    let weights = tape.constant(Tensor::new(&[b, 2], weights)?);
    Ok(FusionResult {
        fused: y_a,
        weights: Some(weights),
        y_b: Some(y_b),
    })
}
