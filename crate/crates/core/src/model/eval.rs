use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::net::VisTaNet;
use super::train::{argmax_rows, item_windows};
use crate::autodiff::{Tape, Tensor};
use crate::dataset::{Dataset, TactileWindow, TextureImage, CHANNELS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::synthgen::GRANULARITIES;

/// Environment variable capping the number of evaluation workers.
pub const THREADS_ENV: &str = "VISTAFUSE_THREADS";

/// Worker count: `VISTAFUSE_THREADS` if set and positive, else the number of
/// available cores.
pub fn eval_threads() -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n > 0 => n,
        _ => cores,
    }
}

/// One scored test window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub predicted: usize,
    pub weights: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Model family: a fusion strategy, `visual`, or `tactile`.
    pub model: String,
    pub accuracy: f64,
    pub correct: u64,
    pub total: u64,
    pub class_names: Vec<String>,
    /// `None` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Rows are true classes, columns predictions.
    pub confusion: Vec<Vec<u64>>,
    /// Mean `(p_visual, q_tactile)` per class; present for attention fusion.
    pub per_class_attention: Option<Vec<Option<[f64; 2]>>>,
    pub loss_curve: Vec<f64>,
}

impl MetricsReport {
    /// Builds the report from scored windows, in order.
    pub fn from_predictions(model: &str, class_names: Vec<String>, preds: &[Prediction], loss_curve: Vec<f64>) -> Self {
        let mut confusion = vec![vec![0u64; NUM_CLASSES]; NUM_CLASSES];
        let mut att_sum = vec![[0.0f64; 2]; NUM_CLASSES];
        let mut att_n = vec![0u64; NUM_CLASSES];
        let mut any_weights = false;
        for p in preds {
            confusion[p.label][p.predicted] += 1;
            if let Some([a, b]) = p.weights {
                any_weights = true;
                att_sum[p.label][0] += a;
                att_sum[p.label][1] += b;
                att_n[p.label] += 1;
            }
        }
        let correct: u64 = (0..NUM_CLASSES).map(|c| confusion[c][c]).sum();
        let total = preds.len() as u64;
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        let per_class_attention = any_weights.then(|| {
            att_sum
                .iter()
                .zip(&att_n)
                .map(|(s, &n)| (n > 0).then(|| [s[0] / n as f64, s[1] / n as f64]))
                .collect()
        });
        Self {
            model: model.to_string(),
            accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
            correct,
            total,
            class_names,
            per_class_accuracy,
            confusion,
            per_class_attention,
            loss_curve,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// 18×18 counts with class names heading the rows (truth) and columns (prediction).
    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for n in &self.class_names {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for (name, row) in self.class_names.iter().zip(&self.confusion) {
            s.push_str(name);
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Mean accuracy of the classes in granularity columns `cols`, over
    /// classes present in the test set.
    pub fn accuracy_over_columns(&self, cols: &[usize]) -> Option<f64> {
        mean_over_columns(cols, |c| self.per_class_accuracy[c])
    }

    /// Mean tactile weight of the classes in granularity columns `cols`.
    pub fn tactile_weight_over_columns(&self, cols: &[usize]) -> Option<f64> {
        let att = self.per_class_attention.as_ref()?;
        mean_over_columns(cols, |c| att[c].map(|w| w[1]))
    }
}

fn mean_over_columns(cols: &[usize], value: impl Fn(usize) -> Option<f64>) -> Option<f64> {
    let vals: Vec<f64> = (0..NUM_CLASSES)
        .filter(|c| cols.contains(&(c % GRANULARITIES)))
        .filter_map(value)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Scores every window of one item, pairing window `k` with the center crop
/// of image `k mod n_images`.
pub fn score_item(net: &VisTaNet, data: &Dataset, item: usize) -> Result<Vec<Prediction>> {
    let label = data.manifest.records[item].class_id;
    let windows = item_windows(data, item, &net.config.tactile)?;
    let images = &data.images[item];
    if images.is_empty() {
        return Err(Error::Data(format!("item {} has no images", data.manifest.records[item].item_id)));
    }
    let n = windows.len();
    let mut tape = Tape::new();
    let visual = match net.visual() {
        Some(vs) => {
            let refs: Vec<&TextureImage> = images.iter().collect();
            let crops = tape.constant(vs.prepare(&refs, None)?);
            let feats = net.visual_features(&mut tape, crops, None)?;
            // row k of the paired batch is image k mod n_images
            let d = tape.shape(feats)[1];
            let src = tape.value(feats).to_vec();
            let rows: Vec<f64> = (0..n).flat_map(|k| src[(k % images.len()) * d..][..d].to_vec()).collect();
            Some(tape.constant(Tensor::new(&[n, d], rows)?))
        }
        None => None,
    };
    let tactile = match net.tactile() {
        Some(ts) => {
            let data: Vec<f64> = windows.iter().flat_map(TactileWindow::flat).collect();
            let x = tape.constant(Tensor::new(&[n, ts.window(), CHANNELS], data)?);
            Some(net.tactile_features(&mut tape, x, None)?)
        }
        None => None,
    };
    let out = net.head(&mut tape, visual, tactile)?;
    let weights = out.weights.map(|w| tape.value(w).to_vec());
    Ok(argmax_rows(tape.value(out.logits), NUM_CLASSES)
        .enumerate()
        .map(|(k, predicted)| Prediction {
            label,
            predicted,
            weights: weights.as_ref().map(|w| [w[2 * k], w[2 * k + 1]]),
        })
        .collect())
}

/// Scores every window of every item in `items` using up to `threads`
/// workers; predictions come back in item order whatever the worker count.
pub fn predict(net: &VisTaNet, data: &Dataset, items: &[usize], threads: usize) -> Result<Vec<Prediction>> {
    let threads = threads.clamp(1, items.len().max(1));
    let per_item: Vec<Result<Vec<Prediction>>> = if threads == 1 {
        items.iter().map(|&i| score_item(net, data, i)).collect()
    } else {
        let chunk = items.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|&i| score_item(net, data, i)).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        })
    };
    let mut out = Vec::new();
    for r in per_item {
        out.extend(r?);
    }
    Ok(out)
}

/// Inference over the test items: center crops, no dropout.
pub fn evaluate(
    net: &VisTaNet,
    data: &Dataset,
    items: &[usize],
    loss_curve: Vec<f64>,
    threads: usize,
) -> Result<MetricsReport> {
    let preds = predict(net, data, items, threads)?;
    Ok(MetricsReport::from_predictions(
        &net.config.family(),
        data.manifest.class_names(),
        &preds,
        loss_curve,
    ))
}

/// Per-class attention as CSV rows `class_name,p_visual,q_tactile`.
pub fn attention_map_csv(report: &MetricsReport) -> Result<String> {
    let att = attention_of(report)?;
    let mut s = String::from("class_name,p_visual,q_tactile\n");
    for (name, w) in report.class_names.iter().zip(att) {
        match w {
            Some([p, q]) => writeln!(s, "{name},{p:.6},{q:.6}").unwrap(),
            None => writeln!(s, "{name},,").unwrap(),
        }
    }
    Ok(s)
}

/// Binary PGM of the tactile weight laid out as 3 rows (H, V, T) by 6
/// granularity columns; each class is one pixel, 255 meaning all tactile.
/// Classes absent from the test set are 0.
pub fn attention_map_pgm(report: &MetricsReport) -> Result<Vec<u8>> {
    let att = attention_of(report)?;
    let rows = NUM_CLASSES / GRANULARITIES;
    let mut out = format!("P5\n{GRANULARITIES} {rows}\n255\n").into_bytes();
    out.extend(att.iter().map(|w| w.map_or(0, |[_, q]| (q.clamp(0.0, 1.0) * 255.0).round() as u8)));
    Ok(out)
}

fn attention_of(report: &MetricsReport) -> Result<&Vec<Option<[f64; 2]>>> {
    report
        .per_class_attention
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("attention map requested for a `{}` run", report.model)))
}
