use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::net::VisTaNet;
use crate::autodiff::{Tape, Tensor};
use crate::dataset::{window_sweep, Dataset, TactileWindow, TextureImage, CHANNELS};
use crate::error::{Error, Result};
use crate::nn::{lr_schedule, Adam};
use crate::seed;
use crate::streams::TactileConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub split_ratio: f64,
    /// Master seed of a run: split, init, sampling, augmentation and dropout.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            base_lr: 1e-3,
            lr_decay: 0.1,
            decay_period: 25,
            split_ratio: 0.8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The published recipe: 100 epochs of batch 64.
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.decay_period == 0 {
            return Err(Error::Config("batch_size and decay_period must be >= 1".into()));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0 && self.lr_decay.is_finite() && self.lr_decay > 0.0) {
            return Err(Error::Config("base_lr must be >= 0 and lr_decay > 0".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        Ok(())
    }

    /// Seed of the parameter initialization streams.
    pub fn init_seed(&self) -> u64 {
        seed::derive(self.seed, "init", 0)
    }

    /// Seed of the train/test split.
    pub fn split_seed(&self) -> u64 {
        seed::derive(self.seed, "data", 0)
    }
}

/// One training pair: an item, one of its images, and one of its windows
/// (indexed over all of the item's sweeps).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairRef {
    pub item: usize,
    pub image: usize,
    pub window: usize,
}

/// Inputs for one step. Row `i` of each tensor comes from `pairs[i]`.
#[derive(Debug, Clone)]
pub struct PairedBatch {
    pub crops: Option<Tensor>,
    pub windows: Option<Tensor>,
    pub labels: Vec<usize>,
    pub pairs: Vec<PairRef>,
}

/// All windows of an item, sweep after sweep.
pub fn item_windows(data: &Dataset, item: usize, cfg: &TactileConfig) -> Result<Vec<TactileWindow>> {
    let mut out = Vec::new();
    for sweep in &data.sweeps[item] {
        out.extend(window_sweep(sweep, cfg.window, cfg.stride)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("item {} has no sweeps", data.manifest.records[item].item_id)));
    }
    Ok(out)
}

fn stack_windows(windows: &[&TactileWindow]) -> Result<Tensor> {
    let w = windows.first().map_or(0, |w| w.rows.len());
    let data: Vec<f64> = windows.iter().flat_map(|w| w.flat()).collect();
    Tensor::new(&[windows.len(), w, CHANNELS], data)
}

/// Builds a batch; crops are augmented with `augment` and windows are
/// included only for the streams the model has.
pub fn assemble_batch(
    net: &VisTaNet,
    data: &Dataset,
    windows: &[Vec<TactileWindow>],
    pairs: &[PairRef],
    augment: Option<&mut seed::Rng>,
) -> Result<PairedBatch> {
    let labels = pairs.iter().map(|p| data.manifest.records[p.item].class_id).collect();
    let crops = match net.visual() {
        Some(vs) => {
            let imgs: Vec<&TextureImage> = pairs.iter().map(|p| &data.images[p.item][p.image]).collect();
            Some(vs.prepare(&imgs, augment)?)
        }
        None => None,
    };
    let windows = match net.tactile() {
        Some(_) => {
            let ws: Vec<&TactileWindow> = pairs.iter().map(|p| &windows[p.item][p.window]).collect();
            Some(stack_windows(&ws)?)
        }
        None => None,
    };
    Ok(PairedBatch {
        crops,
        windows,
        labels,
        pairs: pairs.to_vec(),
    })
}

/// The pairs of one epoch, already shuffled and split into batches. Depends
/// only on the seed, the epoch, and the dataset, never on the model.
pub fn epoch_batches(
    data: &Dataset,
    items: &[usize],
    windows: &[Vec<TactileWindow>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Vec<Vec<PairRef>> {
    let mut rng = seed::stream(cfg.seed, "train", epoch as u64);
    let mut order = items.to_vec();
    order.shuffle(&mut rng);
    let pairs: Vec<PairRef> = order
        .into_iter()
        .map(|item| PairRef {
            item,
            image: rng.random_range(0..data.images[item].len()),
            window: rng.random_range(0..windows[item].len()),
        })
        .collect();
    pairs.chunks(cfg.batch_size).map(<[PairRef]>::to_vec).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainOutcome {
    /// Mean training loss of each epoch.
    pub loss_curve: Vec<f64>,
    /// Fraction of training pairs classified correctly during each epoch.
    pub train_accuracy: Vec<f64>,
    /// Every batch of every epoch, in order.
    pub batches: Vec<Vec<PairRef>>,
}

/// Trains `net` in place on the records `items`. `on_epoch` sees
/// `(epoch, mean loss)` after each epoch.
pub fn train(
    net: &mut VisTaNet,
    data: &Dataset,
    items: &[usize],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if data.images.len() != data.manifest.records.len() || data.sweeps.len() != data.manifest.records.len() {
        return Err(Error::Data("dataset files do not match its manifest".into()));
    }
    let windows: Vec<Vec<TactileWindow>> = (0..data.manifest.records.len())
        .map(|i| {
            if items.contains(&i) {
                item_windows(data, i, &net.config.tactile)
            } else {
                Ok(Vec::new())
            }
        })
        .collect::<Result<_>>()?;
    if let Some(&i) = items.iter().find(|&&i| data.images[i].is_empty()) {
        return Err(Error::Data(format!("item {} has no images", data.manifest.records[i].item_id)));
    }

    let mut adam = Adam::new(&net.store);
    let mut outcome = TrainOutcome::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_decay, cfg.decay_period);
        let mut augment = seed::stream(cfg.seed, "augment", epoch as u64);
        let mut dropout = seed::stream(cfg.seed, "dropout", epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for (b, pairs) in epoch_batches(data, items, &windows, cfg, epoch).into_iter().enumerate() {
            let batch = assemble_batch(net, data, &windows, &pairs, Some(&mut augment))?;
            tape.clear();
            let out = net.forward(&mut tape, batch.crops, batch.windows, Some(&mut dropout))?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let l = tape.value(loss)[0];
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            correct += argmax_rows(tape.value(out.logits), crate::dataset::NUM_CLASSES)
                .zip(&batch.labels)
                .filter(|(p, &y)| *p == y)
                .count();
            seen += batch.labels.len();
            loss_sum += l * batch.labels.len() as f64;
            tape.backward(loss)?;
            net.store.zero_grad();
            tape.export_grads(&mut net.store)?;
            adam.step(&mut net.store, lr)?;
            outcome.batches.push(pairs);
        }
        let mean = loss_sum / seen as f64;
        outcome.loss_curve.push(mean);
        outcome.train_accuracy.push(correct as f64 / seen as f64);
        on_epoch(epoch, mean);
    }
    Ok(outcome)
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(values: &[f64], width: usize) -> impl Iterator<Item = usize> + '_ {
    values.chunks(width).map(|row| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0
    })
}
