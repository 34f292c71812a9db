use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::eval::{evaluate, MetricsReport};
use super::net::{Modality, ModelConfig, VisTaNet};
use super::train::{train, TrainConfig, TrainOutcome};
use crate::dataset::{split_train_test, Dataset, Role, SplitAssignment};
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;

/// A trained and evaluated model.
pub struct ExperimentRun {
    pub net: VisTaNet,
    pub split: SplitAssignment,
    pub outcome: TrainOutcome,
    pub report: MetricsReport,
}

/// Splits, initializes, trains and evaluates one model.
pub fn run_experiment(
    data: &Dataset,
    model: &ModelConfig,
    cfg: &TrainConfig,
    threads: usize,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<ExperimentRun> {
    cfg.validate()?;
    data.manifest.validate()?;
    let split = split_train_test(&data.manifest, cfg.split_ratio, cfg.split_seed())?;
    let train_items = split.indices(&data.manifest, Role::Train);
    let test_items = split.indices(&data.manifest, Role::Test);
    let seen: BTreeSet<&str> = train_items.iter().map(|&i| data.manifest.records[i].specimen_id.as_str()).collect();
    if let Some(&i) = test_items.iter().find(|&&i| seen.contains(data.manifest.records[i].specimen_id.as_str())) {
        return Err(Error::Data(format!(
            "specimen {} is in both splits",
            data.manifest.records[i].specimen_id
        )));
    }
    let mut net = VisTaNet::new(model, cfg.init_seed())?;
    let outcome = train(&mut net, data, &train_items, cfg, on_epoch)?;
    let report = evaluate(&net, data, &test_items, outcome.loss_curve.clone(), threads)?;
    Ok(ExperimentRun {
        net,
        split,
        outcome,
        report,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub family: String,
    pub seed: u64,
    pub accuracy: f64,
    pub report: MetricsReport,
}

/// Model families of an ablation: the four fusion strategies, then the two
/// single-stream baselines when requested.
fn families(base: &ModelConfig, baselines: bool) -> Vec<ModelConfig> {
    let mut out: Vec<ModelConfig> = FusionStrategy::ALL
        .iter()
        .map(|&fusion| ModelConfig {
            fusion,
            modality: Modality::Both,
            ..base.clone()
        })
        .collect();
    if baselines {
        for modality in [Modality::Visual, Modality::Tactile] {
            out.push(ModelConfig {
                modality,
                ..base.clone()
            });
        }
    }
    out
}

/// Trains every family under every seed. Within a seed all families share
/// the split and the per-batch sampling; this is checked, not assumed.
pub fn ablate(
    data: &Dataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    baselines: bool,
    threads: usize,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let mut reference: Option<(SplitAssignment, TrainOutcome)> = None;
        for model in families(base, baselines) {
            let family = model.family();
            let run = run_experiment(data, &model, &cfg, threads, &mut |_, _| {})?;
            match &reference {
                None => reference = Some((run.split.clone(), run.outcome.clone())),
                Some((split, outcome)) => {
                    if *split != run.split || outcome.batches != run.outcome.batches {
                        return Err(Error::Contract(format!("{family} saw different data than the first family")));
                    }
                }
            }
            log(&format!("seed {seed} {family}: accuracy {:.4}", run.report.accuracy));
            rows.push(AblationRow {
                family,
                seed,
                accuracy: run.report.accuracy,
                report: run.report,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FamilySummary {
    pub family: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub sd: f64,
    pub runs: usize,
}

/// Mean and spread per family, in first-seen order.
pub fn summarize(rows: &[AblationRow]) -> Vec<FamilySummary> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.family.as_str()) {
            order.push(&r.family);
        }
    }
    order
        .into_iter()
        .map(|family| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.family == family).map(|r| r.accuracy).collect();
            let n = acc.len();
            let mean = acc.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            FamilySummary {
                family: family.to_string(),
                mean,
                sd,
                runs: n,
            }
        })
        .collect()
}

/// `strategy,seed,accuracy` with one row per run, then one `mean` row per family.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("strategy,seed,accuracy\n");
    for r in rows {
        writeln!(s, "{},{},{:.6}", r.family, r.seed, r.accuracy).unwrap();
    }
    for f in summarize(rows) {
        writeln!(s, "{},mean,{:.6}", f.family, f.mean).unwrap();
    }
    s
}
