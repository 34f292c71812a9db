//! The four commands behind the CLI. Each writes its artifacts under the
//! configured directories and returns what the CLI prints.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::dataset::{split_train_test, Dataset, Role, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::{
    ablate, ablation_csv, attention_map_csv, attention_map_pgm, evaluate, run_experiment, summarize, AblationRow,
    MetricsReport, VisTaNet,
};
use crate::nn::checkpoint;
use crate::synthgen::generate_dataset;

pub const RUN_JSON: &str = "run.json";
pub const RUN_TOML: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.json";
pub const CONFUSION: &str = "confusion.csv";
pub const ATTENTION_CSV: &str = "attention_map.csv";
pub const ATTENTION_PGM: &str = "attention_map.pgm";
pub const ABLATION: &str = "ablation.csv";

/// Process exit status for an error: 2 config, 3 I/O or malformed files,
/// 4 non-finite loss, 5 checkpoint mismatch, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::NonFiniteLoss { .. } => 4,
        Error::CheckpointMismatch(_) => 5,
        _ => 1,
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the resolved config as JSON and as TOML; the TOML file can be fed
/// back with `--config` to repeat the run.
pub fn write_run_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    write(&dir.join(RUN_JSON), cfg.to_json())?;
    write(&dir.join(RUN_TOML), cfg.to_toml())
}

/// Metrics JSON, confusion CSV, and the attention map when the report has one.
pub fn write_report(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = vec![dir.join(METRICS), dir.join(CONFUSION)];
    write(&out[0], report.to_json())?;
    write(&out[1], report.confusion_csv())?;
    if report.per_class_attention.is_some() {
        out.push(dir.join(ATTENTION_CSV));
        write(&out[2], attention_map_csv(report)?)?;
        out.push(dir.join(ATTENTION_PGM));
        write(&out[3], attention_map_pgm(report)?)?;
    }
    Ok(out)
}

/// Generates the dataset; returns a per-class item count table.
pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<String> {
    let manifest = generate_dataset(&cfg.generate, &cfg.dataset)?;
    let mut counts = vec![0usize; NUM_CLASSES];
    let mut names = manifest.class_names();
    for r in &manifest.records {
        counts[r.class_id] += 1;
        names[r.class_id] = r.class_name.clone();
    }
    let mut s = String::from("class\titems\n");
    for (c, n) in counts.iter().enumerate().filter(|(_, &n)| n > 0) {
        writeln!(s, "{}\t{n}", names[c]).unwrap();
    }
    writeln!(s, "total\t{}", manifest.records.len()).unwrap();
    Ok(s)
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let data = Dataset::load(&cfg.dataset)?;
    data.manifest.validate()?;
    Ok(data)
}

/// One-line summary of a report.
pub fn report_line(r: &MetricsReport) -> String {
    format!("{}\taccuracy {:.4}\t({}/{} windows)", r.model, r.accuracy, r.correct, r.total)
}

/// Trains one model and writes the checkpoint, metrics, and config.
pub fn cmd_train(cfg: &ExperimentConfig, threads: usize, log: &mut dyn FnMut(&str)) -> Result<MetricsReport> {
    let data = load_dataset(cfg)?;
    write_run_config(cfg, &cfg.output)?;
    let run = run_experiment(&data, &cfg.model, &cfg.train, threads, &mut |epoch, loss| {
        log(&format!("epoch {epoch}: loss {loss:.4}"));
    })?;
    checkpoint::save(&run.net.store, &cfg.output.join(CHECKPOINT))?;
    write_report(&run.report, &cfg.output)?;
    Ok(run.report)
}

/// Evaluates a checkpoint on the test split of the configured seed. The
/// checkpoint is only read.
pub fn cmd_eval(cfg: &ExperimentConfig, ckpt: &Path, threads: usize) -> Result<MetricsReport> {
    let data = load_dataset(cfg)?;
    let mut net = VisTaNet::new(&cfg.model, cfg.train.init_seed())?;
    checkpoint::restore(&mut net.store, checkpoint::load(ckpt)?)?;
    let split = split_train_test(&data.manifest, cfg.train.split_ratio, cfg.train.split_seed())?;
    let test = split.indices(&data.manifest, Role::Test);
    let report = evaluate(&net, &data, &test, Vec::new(), threads)?;
    write_run_config(cfg, &cfg.output)?;
    write_report(&report, &cfg.output)?;
    Ok(report)
}

/// Runs the fusion ablation (and baselines if configured); writes
/// `ablation.csv` and each run's metrics as `<family>-seed<k>.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, threads: usize, log: &mut dyn FnMut(&str)) -> Result<Vec<AblationRow>> {
    let data = load_dataset(cfg)?;
    write_run_config(cfg, &cfg.output)?;
    let rows = ablate(
        &data,
        &cfg.model,
        &cfg.train,
        &cfg.ablation.seeds,
        cfg.ablation.baselines,
        threads,
        log,
    )?;
    for r in &rows {
        write(&cfg.output.join(format!("{}-seed{}.json", r.family, r.seed)), r.report.to_json())?;
    }
    write(&cfg.output.join(ABLATION), ablation_csv(&rows))?;
    Ok(rows)
}

/// `family  mean ± sd  (runs)` table for stdout.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("model\tmean\tsd\truns\n");
    for f in summarize(rows) {
        writeln!(s, "{}\t{:.4}\t{:.4}\t{}", f.family, f.mean, f.sd, f.runs).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::parse("p", "line 1", "x")), 3);
        assert_eq!(exit_code(&Error::NonFiniteLoss { epoch: 0, batch: 0 }), 4);
        assert_eq!(exit_code(&Error::CheckpointMismatch("x".into())), 5);
        assert_eq!(exit_code(&Error::Data("x".into())), 1);
    }
}
