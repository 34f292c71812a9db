//! `vistafuse`: generate synthetic visuotactile data, train and evaluate the
//! fusion network, and run the fusion ablation.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error, 3 I/O or
//! malformed input file, 4 non-finite training loss, 5 checkpoint does not
//! match the configured model.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vistafuse::config::{ExperimentConfig, Profile};
use vistafuse::fusion::FusionStrategy;
use vistafuse::model::{eval_threads, Modality};
use vistafuse::pipeline;
use vistafuse::synthgen::{Milling, GRANULARITIES};
use vistafuse::{Error, Result};

#[derive(Parser)]
#[command(name = "vistafuse", version, about = "Visuotactile fusion experiments on synthetic surface-roughness data")]
struct Cli {
    /// TOML config file; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base profile the config file and flags are applied to (desk or paper).
    #[arg(long, global = true, default_value = "desk")]
    profile: String,
    /// Override any config key by dotted path, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train one model and evaluate it on the test split.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train every fusion strategy over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Classes to generate: milling types (H, V, T), class names (V-16), or ids.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    #[arg(long)]
    specimens: Option<usize>,
    #[arg(long)]
    sweeps: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_period: Option<usize>,
    #[arg(long)]
    split_ratio: Option<f64>,
    /// sum, max, concat or attention.
    #[arg(long)]
    fusion: Option<String>,
    /// both, visual or tactile.
    #[arg(long)]
    modality: Option<String>,
    #[arg(long)]
    d_f: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_k: Option<usize>,
    #[arg(long)]
    learned_values: Option<bool>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AblateArgs {
    /// Number of seeds; runs seeds 0..k.
    #[arg(long)]
    seeds: Option<u64>,
    /// Also train the visual-only and tactile-only models.
    #[arg(long)]
    baselines: bool,
    #[command(flatten)]
    run: RunArgs,
}

fn parse_classes(tokens: &[String], cfg: &ExperimentConfig) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for t in tokens.iter().map(|t| t.trim()).filter(|t| !t.is_empty()) {
        if let Some(m) = Milling::parse(t) {
            ids.extend((0..GRANULARITIES).map(|g| m as usize * GRANULARITIES + g));
        } else if let Ok(id) = t.parse::<usize>() {
            ids.push(id);
        } else if let Some(id) = (0..3 * GRANULARITIES).find(|&c| cfg.generate.table.class_name(c) == t) {
            ids.push(id);
        } else {
            return Err(Error::Config(format!("unknown class `{t}`")));
        }
    }
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

fn apply_generate(a: &GenerateArgs, cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.generate.seed = s;
    }
    if !a.classes.is_empty() {
        cfg.generate.classes = parse_classes(&a.classes, cfg)?;
    }
    if let Some(n) = a.specimens {
        cfg.generate.specimens_per_class = n;
    }
    if let Some(n) = a.sweeps {
        cfg.generate.sweeps_per_specimen = n;
    }
    if let Some(n) = a.images {
        cfg.generate.images_per_specimen = n;
    }
    Ok(())
}

fn apply_run(a: &RunArgs, cfg: &mut ExperimentConfig) -> Result<()> {
    if let Some(d) = &a.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(o) = &a.out {
        cfg.output = o.clone();
    }
    let t = &mut cfg.train;
    a.seed.map(|v| t.seed = v);
    a.epochs.map(|v| t.epochs = v);
    a.batch_size.map(|v| t.batch_size = v);
    a.lr.map(|v| t.base_lr = v);
    a.lr_decay.map(|v| t.lr_decay = v);
    a.decay_period.map(|v| t.decay_period = v);
    a.split_ratio.map(|v| t.split_ratio = v);
    let m = &mut cfg.model;
    if let Some(f) = &a.fusion {
        m.fusion = f.parse::<FusionStrategy>()?;
    }
    if let Some(s) = &a.modality {
        m.modality = s.parse::<Modality>()?;
    }
    a.d_f.map(|v| m.d_f = v);
    a.dropout.map(|v| m.dropout = v);
    a.crop_size.map(|v| m.augment.crop_size = v);
    a.heads.map(|v| m.attention.heads = v);
    a.d_k.map(|v| m.attention.d_k = v);
    a.learned_values.map(|v| m.attention.learned_values = v);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let profile: Profile = cli.profile.parse()?;
    let mut cfg = ExperimentConfig::resolve(profile, cli.config.as_deref(), &cli.sets)?;
    let mut log = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::Generate(a) => {
            apply_generate(&a, &mut cfg)?;
            cfg.validate()?;
            eprintln!("generating into {}", cfg.dataset.display());
            print!("{}", pipeline::cmd_generate(&cfg)?);
        }
        Command::Train(a) => {
            apply_run(&a, &mut cfg)?;
            cfg.validate()?;
            let report = pipeline::cmd_train(&cfg, eval_threads(), &mut log)?;
            eprintln!("wrote {}", cfg.output.display());
            println!("{}", pipeline::report_line(&report));
        }
        Command::Eval(a) => {
            apply_run(&a.run, &mut cfg)?;
            cfg.validate()?;
            let report = pipeline::cmd_eval(&cfg, &a.checkpoint, eval_threads())?;
            eprintln!("wrote {}", cfg.output.display());
            println!("{}", pipeline::report_line(&report));
        }
        Command::Ablate(a) => {
            apply_run(&a.run, &mut cfg)?;
            if let Some(k) = a.seeds {
                cfg.ablation.seeds = (0..k).collect();
            }
            cfg.ablation.baselines |= a.baselines;
            cfg.validate()?;
            let rows = pipeline::cmd_ablate(&cfg, eval_threads(), &mut log)?;
            eprintln!("wrote {}", cfg.output.join(pipeline::ABLATION).display());
            print!("{}", pipeline::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
