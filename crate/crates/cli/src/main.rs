//! `sckd`: train, sweep, export embeddings and self-check.
//!
//! Exit status: 0 on success, 1 on a configuration error, 2 on a runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sckd_core::config::{preset_overrides, ExperimentConfig};
use sckd_core::experiment::{emit_embeddings, load_datasets, run_experiment, run_sweep};
use sckd_core::{check, checkpoint, Error};

#[derive(Parser)]
#[command(name = "sckd", version, about = "Novel class discovery with self-cooperation knowledge distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set sckd.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
    /// Ablation preset applied before `--set`: full, baseline, k_to_n_only,
    /// n_to_k_only, no_replica, average_scores, random_scores.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured seed and write the results bundle.
    Train(ConfigArgs),
    /// Run the class-count sweep from the config's `[sweep]` section.
    Sweep(ConfigArgs),
    /// Dump encoder features of a trained checkpoint to CSV.
    Embed {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Run seed the checkpoint was trained with (selects the data).
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Embed the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the built-in oracle and invariant checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(args: &ConfigArgs) -> Result<(ExperimentConfig, Option<String>), Error> {
    let mut overrides = match &args.preset {
        Some(name) => preset_overrides(name)?,
        None => Vec::new(),
    };
    overrides.extend(args.overrides.iter().cloned());
    match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let config = ExperimentConfig::from_toml_str(&text, &overrides)?;
            Ok((config, Some(text)))
        }
        None => Ok((ExperimentConfig::from_toml_str("", &overrides)?, None)),
    }
}

fn train(args: &ConfigArgs) -> Result<(), Error> {
    let (config, text) = load(args)?;
    let summary = run_experiment(&config, text.as_deref())?;
    println!("{} seed(s) -> {}", summary.seeds.len(), config.output_dir.display());
    for (name, stat) in &summary.aggregate {
        println!("{name:32} {:.4} ± {:.4}", stat.mean, stat.std);
    }
    Ok(())
}

fn sweep(args: &ConfigArgs) -> Result<(), Error> {
    let (config, text) = load(args)?;
    let rows = run_sweep(&config, text.as_deref())?;
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("novel  variant   protocol       known_acc  novel_acc  all_acc");
    for r in rows {
        let protocol = r.protocol.as_str();
        println!(
            "{:5}  {:8}  {:13}  {:9}  {:9}  {}",
            r.novel_classes,
            r.variant,
            protocol,
            fmt(r.known_acc_mean),
            fmt(r.novel_cluster_acc_mean),
            fmt(r.all_acc_mean)
        );
    }
    Ok(())
}

fn embed(args: &ConfigArgs, ckpt: &Path, seed: u64, train_split: bool, output: &Path) -> Result<(), Error> {
    let (config, _) = load(args)?;
    let model = checkpoint::load(ckpt)?;
    let (train_set, test_set) = load_datasets(&config, seed)?;
    let data = if train_split { &train_set } else { &test_set };
    let rows = emit_embeddings(&model, data, output)?;
    println!("{rows} rows -> {}", output.display());
    Ok(())
}

fn run_check(seed: u64) -> Result<bool, Error> {
    let outcomes = check::run_checks(seed)?;
    let mut ok = true;
    for c in &outcomes {
        println!("{} {:18} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        ok &= c.passed;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Train(args) => train(args),
        Command::Sweep(args) => sweep(args),
        Command::Embed {
            config,
            checkpoint,
            seed,
            train_split,
            output,
        } => embed(config, checkpoint, *seed, *train_split, output),
        Command::Check { seed } => match run_check(*seed) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 1 } else { 2 })
        }
    }
}
