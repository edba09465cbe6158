use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mixlab::experiment::checkpoint::load_checkpoint;
use mixlab::experiment::runner::{
    self, evaluate_tasks, pilot_configs, write_outputs, write_report,
};
use mixlab::experiment::{emit_table, AblationKind, ExperimentConfig, Format, RunRecord};

#[derive(Parser)]
#[command(
    name = "mixlab",
    version,
    about = "Train and compare geometric fusion schemes on a synthetic reach task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: Format,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate the base model and all nine fusion schemes.
    Pilot(Common),
    /// Sweep one ablation axis.
    Ablate {
        #[arg(long)]
        kind: AblationKind,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate one configuration.
    Train(Common),
    /// Evaluate a saved checkpoint under the config's corruption and seed.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild the table and loss-curve CSV from a run directory.
    Report {
        /// Directory written by `pilot`, `ablate` or `train`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: Format,
    },
}

fn load_config(c: &Common) -> mixlab::Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn finish(report: &Path) -> mixlab::Result<()> {
    print!("{}", std::fs::read_to_string(report)?);
    eprintln!("wrote {}", report.display());
    Ok(())
}

fn run(cli: Cli) -> mixlab::Result<()> {
    match cli.command {
        Command::Pilot(c) => {
            let cfg = load_config(&c)?;
            let outs = runner::run_pilot(&pilot_configs(&cfg), c.jobs)?;
            finish(&write_outputs(&cfg.out_dir, &outs, c.format)?)
        }
        Command::Ablate { kind, common } => {
            let cfg = load_config(&common)?;
            let outs = runner::run_ablation(kind, &cfg, common.jobs)?;
            finish(&write_outputs(&cfg.out_dir, &outs, common.format)?)
        }
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let out = runner::run_experiment(&cfg, cfg.scheme.display_name())?;
            finish(&write_outputs(&cfg.out_dir, &[out], c.format)?)
        }
        Command::Eval { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let policy = load_checkpoint(&checkpoint)?;
            let record = RunRecord {
                label: policy.scheme().display_name().to_string(),
                group: policy.config.arch.to_string(),
                config: ExperimentConfig {
                    scheme: policy.scheme(),
                    arch: policy.config.arch,
                    ..cfg.clone()
                },
                dataset_hash: String::new(),
                tasks: evaluate_tasks(&policy, &cfg)?,
                loss_curve: Vec::new(),
                wall_time_secs: 0.0,
            };
            print!("{}", emit_table(&[record], common.format)?);
            Ok(())
        }
        Command::Report { out, format } => {
            let records = runner::read_records(&out)?;
            finish(&write_report(&out, &records, format)?)
        }
    }
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors and 0 for --help.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
