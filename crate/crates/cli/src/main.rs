mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tialign_core::instruction::Task;
use tialign_core::pipeline::EvalHitMode;
use tialign_core::HitMode;

use crate::config::{BackendKind, RunConfig};
use crate::error::{CliError, EXIT_DOMAIN, EXIT_OK};

/// Image-text alignment evaluation: corpora, scoring, ensembling, metrics.
#[derive(Debug, Parser)]
#[command(name = "tialign", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Flat TOML run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    /// Maximum in-flight backend requests.
    #[arg(long, global = true)]
    concurrency: Option<usize>,
    /// Element hit threshold: a category above tau is a hit.
    #[arg(long, global = true)]
    tau: Option<u8>,
}

/// Query-side switches shared by corpus building and prediction.
#[derive(Debug, Args)]
struct BuildArgs {
    #[arg(long)]
    include_elements: bool,
    #[arg(long)]
    include_confidences: bool,
    #[arg(long)]
    include_prompt_type: bool,
    #[arg(long)]
    perturbation_epsilon: Option<u8>,
}

#[derive(Debug, Args)]
struct DatasetArg {
    /// Dataset file (JSON lines); overrides `dataset_path`.
    dataset: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check every record against the dataset invariants.
    Validate {
        #[command(flatten)]
        dataset: DatasetArg,
    },
    /// Write the instruction corpus for the train split.
    BuildCorpus {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value = "total")]
        task: Task,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Augment a random subset of training images and write the enlarged dataset.
    AugmentImages {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        image_root: Option<PathBuf>,
    },
    /// Label the validation split with the backend and merge it into train.
    PseudoLabel {
        #[command(flatten)]
        dataset: DatasetArg,
        /// Also replace element scores with predicted ones.
        #[arg(long)]
        label_elements: bool,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Score one split for one task.
    Predict {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value = "total")]
        task: Task,
        #[arg(long, default_value = "test")]
        split: tialign_core::Split,
        #[arg(long)]
        hit_mode: Option<HitMode>,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Element predictions first, then totals conditioned on them.
    TwoStage {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long, default_value = "test")]
        split: tialign_core::Split,
        #[arg(long)]
        hit_mode: Option<HitMode>,
        #[command(flatten)]
        build: BuildArgs,
    },
    /// Combine prediction runs listed in a JSON spec.
    Ensemble {
        /// Ensemble spec; overrides `ensemble_spec`.
        spec: Option<PathBuf>,
    },
    /// Score prediction files against the labeled dataset.
    Evaluate {
        #[command(flatten)]
        dataset: DatasetArg,
        #[arg(long)]
        total: PathBuf,
        #[arg(long)]
        element: PathBuf,
        #[arg(long)]
        hit_mode: Option<EvalHitMode>,
    },
}

impl BuildArgs {
    fn apply(&self, config: &mut RunConfig) {
        if self.include_elements {
            config.include_elements = Some(true);
        }
        if self.include_confidences {
            config.include_confidences = Some(true);
        }
        if self.include_prompt_type {
            config.include_prompt_type = Some(true);
        }
        if let Some(eps) = self.perturbation_epsilon {
            config.perturbation_epsilon = Some(eps);
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let g = &cli.global;
    config.seed = g.seed.or(config.seed);
    config.output_dir = g.output_dir.clone().or(config.output_dir);
    config.backend = g.backend.or(config.backend);
    config.concurrency = g.concurrency.or(config.concurrency);
    config.tau = g.tau.or(config.tau);

    let dataset = match &cli.command {
        Command::Validate { dataset }
        | Command::BuildCorpus { dataset, .. }
        | Command::AugmentImages { dataset, .. }
        | Command::PseudoLabel { dataset, .. }
        | Command::Predict { dataset, .. }
        | Command::TwoStage { dataset, .. }
        | Command::Evaluate { dataset, .. } => dataset.dataset.clone(),
        Command::Ensemble { .. } => None,
    };
    config.dataset_path = dataset.or(config.dataset_path);
    match &cli.command {
        Command::BuildCorpus { build, .. }
        | Command::PseudoLabel { build, .. }
        | Command::Predict { build, .. }
        | Command::TwoStage { build, .. } => build.apply(&mut config),
        Command::AugmentImages {
            fraction, image_root, ..
        } => {
            config.augment_fraction = fraction.or(config.augment_fraction);
            config.image_root = image_root.clone().or(config.image_root.take());
        }
        Command::Ensemble { spec } => config.ensemble_spec = spec.clone().or(config.ensemble_spec.take()),
        _ => {}
    }
    if let Command::Predict { hit_mode, .. } | Command::TwoStage { hit_mode, .. } = &cli.command {
        config.hit_mode = hit_mode.or(config.hit_mode);
    }
    if let Command::Evaluate { hit_mode, .. } = &cli.command {
        config.eval_hit_mode = hit_mode.or(config.eval_hit_mode);
    }
    config.check()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let config = resolve(&cli)?;
    match cli.command {
        Command::Validate { .. } => commands::validate(&config),
        Command::BuildCorpus { task, .. } => commands::build_corpus(&config, task),
        Command::AugmentImages { .. } => commands::augment_images(&config),
        Command::PseudoLabel { label_elements, .. } => commands::pseudo_label(&config, label_elements),
        Command::Predict { task, split, .. } => commands::predict(&config, task, split),
        Command::TwoStage { split, .. } => commands::two_stage(&config, split),
        Command::Ensemble { .. } => commands::ensemble(&config),
        Command::Evaluate { total, element, .. } => commands::evaluate(&config, &total, &element),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_DOMAIN } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
