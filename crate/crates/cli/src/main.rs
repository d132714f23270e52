//! `satret` command line: corpus generation, pretraining, adaptation,
//! evaluation, ablation and tag analysis over one output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use satret::acss::CurriculumMode;
use satret::config::{Overrides, RunConfig};
use satret::pipeline;
use satret::Error;
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "satret", version, about = "Cross-domain satellite image-text retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global seed, overriding the config file.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory, overriding the config file.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the synthetic source and target manifests.
    GenData,
    /// Contrastive pretraining on the source manifest.
    Pretrain,
    /// Adapt the pretrained checkpoint to the target domain.
    Adapt(AdaptArgs),
    /// Retrieval metrics of a checkpoint on a manifest.
    Eval {
        /// Defaults to the adapted checkpoint in the output directory.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Defaults to the held-out target test manifest.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
    /// Full adaptation and the three single-component ablations.
    Ablate {
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Geo-tag frequency, PCA and clustering of a manifest.
    AnalyzeTags {
        /// Defaults to the source manifest.
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Disable similarity-based source sampling.
    #[arg(long)]
    no_ss: bool,
    /// Disable the curriculum windows.
    #[arg(long)]
    no_cl: bool,
    /// Disable the adversarial term.
    #[arg(long)]
    no_at: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Window,
    Cumulative,
}

impl From<Mode> for CurriculumMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Window => CurriculumMode::Window,
            Mode::Cumulative => CurriculumMode::Cumulative,
        }
    }
}

impl Cli {
    fn overrides(&self) -> Overrides {
        let mut o = Overrides {
            seed: self.seed,
            out_dir: self.out.clone(),
            ..Default::default()
        };
        match &self.command {
            Command::Adapt(a) => {
                o.no_ss = a.no_ss;
                o.no_cl = a.no_cl;
                o.no_at = a.no_at;
                o.mode = a.mode.map(Into::into);
            }
            Command::Ablate { mode } => o.mode = mode.map(Into::into),
            _ => {}
        }
        o
    }

    fn config(&self) -> satret::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides())?;
        Ok(cfg)
    }
}

fn print<T: Serialize>(report: &T) -> satret::Result<()> {
    println!("{}", serde_json::to_string_pretty(report)?);
    Ok(())
}

fn run(cli: &Cli) -> satret::Result<()> {
    let cfg = cli.config()?;
    match &cli.command {
        Command::GenData => {
            pipeline::cmd_gen_data(&cfg)?;
            for name in [
                pipeline::MANIFEST_SOURCE,
                pipeline::MANIFEST_TARGET,
                pipeline::CONFIG_SNAPSHOT,
            ] {
                println!("{}", cfg.out_dir.join(name).display());
            }
            Ok(())
        }
        Command::Pretrain => print(&pipeline::cmd_pretrain(&cfg)?),
        Command::Adapt(_) => print(&pipeline::cmd_adapt(&cfg)?),
        Command::Eval { checkpoint, manifest } => print(&pipeline::cmd_eval(&cfg, checkpoint.as_deref(), manifest.as_deref())?),
        Command::Ablate { .. } => print(&pipeline::cmd_ablate(&cfg)?),
        Command::AnalyzeTags { manifest } => print(&pipeline::cmd_analyze_tags(&cfg, manifest.as_deref())?),
    }
}

fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } | Error::UnknownCommand(_) => ExitCode::from(2),
        _ => ExitCode::FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.kind() == ErrorKind::InvalidSubcommand => {
            let name = e
                .get(clap::error::ContextKind::InvalidSubcommand)
                .map(|v| v.to_string())
                .unwrap_or_default();
            let err = Error::UnknownCommand(name);
            eprintln!("error: {err}");
            return exit_code(&err);
        }
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
