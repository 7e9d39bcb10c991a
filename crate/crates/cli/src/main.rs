//! Command-line entry point: data generation, pretraining, probing, the
//! ablation matrix, gradient checks and report rendering.

mod commands;
mod config;
mod failure;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use failure::Failure;

#[derive(Parser, Debug)]
#[command(name = "spatial-ssl", version, about = "Spatially-aware self-supervised pretraining on synthetic tactile images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every configurable subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config; values override built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `section.key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a labeled synthetic dataset to a directory.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "fused")]
        modality: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain an encoder; writes logs, checkpoints and a manifest.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: PathBuf,
        /// Spatial terms to enable, e.g. `sal,ppda,ram`, `all` or `none`.
        #[arg(long)]
        losses: Option<String>,
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        epochs: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Also write the per-sample augmentation replay log.
        #[arg(long)]
        log_views: bool,
    },
    /// Linear probe of a frozen checkpoint.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        run_dir: PathBuf,
        /// Also run the multipool fine-tune protocol when enabled in config.
        #[arg(long)]
        finetune: bool,
    },
    /// Pretrain and probe every (loss subset, modality, seed) cell.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run_dir: PathBuf,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Semicolon-separated subsets, e.g. `global;sal;sal+ppda+ram`.
        #[arg(long)]
        subsets: Option<String>,
        /// Comma-separated modalities.
        #[arg(long)]
        modalities: Option<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of every loss gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tolerance: Option<f64>,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        run_dir: PathBuf,
    },
    /// Render an ablation results table without recomputation.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            task,
            n,
            seed,
            modality,
            out,
        } => commands::gen_data(&task, n, seed, &modality, &out),
        Command::Pretrain {
            common,
            run_dir,
            losses,
            modality,
            epochs,
            seed,
            resume,
            log_views,
        } => commands::pretrain(
            &common,
            &run_dir,
            commands::PretrainFlags {
                losses,
                modality,
                epochs,
                seed,
                resume,
                log_views,
            },
        ),
        Command::Probe {
            common,
            ckpt,
            task,
            run_dir,
            finetune,
        } => commands::probe(&common, ckpt, task, &run_dir, finetune),
        Command::Ablate {
            common,
            run_dir,
            seeds,
            subsets,
            modalities,
            jobs,
        } => commands::ablate(&common, &run_dir, seeds, subsets, modalities, jobs),
        Command::Gradcheck {
            common,
            tolerance,
            h,
            seed,
            run_dir,
        } => commands::gradcheck(&common, tolerance, h, seed, &run_dir),
        Command::Report { input, format } => commands::report(&input, &format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let f = Failure::Usage(e.to_string().lines().next().unwrap_or("bad arguments").to_string());
            eprintln!("error[{}]: {}", f.class(), f.message());
            return ExitCode::from(f.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.class(), f.message());
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
