//! Command line entry point.
//!
//! Exit codes: 0 success, 1 a numeric check or run failed (gradient error
//! over threshold, non-finite loss), 2 usage or configuration errors.

mod bench;
mod commands;
mod config;
mod manifest;
mod scopes;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mhmamba::error::{Error, Result};

use config::Config;
use manifest::{write_manifest, RunInfo};

#[derive(Parser)]
#[command(name = "mhmamba", version, about = "Selective-scan 3D segmentation toolkit")]
struct Cli {
    /// Run configuration file: one dotted.key=value per line.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set network.heads=8. Repeatable;
    /// wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Force sequential kernels so reruns are byte-reproducible even
    /// where the parallel schedule could reorder floating-point sums.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// Operator name, block, agf, network, or all.
        #[arg(long, default_value = "all")]
        scope: String,
        /// Spatial extent per axis; defaults to 4 (operators) or 16 (network).
        #[arg(long)]
        size: Option<usize>,
        /// Directory for gradcheck.csv plus a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time one component across sizes; rows carry doubling ratios.
    Bench {
        /// scan, block, or network.
        #[arg(long, default_value = "scan")]
        component: String,
        /// Comma-separated sizes: token counts for scan, cube extents otherwise.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Directory for bench.csv plus a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on every .vol/.seg pair in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Directory for checkpoint.bin, loss.csv and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment one volume with a trained checkpoint.
    Infer {
        /// checkpoint.bin from a train run; the config must match it.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Directory for prediction.seg and the manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted label volumes against references.
    Eval {
        /// Prediction .seg, repeatable, paired with --gt by position.
        #[arg(long, required = true)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true)]
        gt: Vec<PathBuf>,
        /// Directory for metrics.csv plus a manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic labelled cases (caseNNN.vol / caseNNN.seg).
    Phantom {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    mhmamba::par::set_sequential(cli.deterministic);
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = Config::load(cli.config.as_deref(), &cli.set)?;
    match cli.cmd {
        Cmd::Gradcheck { scope, size, out } => {
            let run = RunInfo { subcommand: "gradcheck", seed: cli.seed, deterministic: cli.deterministic };
            let names = scopes::scope_list(&scope)?;
            cfg.note("gradcheck.scope", &scope);
            if let Some(s) = size {
                cfg.note("gradcheck.size", s);
            }
            let mut reports = Vec::with_capacity(names.len());
            for name in names {
                reports.push(scopes::run_scope(name, size, cli.seed)?);
            }
            let csv = scopes::report_csv(&reports);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("gradcheck.csv");
                std::fs::write(&path, &csv)?;
                write_manifest(&dir, &run, cfg.resolved(), &[path])?;
            }
            let worst = reports.iter().any(|r| !r.passed());
            Ok(if worst { ExitCode::from(1) } else { ExitCode::SUCCESS })
        }
        Cmd::Bench { component, sizes, out } => {
            let run = RunInfo { subcommand: "bench", seed: cli.seed, deterministic: cli.deterministic };
            let sizes = sizes.unwrap_or_else(|| bench::default_sizes(&component));
            cfg.note("bench.component", &component);
            cfg.note(
                "bench.sizes",
                sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
            );
            let rows = bench::run_bench(&component, &sizes, cli.seed)?;
            let csv = bench::bench_csv(&rows);
            print!("{csv}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("bench.csv");
                std::fs::write(&path, &csv)?;
                write_manifest(&dir, &run, cfg.resolved(), &[path])?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train { data, out } => {
            let run = RunInfo { subcommand: "train", seed: cli.seed, deterministic: cli.deterministic };
            commands::cmd_train(&mut cfg, &data, &out, &run)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Infer { model, input, out } => {
            let run = RunInfo { subcommand: "infer", seed: cli.seed, deterministic: cli.deterministic };
            commands::cmd_infer(&mut cfg, &model, &input, &out, &run)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { pred, gt, out } => {
            let run = RunInfo { subcommand: "eval", seed: cli.seed, deterministic: cli.deterministic };
            let csv = commands::cmd_eval(&mut cfg, &pred, &gt, out.as_deref(), &run)?;
            print!("{csv}");
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Phantom { out } => {
            let run = RunInfo { subcommand: "phantom", seed: cli.seed, deterministic: cli.deterministic };
            commands::cmd_phantom(&mut cfg, &out, &run)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
