//! Single executable over JSON run configs.
//!
//! Exit codes: 0 success, 1 selftest property failure, 2 configuration or
//! I/O error, 3 numeric abort (non-finite tensor during training).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use weightnet::complexity::FlopsConvention;
use weightnet::runner::{self, load_config};
use weightnet::selftest::{run_selftest, SelftestOptions};

#[derive(Parser)]
#[command(name = "weightnet", version, about = "Weight-generating convolutions: train, evaluate, analyze")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics.jsonl and checkpoint.wnck to the
    /// config's out_dir.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's eval split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-layer parameter/MAC report (CSV via --out).
    Complexity {
        #[arg(long)]
        config: PathBuf,
        /// "macs" or "2macs" (FLOPs = 2·MACs).
        #[arg(long, default_value = "macs")]
        flops_convention: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract per-sample kernels from a dynamic layer, emit WNK dumps,
    /// similarity heatmaps and the 2-D projection.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer name, e.g. stage1.block0.
        #[arg(long)]
        layer: String,
        /// Output directory for the analysis artifacts.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the 64-bit equivalence and gradient property suite.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<u8, weightnet::Error> {
    match cli.cmd {
        Cmd::Train { config, seed } => {
            let cfg = load_config(&config)?;
            let artifacts = runner::cmd_train(&cfg, seed)?;
            println!(
                "trained: final eval top-1 {:.4}\nmetrics:    {}\ncheckpoint: {}",
                artifacts.final_eval,
                artifacts.metrics_path.display(),
                artifacts.checkpoint_path.display()
            );
            Ok(0)
        }
        Cmd::Eval { config, checkpoint } => {
            let cfg = load_config(&config)?;
            let acc = runner::cmd_eval(&cfg, &checkpoint)?;
            println!("eval top-1: {acc:.4}");
            Ok(0)
        }
        Cmd::Complexity {
            config,
            flops_convention,
            out,
        } => {
            let cfg = load_config(&config)?;
            let convention = FlopsConvention::parse(&flops_convention)?;
            let report = runner::cmd_complexity(&cfg, convention, out.as_deref())?;
            print!("{}", report.to_csv(convention));
            let t = report.totals();
            println!(
                "total,conv,{},{}\ntotal,weight,{},{}\ntotal,other,{},{}",
                t.conv_params,
                convention.apply(t.conv_macs),
                t.weight_params,
                convention.apply(t.weight_macs),
                t.other_params,
                convention.apply(t.other_macs)
            );
            Ok(0)
        }
        Cmd::Analyze {
            config,
            checkpoint,
            layer,
            out,
        } => {
            let cfg = load_config(&config)?;
            let artifacts = runner::cmd_analyze(&cfg, &checkpoint, &layer, &out)?;
            println!(
                "analyzed layer {layer}: {} kernel dumps, {} heatmaps\nprojection: {}\nsimilarity: {}",
                artifacts.wnk_paths.len(),
                artifacts.pgm_paths.len(),
                artifacts.projection_csv.display(),
                artifacts.similarity_csv.display()
            );
            Ok(0)
        }
        Cmd::Selftest { seed } => {
            let mut opts = SelftestOptions::default();
            if let Some(s) = seed {
                opts.seed = s;
            }
            let results = run_selftest(&opts);
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{} {:<42} {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if failed.is_empty() {
                println!("all {} properties passed", results.len());
                Ok(0)
            } else {
                eprintln!("failing properties: {}", failed.join(", "));
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(runner::exit_code_for(&e) as u8)
        }
    }
}
