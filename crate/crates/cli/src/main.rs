use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use urbanflow_cli::commands::{
    cmd_evaluate, cmd_generate, cmd_synth, cmd_train_config, cmd_train_zone, ContextSource, GenerateRequest,
};
use urbanflow_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "urbanflow",
    version,
    about = "Two-stage conditional flows for grid land-use planning"
)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides a configuration key, e.g. `--set lambda_zone=0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic dataset.
    Synth {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the zone flow.
    TrainZone {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss log; defaults to `<out>.log`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Trains fusion and the configuration flow jointly with the zone flow.
    TrainConfig {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        zone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generates configurations.
    Generate(GenerateArgs),
    /// Generates configurations with per-layer traces and images.
    Trace(GenerateArgs),
    /// Writes a per-level metric report.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    green: usize,
    /// Take the context of this dataset sample (needs `--data`).
    #[arg(long, requires = "data", conflicts_with = "context_seed")]
    sample_id: Option<u64>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Synthesize a context from this seed.
    #[arg(long)]
    context_seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn run_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    config.validate()?;
    Ok(config)
}

fn generate(args: &GenerateArgs, trace: bool) -> Result<()> {
    let context = match (args.sample_id, &args.data, args.context_seed) {
        (Some(id), Some(dataset), None) => ContextSource::Sample {
            dataset: dataset.clone(),
            id,
        },
        (None, _, Some(seed)) => ContextSource::Seed(seed),
        (None, _, None) => bail!("give either --sample-id with --data, or --context-seed"),
        _ => bail!("conflicting context sources"),
    };
    let request = GenerateRequest {
        green_level: args.green,
        context,
        count: args.count,
        trace,
        seed: args.seed,
    };
    cmd_generate(&args.ckpt, &request, &args.out_dir)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { count, out } => cmd_synth(&run_config(&cli)?, *count, out)?,
        Command::TrainZone { data, out, log } => {
            let r = cmd_train_zone(&run_config(&cli)?, data, out, log.as_deref())?;
            eprintln!("zone NLL {:.4} -> {:.4}", r.initial_nll, r.final_nll);
        }
        Command::TrainConfig { data, zone, out, log } => {
            let r = cmd_train_config(&run_config(&cli)?, data, zone, out, log.as_deref())?;
            eprintln!("configuration NLL {:.4} -> {:.4}", r.initial_nll, r.final_nll);
        }
        Command::Generate(args) => generate(args, false)?,
        Command::Trace(args) => generate(args, true)?,
        Command::Evaluate { ckpt, data, out } => {
            let r = cmd_evaluate(ckpt, data, out)?;
            eprintln!("AVG_KL {:.6} AVG_HD {:.6} AVG_WD {:.6}", r.avg_kl, r.avg_hd, r.avg_wd);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
