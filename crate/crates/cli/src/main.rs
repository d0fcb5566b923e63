use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use hit_cli::commands::{self, config_header};
use hit_cli::config::RunConfig;
use hit_cli::verify::{Suite, VerifyOptions};
use hit_core::attention::AttentionMode;
use hit_core::numerics::OpKind;

#[derive(Parser)]
#[command(name = "hit", version, about = "HiT generator reference tool")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run property suites and print one CSV row per property.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Corrupt one derivative rule to check that gradcheck catches it.
        #[arg(long, value_parser = parse_op)]
        inject_fault: Option<OpKind>,
        /// Only run properties whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Time attention variants at balanced sizes.
    Bench {
        /// Comma-separated token counts (perfect squares).
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<AttentionMode>>,
        #[arg(long)]
        repeats: Option<usize>,
    },
    /// Adversarial training on the synthetic blob dataset.
    Train {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write sample images as binary PPM.
    Generate {
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Generator checkpoint written by `train`.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Write images along the latent segment between two seeds.
    Interpolate {
        #[arg(long)]
        seed_a: u64,
        #[arg(long)]
        seed_b: u64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Per-stage parameter counts.
    Params {
        /// Preset name; the configured generator when omitted.
        preset: Option<String>,
    },
}

fn parse_op(s: &str) -> Result<OpKind, String> {
    OpKind::from_name(s).filter(|k| k.has_derivative_rule()).ok_or_else(|| {
        let names: Vec<&str> = OpKind::ALL.iter().filter(|k| k.has_derivative_rule()).map(|k| k.name()).collect();
        format!("no derivative rule named {s:?}; expected one of {}", names.join(", "))
    })
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    AttentionMode::from_name(s).ok_or_else(|| format!("unknown attention mode {s:?}"))
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker threads")?;
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    match cli.command {
        Command::Verify { suite, inject_fault, filter } => {
            let cfg = cfg.resolved()?;
            let opts = VerifyOptions { fault: inject_fault, filter };
            let (report, text) = commands::cmd_verify(&cfg, suite, &opts)?;
            print!("{text}");
            return Ok(report.passed());
        }
        Command::Bench { sizes, modes, repeats } => {
            if let Some(s) = sizes {
                cfg.bench.sizes = s;
            }
            if let Some(m) = modes {
                cfg.bench.modes = m;
            }
            if let Some(r) = repeats {
                cfg.bench.repeats = r;
            }
            let cfg = cfg.resolved()?;
            let (_, csv) = commands::cmd_bench(&cfg, &cfg.out)?;
            print!("{csv}");
        }
        Command::Train { steps } => {
            if let Some(s) = steps {
                cfg.train.hyper.steps = s;
            }
            let cfg = cfg.resolved()?;
            let outcome = commands::cmd_train(&cfg, &cfg.out)?;
            print!("{}{}", config_header(&cfg)?, outcome.trace.to_csv());
        }
        Command::Generate { count, weights } => {
            let cfg = cfg.resolved()?;
            let entries = commands::cmd_generate(&cfg, count, weights.as_deref(), &cfg.out)?;
            for p in commands::image_paths(&cfg.out, &entries) {
                println!("{}", p.display());
            }
        }
        Command::Interpolate { seed_a, seed_b, steps, weights } => {
            let cfg = cfg.resolved()?;
            let entries = commands::cmd_interpolate(&cfg, seed_a, seed_b, steps, weights.as_deref(), &cfg.out)?;
            for p in commands::image_paths(&cfg.out, &entries) {
                println!("{}", p.display());
            }
        }
        Command::Params { preset } => {
            let cfg = cfg.resolved()?;
            let table = commands::cmd_params(&cfg, preset.as_deref())?;
            print!("{}{}", config_header(&cfg)?, table.render());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
