use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dpquant::config::RunConfig;
use dpquant::{harness, train};

#[derive(Parser)]
#[command(name = "dpquant", version, about = "DP-SGD with simulated FP4 layers")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Train per the config and write metrics, ledger and impact records.
    Train(Common),
    /// One loss-impact measurement on the initial network.
    MeasureImpact(Common),
    /// Planned privacy spend per epoch.
    Accountant(Common),
    /// Cost-model speedup estimates.
    Speedup(Common),
    /// Monte-Carlo bias and variance of the quantizer.
    QuantizerStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
    },
}

fn run(cli: Cli) -> dpquant::Result<PathBuf> {
    let common = match &cli.verb {
        Verb::Train(c) | Verb::MeasureImpact(c) | Verb::Accountant(c) | Verb::Speedup(c) => c,
        Verb::QuantizerStats { common, .. } => common,
    };
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = &common.out;
    match &cli.verb {
        Verb::Train(_) => train::run_training(&cfg, out),
        Verb::MeasureImpact(_) => harness::measure_impact(&cfg, out),
        Verb::Accountant(_) => harness::accountant_report(&cfg, out),
        Verb::Speedup(_) => harness::speedup_report(&cfg, out),
        Verb::QuantizerStats { trials, .. } => harness::quantizer_report(&cfg, out, *trials),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
