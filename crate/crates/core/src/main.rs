use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nflab::experiments::{parse_config, run, Mode};
use nflab::Error;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    GenData,
    TrainCsi,
    TrainVit,
    TrainHdrl,
    Baseline,
    Sweep,
    Flops,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::GenData => Mode::GenData,
            ModeArg::TrainCsi => Mode::TrainCsi,
            ModeArg::TrainVit => Mode::TrainVit,
            ModeArg::TrainHdrl => Mode::TrainHdrl,
            ModeArg::Baseline => Mode::Baseline,
            ModeArg::Sweep => Mode::Sweep,
            ModeArg::Flops => Mode::Flops,
        }
    }
}

/// Near-field RIS experiments: datasets, estimator training, control runs,
/// sweeps and operation counts.
#[derive(Debug, Parser)]
#[command(name = "nflab", version)]
struct Cli {
    /// JSON config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; also where train-hdrl and baseline look for models.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let text = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", p.display());
                return ExitCode::from(2);
            }
        },
        None => String::new(),
    };
    let mut cfg = match parse_config(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match run(&cfg, cli.mode.into(), &cli.out, cli.quiet) {
        Ok(rec) => {
            if !cli.quiet {
                println!("{}", serde_json::to_string_pretty(&rec).expect("record serialises"));
            }
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
