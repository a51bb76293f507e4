//! `lotos`: command-line experiments over the lotos toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use lotos_core::attacks::{AttackConfig, Norm};
use lotos_core::Error;

mod commands;

use commands::{CliError, Invocation};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "LOTOS_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "lotos", version, about = "Layer-wise orthogonalization experiments")]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (defaults to $LOTOS_OUT_DIR, then ./lotos-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct AttackArgs {
    #[arg(long, default_value_t = 0.25)]
    eps: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value = "l2")]
    norm: Norm,
    /// Defaults to 2.5 * eps / steps.
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    random_start: bool,
    /// Target class for a targeted attack.
    #[arg(long)]
    target: Option<usize>,
    /// Seed of the per-sample attack randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl AttackArgs {
    fn config(&self) -> AttackConfig {
        let mut a = AttackConfig::new(self.eps, self.steps, self.norm);
        if let Some(s) = self.step_size {
            a.step_size = s;
        }
        a.random_start = self.random_start;
        a.targeted = self.target;
        a
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset from a config's dataset section (desk textures by default).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's dataset seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one ensemble per seed; writes checkpoints and history CSVs.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Attack a checkpoint (its ensemble when it holds several models).
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Pairwise transferability rates inside an ensemble.
    Transfer {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Robust accuracy of an ensemble against attacks crafted on a surrogate.
    Blackbox {
        #[arg(long)]
        surrogate: PathBuf,
        /// Which model of the surrogate checkpoint to attack with.
        #[arg(long, default_value_t = 0)]
        member: usize,
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
    /// Closed-form spectrum of a single-channel circular convolution.
    Spectrum {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        filter: Vec<f64>,
        #[arg(long)]
        n: usize,
    },
    /// Check the gap and cross-layer bounds on random filter pairs.
    VerifyBounds {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        tmax: usize,
        #[arg(long, default_value_t = 64)]
        nmax: usize,
    },
    /// Clip-value sweep: accuracy, robust accuracy and transferability per C.
    SweepClip {
        /// Clip values; `inf` trains unclipped.
        #[arg(long, value_delimiter = ',', default_value = "0.8,1.0,1.2,1.5,inf")]
        values: Vec<f64>,
        /// Defaults to the desk experiment.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Empirical check of the risk-gap inequality between two models.
    Prop1 {
        #[arg(long)]
        model_f: PathBuf,
        #[arg(long)]
        model_g: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0.04)]
        eps: f64,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 50)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Orig, clip, LOTOS, random-vector control and LOTOS k=3, with black-box transfers.
    Compare {
        /// Defaults to the desk experiment.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Re-execute a run from its manifest and compare every output byte for byte.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn exit_code(err: &CliError) -> u8 {
    match err {
        CliError::Verification(_) => 2,
        CliError::Core(Error::NonFinite(_) | Error::NotConverged { .. }) => 3,
        CliError::Core(_) => 1,
    }
}

fn out_dir(flag: Option<PathBuf>, from_config: Option<PathBuf>) -> PathBuf {
    flag.or(from_config)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("lotos-out"))
}

fn run(cli: Cli, argv: Vec<String>) -> Result<(), CliError> {
    let threads = match (&cli.command, cli.threads) {
        (_, Some(t)) => Some(t),
        (Command::Rerun { .. }, None) => Some(1),
        _ => None,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(Error::Config("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    if let Command::Rerun { manifest } = &cli.command {
        return commands::rerun(manifest, cli.out);
    }
    let invocation = Invocation::resolve(cli.command)?;
    let out = out_dir(cli.out, invocation.config_output_dir());
    commands::execute_and_record(&invocation, argv, &out)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
