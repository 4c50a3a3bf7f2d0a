use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vstain_cli::{Context, Outcome, RunConfig};
use vstain_core::Error;

#[derive(Debug, Parser)]
#[command(name = "vstain", version, about = "Mutual-information guided score diffusion for virtual staining")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded tensor kernels for byte-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Images processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Directory for per-image step traces (JSON lines).
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    /// Overrides `paths.run_dir`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic paired corpus.
    GenData,
    /// Train the score network on target-domain tiles.
    TrainScore {
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Train the mutual-information critic.
    TrainMi,
    /// Translate source tiles.
    Stain {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score generated tiles against ground truth.
    Eval {
        #[arg(long)]
        gen: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Stain and evaluate over the (N, t0') grid.
    Sweep,
    /// Print the effective configuration.
    ShowConfig,
}

fn run(cli: Cli) -> vstain_core::Result<Outcome> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = cli.run_dir {
        cfg.paths.run_dir = dir;
    }
    cfg.validate()?;
    if cli.jobs == 0 {
        return Err(Error::Config("--jobs must be >= 1".into()));
    }
    let mut ctx = Context::new(cfg);
    ctx.jobs = cli.jobs;
    ctx.trace = cli.trace;
    match cli.command {
        Command::GenData => vstain_cli::cmd_gen_data(&ctx),
        Command::TrainScore { resume } => vstain_cli::cmd_train_score(&ctx, resume),
        Command::TrainMi => vstain_cli::cmd_train_mi(&ctx),
        Command::Stain { input, output } => vstain_cli::cmd_stain(&ctx, input.as_deref(), output.as_deref()),
        Command::Eval { gen, gt } => vstain_cli::cmd_eval(&ctx, gen.as_deref(), gt.as_deref()),
        Command::Sweep => vstain_cli::cmd_sweep(&ctx),
        Command::ShowConfig => {
            print!("{}", ctx.cfg.to_toml_string()?);
            Ok(Outcome::default())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.deterministic {
        // Read by both rayon and the tensor kernels on first use.
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(Outcome { failures: 0 }) => ExitCode::SUCCESS,
        Ok(Outcome { failures }) => {
            log::error!("{failures} item(s) failed");
            ExitCode::from(1)
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
