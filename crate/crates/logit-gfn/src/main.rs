use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::warn;
use logit_gfn::{enumerate, evaluate, train, Resolved, RunConfig, RunError};

#[derive(Parser)]
#[command(name = "logit-gfn", version, about = "Train and evaluate temperature-conditional GFlowNets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Sample a trained checkpoint at several betas.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated query betas; defaults to the config's eval.betas.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        /// Samples per beta; defaults to the config's eval.samples (2048).
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write the exact tempered target distributions.
    Enumerate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
    },
}

fn load(common: &Common) -> Result<(Resolved, PathBuf), RunError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let out = cfg.output_dir.clone();
    Ok((cfg.resolve()?, out))
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Train { common } => {
            let (run, out) = load(&common)?;
            let outcome = train(&run, &out)?;
            if let Some(last) = outcome.records.last() {
                println!("trained {} rounds; last loss {}", last.round + 1, last.loss_mean.map_or("-".into(), |l| l.to_string()));
            }
            println!("outputs in {}", out.display());
        }
        Command::Eval { common, checkpoint, betas, samples } => {
            let (run, out) = load(&common)?;
            let checkpoint = checkpoint.unwrap_or_else(|| out.join(logit_gfn::run::CHECKPOINT_FILE));
            let betas = betas.unwrap_or_else(|| run.config.eval.betas.clone());
            let samples = samples.unwrap_or(run.config.eval.samples);
            let outcome = evaluate(&run, &checkpoint, &betas, samples, &out)?;
            if !outcome.enumerable {
                warn!("state space exceeds eval.cap; exact L1 omitted");
                println!("note: state space too large for exact evaluation; L1 column omitted");
            }
            println!("{:>10} {:>12} {:>12} {:>12}", "beta", "median", "max", "temperature");
            for r in &outcome.rows {
                let t = r.temperature.map_or("-".into(), |t| format!("{t:.6}"));
                println!("{:>10} {:>12.6} {:>12.6} {:>12}", r.beta, r.median, r.max, t);
            }
        }
        Command::Enumerate { common, betas } => {
            let (run, out) = load(&common)?;
            let betas = betas.unwrap_or_else(|| run.config.eval.betas.clone());
            for path in enumerate(&run, &betas, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOGIT_GFN_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
