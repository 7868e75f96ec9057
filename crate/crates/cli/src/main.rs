use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fastfca::harness::{
    bench_pipeline, evaluate_pipeline, separate_pipeline, simulate, train_pipeline, HarnessError, Method, Profile, RunConfig,
    BENCH, ESTIMATES, MANIFEST, METRICS, REPORT,
};

/// Neural FastFCA blind source separation pipelines.
#[derive(Debug, Parser)]
#[command(name = "fastfca", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overriding the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for scene sampling, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Default settings to start from: desk or paper.
    #[arg(long, global = true, default_value = "desk")]
    profile: Profile,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a dataset of simulated scenes and write its manifest.
    Simulate,
    /// Train the network on the training split of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Separate the held-out scenes of a manifest.
    Separate {
        #[arg(long)]
        manifest: PathBuf,
        /// Trained network, required for the neural method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// neural or fastmnmf; defaults to the configured method.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Score separated estimates against the manifest references.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory of a `separate` run.
        #[arg(long)]
        estimates: PathBuf,
    },
    /// Time network inference against FastMNMF on simulated scenes.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, HarnessError> {
    let text = match &cli.config {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    RunConfig::resolve(cli.profile, text.as_deref(), cli.seed)
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match cli.command {
        Command::Simulate => {
            let records = simulate(&cfg, out)?;
            println!("wrote {} scenes to {}", records.len(), out.join(MANIFEST).display());
        }
        Command::Train { manifest } => {
            let report = train_pipeline(&cfg, &manifest, out, |r| {
                if r.step % 10 == 0 {
                    eprintln!("step {:>6}  epoch {:>3}  elbo {:.6e}  kl {:.4e}  beta {:.3}", r.step, r.epoch, r.elbo, r.kl, r.kl_weight);
                }
            })?;
            let last = report.metrics.last().map_or(f64::NAN, |r| r.elbo);
            println!("trained {} steps, final elbo {last:.6e}; metrics in {}", report.metrics.len(), out.join(METRICS).display());
        }
        Command::Separate { manifest, checkpoint, method } => {
            if let Some(m) = method {
                cfg.separate.method = m;
            }
            let records = separate_pipeline(&cfg, &manifest, checkpoint.as_deref(), out)?;
            println!("separated {} scenes into {}", records.len(), out.join(ESTIMATES).display());
        }
        Command::Evaluate { manifest, estimates } => {
            let report = evaluate_pipeline(&cfg, &manifest, &estimates, out)?;
            println!(
                "{} scenes: mean SI-SDR {:.2} dB, mean SI-SDR improvement {:.2} dB; report in {}",
                report.scenes.len(),
                report.mean_si_sdr,
                report.mean_improvement,
                out.join(REPORT).display()
            );
        }
        Command::Bench { checkpoint } => {
            let report = bench_pipeline(&cfg, checkpoint.as_deref(), Some(out))?;
            print!("{}", report.to_tsv());
            println!("table in {}", Path::new(out).join(BENCH).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
