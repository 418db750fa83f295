use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fordn::commands::{self, Context};
use fordn::parallel::JOBS_ENV;
use fordn::{CliError, ExperimentConfig, Result};
use fordn_core::eval::EvalRegion;
use fordn_core::pipeline::Method;

/// Fiber orientation reconstruction guided by a trained unfolded network.
#[derive(Debug, Parser)]
#[command(name = "fordn", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = JOBS_ENV, default_value_t = 0)]
    jobs: usize,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize the crossing phantom: signals, truth FOs, labels, regions,
    /// gradient table and the resolved config.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        /// Overrides acquisition.snr.
        #[arg(long)]
        snr: Option<f64>,
        /// Overrides phantom.noise_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one network per region from baseline FO configurations.
    Train {
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        /// Gradient table matching the signals (default: the configured scheme).
        #[arg(long)]
        gradients: Option<PathBuf>,
        /// Output directory for model files and loss curves.
        #[arg(long)]
        out: PathBuf,
        /// Overrides network.training_seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides network.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Estimate FOs with one method.
    Estimate {
        /// cfari, l2l0, dn or fordn.
        #[arg(long)]
        method: String,
        #[arg(long)]
        signals: PathBuf,
        #[arg(long)]
        regions: PathBuf,
        #[arg(long)]
        gradients: Option<PathBuf>,
        /// Directory written by `train` (dn and fordn only).
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare estimates against the truth and write the report.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
        /// Evaluate even if the inputs carry different config hashes.
        #[arg(long)]
        force: bool,
        /// Estimated FO files.
        #[arg(required = true)]
        estimates: Vec<PathBuf>,
    },
    /// Grid search of a baseline's β on a validation phantom with fresh noise.
    Tune {
        /// cfari or l2l0.
        #[arg(long)]
        method: String,
        #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.02, 0.05, 0.1, 0.2, 0.5])]
        betas: Vec<f64>,
        /// Use every n-th tissue voxel.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn parse_method(s: &str) -> Result<Method> {
    Method::parse(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Phantom { out, snr, seed } => {
            if let Some(snr) = snr {
                config.acquisition.snr = snr;
            }
            if let Some(seed) = seed {
                config.phantom.noise_seed = seed;
            }
            let ctx = Context::new(config, cli.jobs)?;
            let census = commands::cmd_phantom(&ctx, &out)?;
            println!("{}", commands::format_census(&census));
        }
        Command::Train { signals, regions, gradients, out, seed, epochs } => {
            if let Some(seed) = seed {
                config.network.training_seed = seed;
            }
            if let Some(epochs) = epochs {
                config.network.epochs = epochs;
            }
            let ctx = Context::new(config, cli.jobs)?;
            let inputs = commands::load_inputs(&ctx, &signals, &regions, gradients.as_deref())?;
            for s in commands::cmd_train(&ctx, &inputs, &out)? {
                println!(
                    "region {}: {} configurations, {} samples, {:.1} s, loss by epoch {:?}",
                    s.region, s.configurations, s.samples, s.seconds, s.loss_history
                );
            }
        }
        Command::Estimate { method, signals, regions, gradients, models, out } => {
            let method = parse_method(&method)?;
            let ctx = Context::new(config, cli.jobs)?;
            let inputs = commands::load_inputs(&ctx, &signals, &regions, gradients.as_deref())?;
            commands::cmd_estimate(&ctx, method, &inputs, models.as_deref(), &out)?;
        }
        Command::Evaluate { truth, labels, out, force, estimates } => {
            let report = commands::cmd_evaluate(&truth, &labels, &estimates, &out, force)?;
            print!("{}", commands::format_report(&report));
        }
        Command::Tune { method, betas, stride } => {
            let method = parse_method(&method)?;
            if !matches!(method, Method::Cfari | Method::L2l0) {
                return Err(CliError::Usage("tune supports cfari and l2l0".into()));
            }
            let ctx = Context::new(config, cli.jobs)?;
            let results = commands::tune_beta(&ctx, method, &betas, stride)?;
            println!("beta       all     noncross  2-cross  3-cross");
            for r in &results {
                let m: Vec<String> = EvalRegion::ALL.iter().map(|g| format!("{:8.3}", r.summary[g].mean)).collect();
                println!("{:<8} {}", r.beta, m.join(" "));
            }
            if let Some(b) = commands::best_beta(&results) {
                println!("best beta for {}: {b}", method.name());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
