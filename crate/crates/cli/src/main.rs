use clap::{Args, Parser, Subcommand};
use heom2d::commands;
use heom2d::config::{Method, RunConfig, SweepConfig};
use heom2d::pipeline::{self, PipelineError};
use std::path::PathBuf;
use std::process::ExitCode;

/// HEOM simulation of rephasing 2D electronic spectra.
#[derive(Debug, Parser)]
#[command(name = "heom2d", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Population and coherence trajectories of the physical density operator.
    Propagate {
        #[command(flatten)]
        run: RunArgs,
        /// Also report trajectory changes under L+1, K+1 and dt/2.
        #[arg(long)]
        convergence: bool,
    },
    /// Rephasing 2D spectra, peak transients and oscillation metrics.
    Spectra2d {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// ΔΩ sweep with intensity and suppression-ratio summary.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated ΔΩ values in cm^-1 (overrides [sweep]).
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Gridded text and PNG renderings of a finished run directory.
    Plotdata {
        /// Run directory containing manifest.json.
        dir: Option<PathBuf>,
        #[arg(long, conflicts_with = "dir")]
        out: Option<PathBuf>,
    },
    /// Parses and checks a config, then prints it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: heom2d::config::ConfigError| e.to_string())
}

fn load(run: &RunArgs) -> Result<RunConfig, PipelineError> {
    let mut cfg = RunConfig::from_path(&run.config)?;
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Propagate { run, convergence } => {
            let cfg = load(&run)?;
            let m = commands::cmd_propagate(&cfg, &run.out, convergence)?;
            eprintln!("propagate: {} files in {} ({:.1} s)", m.files.len(), run.out.display(), m.wall_time_s);
        }
        Command::Spectra2d { run, method } => {
            let mut cfg = load(&run)?;
            if let Some(m) = method {
                cfg.response.method = m;
            }
            let m = commands::cmd_spectra2d(&cfg, cfg.response.method, &run.out)?;
            eprintln!("spectra2d: {} files in {} ({:.1} s)", m.files.len(), run.out.display(), m.wall_time_s);
        }
        Command::Sweep { run, values } => {
            let mut cfg = load(&run)?;
            if let Some(v) = values {
                cfg.sweep = Some(SweepConfig { delta_omega_cm1: v });
                cfg.validate()?;
            }
            let m = commands::cmd_sweep(&cfg, &run.out)?;
            eprintln!("sweep: {} files in {} ({:.1} s)", m.files.len(), run.out.display(), m.wall_time_s);
        }
        Command::Plotdata { dir, out } => {
            let dir = dir.or(out).ok_or_else(|| PipelineError::MissingOutput("run directory argument".into()))?;
            let files = commands::cmd_plotdata(&dir)?;
            eprintln!("plotdata: {} files in {}", files.len(), dir.join("plots").display());
        }
        Command::ValidateConfig { config } => {
            let cfg = RunConfig::from_path(&config)?;
            let s = pipeline::setup(&cfg)?;
            print!("{}", cfg.to_toml_string());
            eprintln!("valid: {} sites, {} ADOs", s.model.n_sites(), s.hierarchy.n_ado());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::from(3);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
