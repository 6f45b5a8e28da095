//! `apsm`: particle-based statistical shape modeling pipeline.
//!
//! Exit codes: 0 on success, 1 for validation or convergence failures,
//! 2 for numerical failures (singular or non-finite linear algebra).

use std::path::PathBuf;
use std::process::ExitCode;

use apsm_cli::commands;
use apsm_cli::errors::{CliError, CliResult};
use apsm_core::metrics::SpecificitySampling;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "apsm",
    version,
    about = "Optimize corresponding particle systems over cohorts of closed surfaces \
             and evaluate the resulting shape models"
)]
struct Cli {
    /// Cap the worker thread count.
    #[arg(long, global = true, conflicts_with = "serial")]
    threads: Option<usize>,
    /// Run single-threaded (bit-reproducible output).
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of closed meshes with a parameter manifest.
    GenerateSynthetic {
        /// Shape family: sphere-bump, ellipsoid, or box-feature.
        family: String,
        /// Directory for meshes, masks, manifest.csv, and cohort.toml.
        out_dir: PathBuf,
        /// Number of cohort members.
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Seed for the parameter jitter.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Mesh refinement level.
        #[arg(long, default_value_t = 3)]
        subdivisions: usize,
    },
    /// Pick a reference shape and spread corresponding particles (no optimization).
    Init {
        /// Cohort config file.
        config: PathBuf,
    },
    /// Run the full two-stage optimization, persisting particles per phase.
    Optimize {
        /// Cohort config file.
        config: PathBuf,
    },
    /// Compute shape-model quality metrics and reconstruction distances.
    Evaluate {
        /// Cohort config file.
        config: PathBuf,
        /// Particle directory (default: <output_dir>/particles_final).
        #[arg(long)]
        particles: Option<PathBuf>,
        /// Reference shape id (default: recorded by optimize, else medoid).
        #[arg(long)]
        reference: Option<String>,
        /// Cap on the modes scanned by the specificity curve.
        #[arg(long)]
        modes: Option<usize>,
        /// Random shapes drawn per specificity evaluation.
        #[arg(long, default_value_t = 1000)]
        specificity_samples: usize,
        /// Coefficient distribution for specificity sampling.
        #[arg(long, value_enum, default_value_t = SamplingArg::Uniform)]
        sampling: SamplingArg,
        /// Artifact directory (default: <output_dir>/evaluation).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Skip the SVG plots (CSV output is unaffected).
        #[arg(long)]
        no_plots: bool,
    },
    /// Report per-particle neighborhood mismatches; exit 0 iff within tolerance.
    CheckCorrespondence {
        /// Cohort config file.
        config: PathBuf,
        /// Particle directory (default: <output_dir>/particles_final).
        #[arg(long)]
        particles: Option<PathBuf>,
        /// Mismatched-particle tolerance per shape (default: from config).
        #[arg(long)]
        tolerance: Option<usize>,
        /// Reference shape id (default: recorded by optimize, else medoid).
        #[arg(long)]
        reference: Option<String>,
    },
    /// Warp the reference mesh onto every member's particles and save the meshes.
    Reconstruct {
        /// Cohort config file.
        config: PathBuf,
        /// Particle directory (default: <output_dir>/particles_final).
        #[arg(long)]
        particles: Option<PathBuf>,
        /// Reference shape id (default: recorded by optimize, else medoid).
        #[arg(long)]
        reference: Option<String>,
        /// Output directory (default: <output_dir>/reconstructed).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SamplingArg {
    Uniform,
    Gaussian,
}

impl SamplingArg {
    fn to_core(self) -> SpecificitySampling {
        match self {
            SamplingArg::Uniform => SpecificitySampling::Uniform3Sigma,
            SamplingArg::Gaussian => SpecificitySampling::Gaussian,
        }
    }
}

fn configure_threads(cli: &Cli) -> CliResult<()> {
    let threads = if cli.serial {
        Some(1)
    } else {
        match cli.threads {
            Some(0) => return Err(CliError::msg("--threads must be at least 1")),
            t => t,
        }
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::msg(format!("could not configure the thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<u8> {
    configure_threads(cli)?;
    match &cli.command {
        Command::GenerateSynthetic {
            family,
            out_dir,
            count,
            seed,
            subdivisions,
        } => commands::generate_synthetic(family, *count, *seed, *subdivisions, out_dir),
        Command::Init { config } => commands::init(config),
        Command::Optimize { config } => commands::optimize(config),
        Command::Evaluate {
            config,
            particles,
            reference,
            modes,
            specificity_samples,
            sampling,
            out_dir,
            no_plots,
        } => commands::evaluate(&commands::EvaluateArgs {
            config: config.clone(),
            particles: particles.clone(),
            reference: reference.clone(),
            modes: *modes,
            specificity_samples: *specificity_samples,
            sampling: sampling.to_core(),
            out_dir: out_dir.clone(),
            plots: !no_plots,
        }),
        Command::CheckCorrespondence {
            config,
            particles,
            tolerance,
            reference,
        } => commands::check_correspondence(
            config,
            particles.as_deref(),
            *tolerance,
            reference.as_deref(),
        ),
        Command::Reconstruct {
            config,
            particles,
            reference,
            out_dir,
        } => commands::reconstruct(
            config,
            particles.as_deref(),
            reference.as_deref(),
            out_dir.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    // clap's own errors would exit with status 2, which is reserved here for
    // numerical failures; remap argument problems to 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
