use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use srblab_cli::{run_pipeline, with_threads, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "srblab", version, about = "Numerical experiments on SRB measures of partially hyperbolic maps")]
struct Cli {
    /// Experiment config (TOML, or JSON by extension), merged over the defaults of its system.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list by this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory for the run.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Density lemma campaign on random sequences.
    Pliss,
    /// Lyapunov exponents over all seeds.
    Lyapunov,
    /// Domination constants of a bundle split.
    Domination,
    /// Pesin block masses along the noise schedule.
    Blocks,
    /// Ulam and Monte Carlo stationary measures at one amplitude.
    Stationary,
    /// Stationary measures along the noise schedule and their invariance defects.
    ZeroNoise,
    /// Conditional densities on an unstable foliated box.
    Disintegrate,
    /// Gibbs criterion: hypotheses along the schedule and the level index.
    GibbsCriterion,
    /// Exponents, entropy formula and Gibbs index condensed into a verdict.
    SrbReport,
    /// Prints the embedded defaults of a system.
    PrintDefaults {
        #[arg(long, default_value = "cat_map")]
        system: String,
        #[arg(long, value_enum, default_value_t = Format::Toml)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Toml,
    Json,
}

fn pipeline_name(c: &Command) -> &'static str {
    match c {
        Command::Pliss => "pliss",
        Command::Lyapunov => "lyapunov",
        Command::Domination => "domination",
        Command::Blocks => "blocks",
        Command::Stationary => "stationary",
        Command::ZeroNoise => "zero-noise",
        Command::Disintegrate => "disintegrate",
        Command::GibbsCriterion => "gibbs-criterion",
        Command::SrbReport => "srb-report",
        Command::PrintDefaults { .. } => "print-defaults",
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    if let Command::PrintDefaults { system, format } = &cli.command {
        let c = ExperimentConfig::defaults(system)?;
        match format {
            Format::Toml => print!("{}", c.to_toml()),
            Format::Json => println!("{}", c.to_json()),
        }
        return Ok(0);
    }
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::defaults("cat_map")?,
    };
    if let Some(s) = cli.seed_override {
        config.seeds = vec![s];
    }
    if let Some(out) = cli.out {
        config.out = out;
    }
    let name = pipeline_name(&cli.command);
    let outcome = with_threads(cli.threads, || run_pipeline(name, &config))??;
    println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
    eprintln!("{name}: artifacts in {}", config.out.display());
    Ok(match outcome.unmet {
        Some(reason) => {
            eprintln!("hypothesis not met: {reason}");
            3
        }
        None => 0,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = run(cli).unwrap_or_else(|e| {
        // the message already carries the stage and the module error
        eprintln!("error: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
