use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use epiwatch::pipeline::{run_pipeline, write_fixture, PipelineConfig, PipelineError, Stage};
use epiwatch::SyntheticSpec;

#[derive(Parser)]
#[command(name = "epiwatch", version, about = "Outbreak detection and personalized tweet ranking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the detectors over daily mention counts.
    Detect(RunArgs),
    /// Fit topics, collect co-occurring hashtags and build queries.
    Expand(RunArgs),
    /// Train ranking models and rank retrieved tweets.
    Rank(RunArgs),
    /// Cross-validate the ranking models.
    Eval(RunArgs),
    /// Run every stage.
    All(RunArgs),
    /// Write a synthetic corpus, judgments, gazetteers and config.
    GenFixture {
        /// Target directory.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        days: Option<u32>,
    },
}

fn run(args: RunArgs, stage: Stage) -> Result<(), PipelineError> {
    let mut config = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = args.out {
        config.out = out;
    }
    let manifest = run_pipeline(&config, stage)?;
    for a in &manifest.artifacts {
        println!("{}", config.out.join(&a.path).display());
    }
    println!("{}", config.out.join("manifest.json").display());
    Ok(())
}

fn gen_fixture(dir: PathBuf, seed: Option<u64>, days: Option<u32>) -> anyhow::Result<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    if let Some(days) = days {
        spec.days = days;
    }
    let written = write_fixture(&dir, &spec).with_context(|| format!("writing fixture to {}", dir.display()))?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect(a) => run(a, Stage::Detect),
        Command::Expand(a) => run(a, Stage::Expand),
        Command::Rank(a) => run(a, Stage::Rank),
        Command::Eval(a) => run(a, Stage::Eval),
        Command::All(a) => run(a, Stage::All),
        Command::GenFixture { dir, seed, days } => {
            return match gen_fixture(dir, seed, days) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
