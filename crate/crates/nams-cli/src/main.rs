//! Command-line harness for corpus generation, model training, design
//! inference, and the experiment suite. Exit codes: 0 success, 2
//! configuration error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nams::harness::{
    cli_gen_corpus, cli_infer, cli_ms2_search, cli_report, cli_train_dr, cli_train_nams,
    run_downstream, run_e1, run_e2, run_e4, ExperimentConfig, HarnessError, Profile,
};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

impl From<ProfileArg> for Profile {
    fn from(p: ProfileArg) -> Self {
        match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nams",
    about = "Meta-simulation experiments on a procedural overhead-imagery simulator"
)]
struct Cli {
    /// JSON experiment configuration; omitted fields come from the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Built-in configuration profile used when --config is absent.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the uniform training corpus (tiles, masks, manifest, features).
    GenCorpus,
    /// Train the encoder/decoder/predictor model on a stored corpus.
    TrainNams {
        /// Directory holding features.jsonl from gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Train the direct-regression baseline on a stored corpus.
    TrainDr {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Amortized design inference for stored target feature groups.
    Infer {
        /// Directory with saved nams and dr models.
        #[arg(long)]
        model_dir: PathBuf,
        /// Corpus directory (for the latent-init scale estimate).
        #[arg(long)]
        corpus: PathBuf,
        /// Target feature groups (features.jsonl format).
        #[arg(long)]
        targets: PathBuf,
    },
    /// Distribution-matching search against stored targets (live simulation).
    Ms2Search {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        targets: PathBuf,
    },
    /// Design-inference accuracy with no design gap.
    RunE1,
    /// Design-inference accuracy with held-out target textures.
    RunE2,
    /// Simulation-budget accounting and amortization crossover.
    RunE4,
    /// Downstream segmentation-proxy comparison across strategies.
    Downstream,
    /// Regenerate SVG charts from the CSVs in the output directory.
    Report,
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_profile(cli.profile.into(), 0),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let config = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    config.save(&cli.out.join("resolved_config.json"))?;
    match &cli.command {
        Command::GenCorpus => cli_gen_corpus(&config, &cli.out),
        Command::TrainNams { corpus } => cli_train_nams(&config, corpus, &cli.out),
        Command::TrainDr { corpus } => cli_train_dr(&config, corpus, &cli.out),
        Command::Infer {
            model_dir,
            corpus,
            targets,
        } => cli_infer(&config, model_dir, corpus, targets, &cli.out),
        Command::Ms2Search { corpus, targets } => {
            cli_ms2_search(&config, corpus, targets, &cli.out)
        }
        Command::RunE1 => run_e1(&config, &cli.out).map(|_| ()),
        Command::RunE2 => run_e2(&config, &cli.out).map(|_| ()),
        Command::RunE4 => run_e4(&config, &cli.out).map(|_| ()),
        Command::Downstream => run_downstream(&config, &cli.out).map(|_| ()),
        Command::Report => cli_report(&cli.out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
