use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dialmem::tensor::FaultInjection;
use dialmem_cli::commands::{self, GenerateArgs, SynthKind, TrainMode};
use dialmem_cli::config::{RunConfig, CONFIG_ENV};
use dialmem_cli::exit::{Failure, EXIT_CONFIG};

#[derive(Parser)]
#[command(name = "dialmem", version, about = "Persona-consistent dialogue generation with latent memories")]
struct Cli {
    /// TOML run configuration
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (synth, evaluate) or directory (train)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Nli,
    Dialogue,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Alternate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Softmax,
    LayerNorm,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic corpus as JSON lines
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        size: usize,
        /// Distractors listed per dialogue turn
        #[arg(long, default_value_t = 0)]
        candidates: usize,
    },
    /// Train the entailment stage, the dialogue stage, or alternate them
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Continue from this checkpoint
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Generate a response for one turn
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One persona sentence; repeat for more
        #[arg(long)]
        persona: Vec<String>,
        /// A prior turn as "query|response"; repeat in order
        #[arg(long)]
        turn: Vec<String>,
        #[arg(long)]
        query: String,
        #[arg(long)]
        beam: Option<usize>,
        /// Also print the score and the memory read weights
        #[arg(long)]
        verbose: bool,
    },
    /// Score a checkpoint on a dialogue corpus and write a JSON report
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to data.eval from the config
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences
    Gradcheck {
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
}

fn run(cli: Cli) -> Result<String, Failure> {
    let from_file = cli.config.is_some();
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .finish(cli.seed)?;
    let need_out = |what: &str| cli.out.clone().ok_or_else(|| Failure::new(EXIT_CONFIG, format!("{what} needs --out")));
    match cli.command {
        Command::Synth { kind, size, candidates } => {
            let kind = match kind {
                Kind::Nli => SynthKind::Nli,
                Kind::Dialogue => SynthKind::Dialogue,
            };
            commands::synth(kind, size, cfg.seed(), candidates, &need_out("synth")?)
        }
        Command::Train { stage, init } => {
            let mode = match stage {
                StageArg::One => TrainMode::Stage1,
                StageArg::Two => TrainMode::Stage2,
                StageArg::Alternate => TrainMode::Alternate,
            };
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let dir = commands::train(&cfg, mode, init.as_deref(), &out)?;
            Ok(format!("checkpoint: {}", dir.display()))
        }
        Command::Generate {
            checkpoint,
            persona,
            turn,
            query,
            beam,
            verbose,
        } => {
            let args = GenerateArgs {
                checkpoint,
                persona,
                turns: turn,
                query,
                beam,
                verbose,
            };
            commands::generate(&cfg, from_file, &args)
        }
        Command::Evaluate { checkpoint, corpus } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("report.json"));
            commands::evaluate(&cfg, from_file, &checkpoint, corpus.as_deref(), &out)
        }
        Command::Gradcheck { inject_fault } => {
            let fault = match inject_fault {
                None => FaultInjection::None,
                Some(Fault::Softmax) => FaultInjection::SoftmaxBackward,
                Some(Fault::LayerNorm) => FaultInjection::LayerNormBackward,
            };
            commands::gradcheck(cfg.seed(), fault)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(text) => {
            println!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
