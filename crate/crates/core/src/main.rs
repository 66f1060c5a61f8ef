use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowmimic::pipeline::{run_stage, AblationMode, ExperimentConfig, Profile, Run, Stage};
use flowmimic::Error;

#[derive(Parser, Debug)]
#[command(name = "flowmimic", version, about = "Black-box flow evasion experiments")]
struct Cli {
    /// JSON configuration overlaid on the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    profile: Option<String>,
    /// Run directory; overrides `out` in the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesise and split the corpora.
    GenData,
    BuildVocab,
    /// Masked pre-training of the encoder.
    Pretrain,
    TrainDetector,
    /// Train one agent per scenario.
    AttackTrain,
    /// Generate adversarial flows for the attack test sets.
    AttackInfer,
    /// Score adversarial flows and write the run report.
    Eval,
    /// Compare the full pipeline with ablated variants.
    Ablate {
        /// S1, S2_S, S2_F or full; repeatable. Defaults to all four.
        #[arg(long = "mode")]
        modes: Vec<String>,
    },
    /// Retrain under the configured budget and noise sweeps.
    Sweep,
    /// Every stage in order.
    Pipeline,
    /// Print the resolved configuration.
    ShowConfig,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let profile = cli.profile.as_deref().map(str::parse::<Profile>).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            ExperimentConfig::from_json_str(&text, profile, cli.seed)?
        }
        None => ExperimentConfig::resolve(None, profile, cli.seed)?,
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: ExperimentConfig) -> Result<(), Error> {
    if matches!(cli.command, Command::ShowConfig) {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let run = Run::open(cfg)?;
    let mut modes = AblationMode::ALL.to_vec();
    let stage = match &cli.command {
        Command::GenData => Stage::GenData,
        Command::BuildVocab => Stage::BuildVocab,
        Command::Pretrain => Stage::Pretrain,
        Command::TrainDetector => Stage::TrainDetector,
        Command::AttackTrain => Stage::AttackTrain,
        Command::AttackInfer => Stage::AttackInfer,
        Command::Eval => Stage::Eval,
        Command::Sweep => Stage::Sweep,
        Command::Ablate { modes: given } => {
            if !given.is_empty() {
                modes = given.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            }
            Stage::Ablate
        }
        Command::Pipeline => {
            let report = run.pipeline()?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(());
        }
        Command::ShowConfig => unreachable!("handled above"),
    };
    run_stage(&run, stage, &modes)?;
    eprintln!("{} done; artifacts in {}", stage.name(), run.dir.root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
