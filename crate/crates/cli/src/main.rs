mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use dar_core::report::write_json;
use dar_core::DarError;

use crate::commands::Ctx;
use crate::config::ExperimentConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Synth,
    Partition,
    Preprocess,
    Pretrain,
    Finetune,
    FuseTrain,
    Eval,
    Crossval,
    Sweep,
    Robustness,
    Compare,
    DumpFeatures,
}

impl Command {
    fn name(self) -> String {
        self.to_possible_value().expect("named").get_name().to_string()
    }
}

/// Divide-and-rule experiments on ambiguously annotated volumes.
#[derive(Debug, Parser)]
#[command(name = "dar", version)]
struct Cli {
    command: Command,
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config entry, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent seeds, folds and stages.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Also render PNG plots of the emitted curves.
    #[arg(long)]
    plot: bool,
}

/// Exit codes: 2 config, 3 data, 4 runtime.
fn classify(e: &DarError) -> (&'static str, u8) {
    use DarError::*;
    match e {
        Config(_) | FoldSize { .. } | BlockOutOfRange { .. } | InvalidWindow { .. } => ("config", 2),
        Parse { .. } | DuplicateId { .. } | ScoreOutOfRange { .. } | EmptyScores { .. } | WrongKind { .. } | BadMagic { .. }
        | UnsupportedVersion(_) | TruncatedPayload { .. } | DimensionOverflow(_) | InvalidVolume(_) | CenterOutOfBounds { .. }
        | NonCubic(_) | NonSquare { .. } | Io { .. } | Json(_) | Image(_) | Checkpoint(_) | EmptySubset(_) | EmptyTestSet => {
            ("data", 3)
        }
        _ => ("runtime", 4),
    }
}

fn run(cli: &Cli) -> Result<serde_json::Value, DarError> {
    let cfg = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let command = cli.command.name();
    let run_dir = cfg.run_dir(&command);
    std::fs::create_dir_all(&run_dir).map_err(|e| DarError::io(&run_dir, e))?;
    write_json(&run_dir.join("config.json"), &cfg)?;
    log::info!("{command}: writing to {}", run_dir.display());
    let ctx = Ctx { cfg, run_dir, jobs: cli.jobs, plot: cli.plot };
    let mut out = match cli.command {
        Command::Synth => commands::synth(&ctx),
        Command::Partition => commands::partition(&ctx),
        Command::Preprocess => commands::preprocess(&ctx),
        Command::Pretrain => commands::pretrain_cmd(&ctx),
        Command::Finetune => commands::finetune(&ctx),
        Command::FuseTrain => commands::fuse_train(&ctx),
        Command::Eval => commands::eval(&ctx),
        Command::Crossval => commands::crossval(&ctx),
        Command::Sweep => commands::sweep(&ctx),
        Command::Robustness => commands::robustness(&ctx),
        Command::Compare => commands::compare(&ctx),
        Command::DumpFeatures => commands::dump_features(&ctx),
    }?;
    out["run_dir"] = serde_json::Value::String(ctx.run_dir.display().to_string());
    Ok(out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = classify(&e);
            eprintln!("{}", serde_json::json!({ "error": { "kind": kind, "code": code, "message": e.to_string() } }));
            ExitCode::from(code)
        }
    }
}
