//! `endmember`: simulate, train, detect, evaluate, report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use endmember::mixing::MixingModel;
use endmember::pipeline::{self, Evaluation, RunConfig};
use endmember::Error;

#[derive(Parser, Debug)]
#[command(name = "endmember", version, about = "Semantic endmember detection benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate libraries, mixtures and nonlinearity scores.
    Simulate,
    /// Train chain models and detectors, one archive per k.
    Train,
    /// Apply detectors and sparse baselines to the mixtures.
    Detect,
    /// Score the detections and write the report tables.
    Evaluate,
    /// Run every stage in order.
    Report,
}

#[derive(Args, Debug)]
struct Overrides {
    /// TOML run configuration; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated NHMC state counts, e.g. `2,4`.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Restrict to one mixing model.
    #[arg(long, global = true, value_parser = parse_model)]
    model: Option<MixingModel>,
}

fn parse_model(s: &str) -> Result<MixingModel, String> {
    s.parse::<MixingModel>().map_err(|e| e.to_string())
}

impl Overrides {
    fn apply(&self) -> endmember::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) if !path.is_file() => {
                return Err(Error::Config(format!("config file {} does not exist", path.display())))
            }
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(k) = &self.k {
            cfg.nhmc.k_grid = k.clone();
        }
        if let Some(model) = self.model {
            cfg.mixing.models = vec![model];
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_summary(ev: &Evaluation) {
    println!("{:<12} {:<5} {:>8} {:>7} {:>7} {:>8}", "method", "model", "d_ROC", "recall", "FAR", "NS[deg]");
    for r in &ev.summary {
        println!(
            "{:<12} {:<5} {:>8.4} {:>7.3} {:>7.3} {:>8.3}",
            r.method,
            r.model.name(),
            r.d_roc,
            r.best.recall,
            r.best.far,
            r.mean_ns
        );
    }
}

fn run(command: Command, cfg: &RunConfig) -> endmember::Result<()> {
    let written = match command {
        Command::Simulate => pipeline::stage_simulate(cfg)?,
        Command::Train => pipeline::stage_train(cfg)?,
        Command::Detect => pipeline::stage_detect(cfg)?,
        Command::Evaluate | Command::Report => {
            let (ev, written) = if command == Command::Report {
                pipeline::stage_report(cfg)?
            } else {
                pipeline::stage_evaluate(cfg)?
            };
            print_summary(&ev);
            written
        }
    };
    eprintln!("wrote {} files to {}", written.len(), cfg.out_dir.display());
    Ok(())
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match cli.overrides.apply() {
        Ok(cfg) => cfg,
        Err(e) => return exit_for(&e),
    };
    match run(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
