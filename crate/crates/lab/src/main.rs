use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qatlab::config::TaskKind;
use qatlab::run::run;

/// Quantization-aware training experiments on desk-scale problems.
///
/// Settings come from an optional JSON config (or a run manifest) plus
/// `--key=value` overrides, e.g. `--epochs=5 --qc.lr=0.01`. Output goes to
/// `out_dir`, or `$QATLAB_OUT/<task>-<hash>` (default root `runs`).
/// Exit codes: 0 success, 2 config error, 3 runtime failure.
#[derive(Parser)]
#[command(name = "qatlab", version)]
struct Cli {
    #[command(subcommand)]
    task: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config file or a previous run's manifest.json.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `--key=value` overrides, dotted keys for nested fields.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Toy oscillation problem; writes per-step traces.
    Toy(RunArgs),
    /// Latent pre-training, quantizer init and QAT with EMA shadows.
    Train(RunArgs),
    /// Fit the post-hoc correction on a checkpoint (`--checkpoint=...`).
    Qc(RunArgs),
    /// Absorb corrections and fold batch norm into per-channel scales.
    Fold(RunArgs),
    /// Scale/shift by granularity correction ablation.
    Ablate(RunArgs),
    /// Evaluate a checkpoint on its eval split.
    Eval(RunArgs),
    /// Aggregate run directories (`--runs=[...]`) into a summary CSV.
    Report(RunArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = match cli.task {
        Command::Toy(a) => (TaskKind::Toy, a),
        Command::Train(a) => (TaskKind::Train, a),
        Command::Qc(a) => (TaskKind::Qc, a),
        Command::Fold(a) => (TaskKind::Fold, a),
        Command::Ablate(a) => (TaskKind::Ablate, a),
        Command::Eval(a) => (TaskKind::Eval, a),
        Command::Report(a) => (TaskKind::Report, a),
    };
    match run(task, args.config.as_deref(), &args.overrides) {
        Ok(summary) => {
            for d in &summary.run_dirs {
                println!("{}", d.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qatlab {}: {e}", task.as_str());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
