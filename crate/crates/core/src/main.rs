use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use loopvit::harness::{exit_code, run, Command, Options, Precision};

#[derive(Parser)]
#[command(name = "loopvit", version, about = "Train, evaluate and inspect looped vision transformers on grid tasks")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Fixed-depth offline training; writes metrics.jsonl and checkpoint.bin.
    Train(Flags),
    /// Pass@k evaluation with entropy halting.
    Eval(Flags),
    /// Evaluation with per-task test-time training.
    Ttt(Flags),
    /// B x T training sweep and/or tau sweep on one checkpoint.
    Sweep(Flags),
    /// Per-step predictions, entropy/delta trace and optional attention maps.
    Diagnose(Flags),
    /// Write the evaluation micro-tasks as JSON lines.
    DumpTasks(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct Flags {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run every query for exactly T_max steps.
    #[arg(long)]
    no_halt: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    precision: Option<PrecisionArg>,
    #[arg(long)]
    emit_attention: bool,
    #[arg(long)]
    task_id: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, f) = match cli.command {
        Cmd::Train(f) => (Command::Train, f),
        Cmd::Eval(f) => (Command::Eval, f),
        Cmd::Ttt(f) => (Command::Ttt, f),
        Cmd::Sweep(f) => (Command::Sweep, f),
        Cmd::Diagnose(f) => (Command::Diagnose, f),
        Cmd::DumpTasks(f) => (Command::DumpTasks, f),
    };
    let opts = Options {
        spec: f.spec,
        checkpoint: f.checkpoint,
        out: f.out,
        seed: f.seed,
        no_halt: f.no_halt,
        tau: f.tau,
        precision: f.precision.map(|p| match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }),
        emit_attention: f.emit_attention,
        task_id: f.task_id,
    };
    match run(command, &opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
