//! `sfm`: synthetic scenes, track chaining, training, inference, robust
//! bundle adjustment, evaluation, and PLY export in one binary.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical
//! failure.

mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser)]
#[command(name = "sfm", version, about = "Outlier-robust multiview structure from motion")]
struct Cli {
    /// Cap on internal worker threads (bundle adjustment evaluation).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene (tracks with labels, ground-truth poses
    /// and points).
    Synth(SynthArgs),
    /// Chain a pairwise matches file into a track tensor.
    Tracks(TracksArgs),
    /// Train the network on labeled scenes.
    Train(TrainArgs),
    /// Classify outliers, filter, fine-tune, and predict poses/points.
    Infer(InferArgs),
    /// Robust bundle adjustment (or a single standard BA round).
    Ba(BaArgs),
    /// Compare predicted poses against ground truth; prints metrics JSON.
    Eval(EvalArgs),
    /// Export points and camera centers as an ASCII PLY point cloud.
    Export(ExportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => run_synth(args),
        Command::Tracks(args) => run_tracks(args),
        Command::Train(args) => run_train(args),
        Command::Infer(args) => run_infer(args),
        Command::Ba(args) => run_ba(args, cli.threads),
        Command::Eval(args) => run_eval(args),
        Command::Export(args) => run_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            if err.is_data_error() {
                ExitCode::from(3)
            } else {
                ExitCode::from(4)
            }
        }
    }
}
