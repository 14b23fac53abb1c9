//! Command-line entry points for the experimentation loop, the evaluation
//! planner, and oracle test-set generation.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use stackplan::cli::{
    cmd_evaluate, cmd_learn, cmd_oracle, parse_size_range, EvalModelKind, EvaluateArgs,
};
use stackplan::domain::TaskObjective;

#[derive(Parser)]
#[command(
    name = "stackplan",
    about = "Active learning of stacking-plan feasibility with a Monte-Carlo tower planner"
)]
struct Cli {
    /// Bound the worker-thread pool (default: one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experimentation loop described by a JSON config.
    Learn {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config and STACKPLAN_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Resume from a previous run directory's checkpoints.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Plan towers against a feasibility model and report normalized regret.
    Evaluate {
        /// Feasibility model: learned, analytical, or simulation.
        #[arg(long)]
        model: EvalModelKind,
        /// Ensemble checkpoint (required for --model learned).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Task objective: tallest_tower, longest_overhang,
        /// max_unsupported_area, or all.
        #[arg(long, default_value = "all")]
        task: String,
        /// Planning trials per task.
        #[arg(long, default_value_t = 50)]
        trials: usize,
        /// Simulation baseline perturbation sigma, meters.
        #[arg(long, default_value_t = 0.005)]
        noise_sigma: f64,
        /// Simulation baseline perturbation count.
        #[arg(long, default_value_t = 10)]
        n_perturb: usize,
        /// Execution noise when building the chosen tower (0 = noiseless).
        #[arg(long, default_value_t = 0.0)]
        exec_sigma: f64,
        /// Candidate towers sampled per trial.
        #[arg(long, default_value_t = 2000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluation block set (JSON array); generated from the seed when
        /// absent.
        #[arg(long)]
        blocks: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit a balanced oracle-labeled test set.
    Oracle {
        /// Towers per size (half feasible, half infeasible).
        #[arg(long)]
        count: usize,
        /// Inclusive size range, e.g. 2..7.
        #[arg(long)]
        sizes: String,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (e.g. under a test
        // harness); the bound is best-effort.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }

    let result = match cli.command {
        Command::Learn { config, out, resume } => {
            cmd_learn(&config, out.as_deref(), resume.as_deref()).map(|dir| {
                println!("run complete: {}", dir.display());
            })
        }
        Command::Evaluate {
            model,
            checkpoint,
            task,
            trials,
            noise_sigma,
            n_perturb,
            exec_sigma,
            n_samples,
            seed,
            blocks,
            out,
        } => {
            let task = match task.as_str() {
                "all" => None,
                name => match name.parse::<TaskObjective>() {
                    Ok(t) => Some(t),
                    Err(e) => {
                        eprintln!("error: {e}");
                        return ExitCode::from(2);
                    }
                },
            };
            let args = EvaluateArgs {
                model,
                checkpoint,
                task,
                trials,
                noise_sigma,
                n_perturb,
                exec_sigma,
                n_samples,
                seed,
                blocks_file: blocks,
                out_dir: out,
            };
            cmd_evaluate(&args).map(|dir| {
                println!("evaluation complete: {}", dir.display());
            })
        }
        Command::Oracle { count, sizes, out, seed } => match parse_size_range(&sizes) {
            Ok(sizes) => cmd_oracle(count, &sizes, &out, seed).map(|_| {
                println!("oracle set written: {}", out.display());
            }),
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
