use std::path::PathBuf;
use std::process::ExitCode as ProcessExit;

use clap::{Args, Parser, Subcommand};

use ellipsoid_mpc::collision::ConstraintKind;
use ellipsoid_mpc::harness::{self, CompareOptions, ExitCode, RunOptions};

#[derive(Debug, Parser)]
#[command(name = "ellmpc", version, about = "Ellipsoidal collision-avoidance MPC harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Constraint formulation: free-gamma, fixed-gamma, free-eta or fixed-eta.
    #[arg(long)]
    mode: Option<ConstraintKind>,
    /// Number of closed-loop steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Seed of the disturbance generator.
    #[arg(long)]
    seed: Option<u64>,
    /// SQP iteration limit per step.
    #[arg(long)]
    max_sqp_iters: Option<usize>,
}

impl RunArgs {
    fn options(&self) -> RunOptions {
        RunOptions {
            mode: self.mode,
            steps: self.steps,
            seed: self.seed,
            max_sqp_iters: self.max_sqp_iters,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a scenario file and print derived quantities.
    Check { scenario: PathBuf },
    /// Run the closed loop and write the per-step logs with a summary.
    Simulate {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Compare the four formulations along the free-gamma closed loop.
    Compare {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        /// SQP iterations of the timed solves.
        #[arg(long, default_value_t = 2)]
        timed_iters: usize,
        /// Repetitions of each timed solve; the fastest is kept.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write the global path and the first horizon reference.
    Plan {
        scenario: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> harness::CommandResult<ExitCode> {
    match cli.command {
        Command::Check { scenario } => {
            println!("{}", harness::cmd_check(&scenario)?);
            Ok(ExitCode::Success)
        }
        Command::Simulate { scenario, out, run } => {
            let outcome = harness::cmd_simulate(&scenario, &out, &run.options())?;
            let s = &outcome.summary;
            println!(
                "{} ({}): {} steps, goal reached {}, overlap {}",
                s.scenario, s.mode, s.steps, s.goal_reached, s.any_overlap
            );
            if let Some(c) = s.min_clearance {
                println!("min clearance {c:.4} m");
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(outcome.exit_code())
        }
        Command::Compare {
            scenario,
            out,
            run,
            timed_iters,
            repeats,
        } => {
            let options = CompareOptions {
                run: run.options(),
                timed_sqp_iters: timed_iters,
                timing_repeats: repeats,
            };
            let outcome = harness::cmd_compare(&scenario, &out, &options)?;
            let s = &outcome.summary;
            println!(
                "{}: {} valid of {} steps, median relative cost fixed-gamma {:e}, fixed-eta {:e}",
                s.scenario, s.valid_records, s.records, s.fixed_gamma.median, s.fixed_eta.median
            );
            for t in &outcome.timing.modes {
                println!("{}: median timed solve {:.2} ms", t.mode, t.seconds.p50 * 1e3);
            }
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::Success)
        }
        Command::Plan { scenario, out } => {
            let outcome = harness::cmd_plan(&scenario, &out)?;
            println!(
                "path with {} waypoints, length {:.4} m",
                outcome.waypoints, outcome.path_length
            );
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            Ok(ExitCode::Success)
        }
    }
}

fn main() -> ProcessExit {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ProcessExit::from(if e.use_stderr() { ExitCode::InvalidInput as u8 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ProcessExit::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ProcessExit::from(e.code as u8)
        }
    }
}
