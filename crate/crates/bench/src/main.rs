use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rbsde_bench::config::{ExperimentConfig, StageKind};
use rbsde_bench::experiment::{run_experiment, EXIT_CONFIG};
use rbsde_bench::zoo::zoo_list;
use rbsde_core::rng::derive_seed;

#[derive(Parser)]
#[command(name = "rbsde", version, about = "Randomized penalized BSDE solver and finite-difference oracle")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Overrides the simulation seed; the evaluation seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (1 gives bit-reproducible output).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the problem assumptions only.
    Validate {
        config: PathBuf,
    },
    Simulate {
        config: PathBuf,
    },
    SolveBsde {
        config: PathBuf,
    },
    SolveHjb {
        config: PathBuf,
    },
    /// BSDE and finite-difference solves followed by the comparison.
    Compare {
        config: PathBuf,
    },
    /// The pipeline declared in the config.
    Run {
        config: PathBuf,
    },
    Zoo {
        #[command(subcommand)]
        action: ZooAction,
    },
}

#[derive(Subcommand)]
enum ZooAction {
    List,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    }
    let (path, stages) = match cli.command {
        Command::Zoo { action: ZooAction::List } => {
            println!("{}", serde_json::to_string_pretty(&zoo_list()).expect("zoo summaries serialize"));
            return ExitCode::SUCCESS;
        }
        Command::Validate { config } => (config, Some(vec![])),
        Command::Simulate { config } => (config, Some(vec![StageKind::Simulate])),
        Command::SolveBsde { config } => (config, Some(vec![StageKind::SolveBsde])),
        Command::SolveHjb { config } => (config, Some(vec![StageKind::SolveHjb])),
        Command::Compare { config } => {
            (config, Some(vec![StageKind::SolveBsde, StageKind::SolveHjb, StageKind::Compare]))
        }
        Command::Run { config } => (config, None),
    };
    let mut cfg = match ExperimentConfig::load(&path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    if let Some(s) = stages {
        cfg.pipeline = Some(s);
    }
    if let Some(seed) = cli.global.seed {
        cfg.seeds.simulation = seed;
        cfg.seeds.evaluation = derive_seed(seed, 1);
    }
    if let Some(dir) = cli.global.out_dir {
        cfg.output_dir = Some(dir);
    }
    let resolved = match cfg.resolve() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run_experiment(&resolved) {
        Ok(out) => {
            for s in &out.report.stages {
                eprintln!("{:<12} {:?}", s.stage, s.status);
                for v in s.invariants.iter().filter(|v| !v.pass) {
                    eprintln!("  {} failed: {}", v.name, v.detail);
                }
            }
            eprintln!("{} -> {}", out.report.outcome, out.output_dir.display());
            ExitCode::from(out.exit_code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
