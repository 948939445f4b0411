use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rydswitch::cli::run;
use rydswitch::config::{RunConfig, Task};

#[derive(Parser)]
#[command(name = "rydswitch", version, about = "Metastability and switching in driven-dissipative Rydberg ensembles")]
struct Args {
    #[command(subcommand)]
    verb: Verb,
    /// JSON run configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Drop sizes above this N.
    #[arg(long, global = true)]
    max_n: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Mean-field fixed points and regimes along the detuning.
    PhaseDiagram,
    /// Liouvillian gaps over the (N, delta) sweep.
    Spectrum,
    /// Metastable states, occupation ratios and n_e distributions.
    Metastable,
    /// Photon-counting SCGF and rate function.
    Ld,
    /// Quantum-jump switching statistics.
    Trajectories,
    /// Minimum-action paths and barriers.
    Instanton,
    /// The three barrier estimates side by side (runs what it needs).
    Compare,
    /// Everything.
    All,
}

impl From<Verb> for Task {
    fn from(v: Verb) -> Self {
        match v {
            Verb::PhaseDiagram => Task::PhaseDiagram,
            Verb::Spectrum => Task::Spectrum,
            Verb::Metastable => Task::Metastable,
            Verb::Ld => Task::Ld,
            Verb::Trajectories => Task::Trajectories,
            Verb::Instanton => Task::Instanton,
            Verb::Compare => Task::Compare,
            Verb::All => Task::All,
        }
    }
}

const EXIT_CONFIG: u8 = 2;
const EXIT_TASK: u8 = 3;

fn load(args: &Args) -> rydswitch::Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(max_n) = args.max_n {
        cfg.cap_sizes(max_n)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(EXIT_CONFIG);
        }
        rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global().expect("thread pool already built");
    }
    rydswitch::init_sequential_linalg();
    match run(&cfg, args.verb.into()) {
        Ok(report) if !report.failed() => ExitCode::SUCCESS,
        Ok(report) => {
            for o in report.outcomes.iter().filter(|o| !o.ok) {
                eprintln!("task {} failed: {}", o.task, o.error.as_deref().unwrap_or(""));
            }
            ExitCode::from(EXIT_TASK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_TASK)
        }
    }
}
