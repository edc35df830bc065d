use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbf_cli::commands::{cmd_curvature, cmd_project, cmd_resume, cmd_run};
use cbf_cli::verify::{cmd_verify, Fault};
use cbf_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbf", version, about = "Conformal Bach flow simulator and verification kit")]
struct Cli {
    /// Worker threads for point-parallel loops (falls back to CBF_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project the initial data and run the flow.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from this checkpoint instead of the initial data.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Continue a run from a checkpoint.
    Resume {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: PathBuf,
    },
    /// Evaluate the curvature of the initial data once.
    Curvature {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Project the initial data onto constant scalar curvature and checkpoint it.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run invariant suites: all, or a comma-separated list of curvature, oracle, pressure, flow.
    Verify {
        #[arg(long)]
        suite: String,
        /// Debug hook that breaks a component on purpose (`stencil`).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("CBF_THREADS") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("CBF_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn load(config: &Path, out: &Option<PathBuf>) -> Result<(RunConfig, PathBuf), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output.dir = o.clone();
    }
    let dir = cfg.output.dir.clone();
    Ok((cfg, dir))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = threads(cli.threads)? {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Run { config, out, resume } => {
            let (cfg, dir) = load(&config, &out)?;
            let m = match resume {
                Some(ck) => cmd_resume(&cfg, &dir, &ck)?,
                None => cmd_run(&cfg, &dir)?,
            };
            println!("{:?} at step {} (t = {:e}); {} records in {}", m.termination, m.final_step, m.final_t, m.records, dir.display());
        }
        Command::Resume { config, out, resume } => {
            let (cfg, dir) = load(&config, &out)?;
            let m = cmd_resume(&cfg, &dir, &resume)?;
            println!("{:?} at step {} (t = {:e}); {} records in {}", m.termination, m.final_step, m.final_t, m.records, dir.display());
        }
        Command::Curvature { config, out } => {
            let (cfg, dir) = load(&config, &out)?;
            let r = cmd_curvature(&cfg, &dir)?;
            for (k, v) in &r.residuals {
                println!("{k:<16} {v:.3e}");
            }
            println!("wrote {}", dir.join("curvature.json").display());
        }
        Command::Project { config, out } => {
            let (cfg, dir) = load(&config, &out)?;
            let m = cmd_project(&cfg, &dir)?;
            if let Some(p) = &m.projection {
                println!("s0 = {:.16e} after {} iterations (residual {:.2e})", p.s0, p.iterations, p.residual);
            }
            println!("wrote {}", dir.join("projected.bin").display());
        }
        Command::Verify { suite, inject_fault } => {
            let fault = match inject_fault.as_deref() {
                None => None,
                Some(f) => Some(Fault::parse(f).ok_or_else(|| CliError::Usage(format!("unknown fault {f:?}")))?),
            };
            let results = cmd_verify(&suite, fault)?;
            println!("all {} checks passed", results.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cbf: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
