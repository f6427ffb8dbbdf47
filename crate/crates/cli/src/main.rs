use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use mfcontrol_cli::{execute, load, Command, RunError};

#[derive(Parser)]
#[command(name = "mfcontrol", version, about = "Mean-field optimal control experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve, then run the analyses enabled in `[analysis]`.
    Run(Common),
    /// Solve the Pontryagin system only.
    Solve(Common),
    /// Solve and estimate the coercivity constant.
    Coercivity(Common),
    /// Solve and scan Lipschitz quotients of the controls.
    Lipschitz(Common),
    /// Convergence sweep over `sweep.n_list`.
    Sweep(Common),
    /// Solve and compare with the closed-form variance solution.
    Oracle(Common),
    /// Finite-difference and hypothesis checks only.
    Check(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, short)]
    verbose: bool,
}

fn split(cmd: Cmd) -> (Command, Common) {
    match cmd {
        Cmd::Run(c) => (Command::Run, c),
        Cmd::Solve(c) => (Command::Solve, c),
        Cmd::Coercivity(c) => (Command::Coercivity, c),
        Cmd::Lipschitz(c) => (Command::Lipschitz, c),
        Cmd::Sweep(c) => (Command::Sweep, c),
        Cmd::Oracle(c) => (Command::Oracle, c),
        Cmd::Check(c) => (Command::Check, c),
    }
}

fn run(command: Command, args: &Common) -> anyhow::Result<i32> {
    let loaded = load(&args.config).map_err(RunError::from)?;
    let seed = args.seed.unwrap_or(loaded.config.seed);
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from(&loaded.config.output.dir));
    let outcome = execute(&loaded, command, seed, &out)?;
    for f in &outcome.files {
        log::info!("wrote {}", outcome.out_dir.join(f).display());
    }
    let s = &outcome.summary;
    if let Some(sol) = &s.solve {
        println!("solve: converged={} iterations={} cost={:.12e}", sol.converged, sol.iterations, sol.cost);
    }
    if let Some(c) = &s.coercivity {
        println!("coercivity: rho_hat={:.6e} verdict={}", c.rho_hat, c.verdict.as_str());
    }
    if let Some(l) = &s.lipschitz {
        println!("lipschitz: lip_hat={:.6e} excluded_pairs={}", l.lip_hat, l.excluded_pairs);
    }
    if let Some(o) = &s.oracle {
        println!("oracle: max_control_error={:.3e} passed={}", o.max_control_error, o.passed);
    }
    if let Some(t) = &s.sweep {
        println!("sweep: {} members, reference N={}", t.rows.len(), t.reference_n);
    }
    if let Some(c) = &s.check {
        println!("check: passed={}", c.passed);
    }
    println!("summary: {}", outcome.out_dir.join("summary.json").display());
    Ok(s.status.exit_code())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, args) = split(cli.command);
    let level = if args.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool") {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    }
    match run(command, &args) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<RunError>().map_or(1, RunError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
