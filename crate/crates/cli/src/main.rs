use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ranrc::check::run_invariant_suite;
use ranrc::experiment::{parse_config, run_experiment, CellStatus, ExperimentSpec};
use ranrc::Problem;

#[derive(Parser)]
#[command(name = "ranrc", version, about = "Robust asynchronous Newton-Raphson consensus experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep over step sizes and loss rates.
    Run(RunArgs),
    /// Run the invariant suite on a small random instance.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the centralized optimum of the configured problem.
    Oracle(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting; applied after the file, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated step sizes.
    #[arg(long)]
    epsilon: Option<String>,
    /// Comma-separated loss probabilities (or burst lengths).
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>, String> {
    args.set
        .iter()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))
        })
        .collect()
}

fn load(args: &ConfigArgs, extra: Vec<(String, String)>) -> Result<ExperimentSpec, String> {
    let mut pairs = overrides(args)?;
    pairs.extend(extra);
    parse_config(args.config.as_deref(), &pairs).map_err(|e| e.to_string())
}

fn run(args: RunArgs) -> Result<ExitCode, String> {
    let mut extra = Vec::new();
    if let Some(e) = args.epsilon {
        extra.push(("epsilon".to_string(), e));
    }
    if let Some(l) = args.loss {
        extra.push(("loss".to_string(), l));
    }
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    if let Some(o) = args.out {
        extra.push(("out".to_string(), o.display().to_string()));
    }
    let spec = load(&args.config, extra)?;
    print!("{}", spec.to_config_text());
    println!();

    let report = run_experiment(&spec).map_err(|e| e.to_string())?;
    println!(
        "{:<28} {:>14} {:>10} {:>14} {:>8} {:>6}",
        "cell", "status", "iters", "final_mse", "tau_hat", "L_hat"
    );
    for cell in &report.cells {
        match (&cell.summary, &cell.status) {
            (Some(s), status) => println!(
                "{:<28} {:>14} {:>10} {:>14.3e} {:>8} {:>6}",
                cell.stem,
                status.label(),
                s.iterations,
                s.final_mse,
                s.monitors.tau_hat,
                s.monitors.l_hat
            ),
            (None, CellStatus::Failed(msg)) => println!("{:<28} failed: {msg}", cell.stem),
            (None, status) => println!("{:<28} {}", cell.stem, status.label()),
        }
    }
    println!("outputs written to {}", spec.out_dir.display());
    Ok(if report.all_ran() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn check(seed: u64) -> ExitCode {
    let outcomes = run_invariant_suite(seed);
    let mut ok = true;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        ok &= o.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn oracle(args: ConfigArgs) -> Result<ExitCode, String> {
    let spec = load(&args, Vec::new())?;
    let problem = Problem::build(&spec.base.graph, &spec.base.cost).map_err(|e| e.to_string())?;
    let mut grad = ranrc::linalg::Vector::zeros(problem.dimension());
    for m in &problem.models {
        grad += m.gradient(&problem.x_star).map_err(|e| e.to_string())?;
    }
    let coords: Vec<String> = problem.x_star.iter().map(|v| format!("{v:e}")).collect();
    println!("x_star = {}", coords.join(","));
    println!("gradient_norm = {:e}", grad.norm());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Check { seed } => Ok(check(seed)),
        Command::Oracle(args) => oracle(args),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
