use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mildpos::experiment::{self, RunOptions, EXIT_FAILURE, EXIT_OK, EXIT_VALIDATION};

#[derive(Parser)]
#[command(
    name = "mildpos",
    version,
    about = "Positivity experiments for mild solutions of forward-rate SPDEs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    /// Output directory; overrides `output.directory`.
    #[arg(long, env = "MILDPOS_OUT")]
    out: Option<PathBuf>,
    /// Exit with status 4 if the experiment's acceptance checks fail.
    #[arg(long)]
    assert: bool,
    #[arg(long)]
    validate_only: bool,
    /// Dotted `key=value` overrides, e.g. `time.scheme=react-then-shift`.
    overrides: Vec<String>,
}

fn code(c: i32) -> ExitCode {
    ExitCode::from(c as u8)
}

fn print_diagnostics(diags: &[experiment::Diagnostic]) {
    for d in diags {
        eprintln!("error: {d}");
    }
}

fn validate(config: &Path) -> ExitCode {
    match experiment::validate_file(config) {
        Ok(d) if d.is_empty() => {
            println!("{}: ok", config.display());
            code(EXIT_OK)
        }
        Ok(d) => {
            print_diagnostics(&d);
            code(EXIT_VALIDATION)
        }
        Err(e) => {
            eprintln!("error: {e}");
            code(EXIT_FAILURE)
        }
    }
}

fn run(args: RunArgs) -> ExitCode {
    let mut overrides = args.overrides;
    if let Some(s) = args.seed {
        overrides.push(format!("noise.seed={s}"));
    }
    if let Some(p) = args.paths {
        overrides.push(format!("noise.n_paths={p}"));
    }
    if let Some(dt) = args.dt {
        overrides.push(format!("time.dt={dt:?}"));
    }
    let cfg = match experiment::load_config(&args.config, &overrides) {
        Ok(c) => c,
        Err(d) => {
            print_diagnostics(&d);
            return code(EXIT_VALIDATION);
        }
    };
    if args.validate_only {
        let d = experiment::validate(&cfg);
        print_diagnostics(&d);
        return code(if d.is_empty() { EXIT_OK } else { EXIT_VALIDATION });
    }
    let outcome = experiment::run(
        &cfg,
        &RunOptions {
            out_dir: args.out,
            assert: args.assert,
        },
    );
    let m = &outcome.manifest;
    for e in m["errors"].as_array().into_iter().flatten() {
        eprintln!("error: {}", e.as_str().unwrap_or_default());
    }
    for a in m["assertions"].as_array().into_iter().flatten() {
        let status = if a["pass"].as_bool() == Some(true) {
            "PASS"
        } else {
            "FAIL"
        };
        println!(
            "{status} {}: {}",
            a["name"].as_str().unwrap_or_default(),
            a["detail"].as_str().unwrap_or_default()
        );
    }
    if let Some(c) = m.get("verdict").and_then(|v| v.get("classification")) {
        println!("verdict: {}", c.as_str().unwrap_or_default());
    }
    println!("artifacts written to {}", outcome.out_dir.display());
    code(outcome.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { config } => validate(&config),
    }
}
