use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use mfgtube::{demo, run, CliError, RunConfig};

/// Reduced-order tube dynamics and planning solver for a quadratic
/// mean-field game.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Args {
    /// JSON run configuration.
    #[arg(long, conflicts_with = "demo", required_unless_present = "demo")]
    config: Option<PathBuf>,
    /// Bundled preset: ss-case, sc-case or pde-tworotation.
    #[arg(long)]
    demo: Option<String>,
    /// Output directory (overrides the config's `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the diagram task.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    workers: Option<u32>,
}

fn load(args: &Args) -> Result<RunConfig, CliError> {
    match (&args.config, &args.demo) {
        (Some(path), _) => RunConfig::load(path),
        (None, Some(name)) => demo(name).ok_or_else(|| CliError::Config(format!("unknown demo '{name}'"))),
        (None, None) => Err(CliError::Config("pass --config or --demo".into())),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match load(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let out = args.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    match run(&cfg, &out, args.workers.map(|w| w as usize)) {
        Ok(m) => {
            for s in &m.statuses {
                let tag = if s.converged { "ok" } else { "NOT CONVERGED" };
                eprintln!("{}: {tag} ({})", s.item, s.detail);
            }
            eprintln!("wrote {} files to {}", m.files.len(), out.display());
            ExitCode::from(m.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
