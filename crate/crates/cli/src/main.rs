use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairmesh_cli::config::{Seeds, OUT_ENV};
use fairmesh_cli::{
    analyze_report, compare_schedulers, presets, run_experiment, ExperimentConfig, RunError,
};

/// Fair-scheduling and wormhole-mesh experiments.
#[derive(Parser)]
#[command(name = "fairmesh", version)]
struct Cli {
    /// Run with this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment from a JSON config (or `preset:NAME`).
    Run { config: String },
    /// Run two or more schedulers on identical arrivals and tabulate them.
    Compare { config: String },
    /// Summarise a stored report.json, including the S-ratio check.
    Analyze {
        report: PathBuf,
        /// Feasibility tolerance; defaults to the report's own.
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// List embedded presets, or print one.
    Presets { name: Option<String> },
}

fn load(spec: &str, seed: Option<u64>) -> Result<ExperimentConfig, RunError> {
    let mut cfg = ExperimentConfig::load(spec)?;
    if let Some(s) = seed {
        cfg.seed = Seeds::One(s);
    }
    Ok(cfg)
}

fn report_files(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.cmd {
        Cmd::Run { config } => {
            let cfg = load(&config, cli.seed)?;
            let outcome = run_experiment(&cfg)?;
            report_files(&outcome.write_to(&cfg.resolve_output_dir())?);
        }
        Cmd::Compare { config } => {
            let cfg = load(&config, cli.seed)?;
            let (outcome, rows) = compare_schedulers(&cfg)?;
            println!(
                "{:>6} {:>10} {:>4} {:>10} {:>12} {:>8} {:>8}",
                "seed", "scheduler", "flow", "thruput", "mean_lat", "FM_rfb", "FM_cfb"
            );
            for r in &rows {
                println!(
                    "{:>6} {:>10} {:>4} {:>10.4} {:>12.1} {:>8.1} {:>8.1}",
                    r.seed, r.scheduler, r.flow, r.throughput, r.mean_latency, r.fm_rfb, r.fm_cfb
                );
            }
            report_files(&outcome.write_to(&cfg.resolve_output_dir())?);
        }
        Cmd::Analyze { report, epsilon } => {
            let analysis = analyze_report(&report, epsilon)?;
            print!("{analysis}");
            let dir = std::env::var_os(OUT_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
                .unwrap_or_else(|| report.parent().unwrap_or(Path::new(".")).to_path_buf());
            std::fs::create_dir_all(&dir).map_err(|source| RunError::Write {
                path: dir.clone(),
                source,
            })?;
            let path = dir.join("analysis.json");
            let body = serde_json::to_string_pretty(&analysis)? + "\n";
            std::fs::write(&path, body).map_err(|source| RunError::Write {
                path: path.clone(),
                source,
            })?;
            report_files(&[path]);
        }
        Cmd::Presets { name: None } => {
            for n in presets::names() {
                println!("{n}");
            }
        }
        Cmd::Presets { name: Some(n) } => match presets::get(&n) {
            Some(body) => print!("{body}"),
            None => return Err(fairmesh_cli::ConfigError::UnknownPreset(n).into()),
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
