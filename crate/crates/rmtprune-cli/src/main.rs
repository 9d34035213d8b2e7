//! `rmtprune`: spectral analysis, pruning, training and verification
//! experiments from the command line.
//!
//! Exit codes: 0 success, 1 usage or contract error, 2 numeric failure.
//! Every run writes a JSON manifest next to its reports, also on failure.

mod analyze;
mod prune;
mod regress;
mod run;
mod spiked;
mod train;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use run::{manifest_for, Failure, RunManifest, EXIT_CONTRACT};

/// Environment variable holding the worker thread count.
const THREADS_ENV: &str = "RMTPRUNE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "rmtprune", version, about = "Random-matrix spectral analysis and pruning of dense networks")]
struct Cli {
    /// Manifest path; defaults to `<report>.manifest.json`.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    Analyze(analyze::AnalyzeArgs),
    Prune(prune::PruneArgs),
    Train(train::TrainArgs),
    Verify(verify::VerifyArgs),
    Spiked(spiked::SpikedArgs),
    Regress(regress::RegressArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze(_) => "analyze",
            Command::Prune(_) => "prune",
            Command::Train(_) => "train",
            Command::Verify(_) => "verify",
            Command::Spiked(_) => "spiked",
            Command::Regress(_) => "regress",
        }
    }

    fn default_manifest(&self) -> PathBuf {
        match self {
            Command::Analyze(a) => manifest_for(&a.report, false),
            Command::Prune(a) => manifest_for(&a.report, false),
            Command::Train(a) => manifest_for(&a.log, false),
            Command::Verify(a) => manifest_for(&a.out, false),
            Command::Spiked(a) => manifest_for(&a.out, false),
            Command::Regress(a) => manifest_for(&a.out, true),
        }
    }

    fn execute(&self, m: &mut RunManifest) -> run::CliResult<()> {
        match self {
            Command::Analyze(a) => analyze::run(a, m),
            Command::Prune(a) => prune::run(a, m),
            Command::Train(a) => train::run(a, m),
            Command::Verify(a) => verify::run(a, m),
            Command::Spiked(a) => spiked::run(a, m),
            Command::Regress(a) => regress::run(a, m),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("thread pool: {e}")))
}

/// Best-effort manifest location for argument lists clap rejected.
fn manifest_from_raw(args: &[String]) -> Option<(String, PathBuf)> {
    let sub = args.get(1).filter(|s| !s.starts_with('-'))?.clone();
    let value = |flag: &str| {
        args.iter().enumerate().find_map(|(i, a)| {
            a.strip_prefix(&format!("{flag}="))
                .map(String::from)
                .or_else(|| (a == flag).then(|| args.get(i + 1).cloned()).flatten())
        })
    };
    if let Some(m) = value("--manifest") {
        return Some((sub, PathBuf::from(m)));
    }
    let (flag, dir) = match sub.as_str() {
        "analyze" | "prune" => ("--report", false),
        "train" => ("--log", false),
        "regress" => ("--out", true),
        _ => ("--out", false),
    };
    value(flag).map(|p| (sub, manifest_for(Path::new(&p), dir)))
}

fn finish(mut m: RunManifest, path: &Path, start: Instant, outcome: Result<(), Failure>) -> ExitCode {
    m.wall_clock_secs = start.elapsed().as_secs_f64();
    let code = match &outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("rmtprune {}: {f}", m.subcommand);
            m.error = Some(f.to_string());
            f.exit_code()
        }
    };
    m.exit_code = code;
    if let Err(e) = m.write(path) {
        eprintln!("rmtprune: cannot write manifest {}: {e}", path.display());
        return ExitCode::from(code.max(EXIT_CONTRACT) as u8);
    }
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let start = Instant::now();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return match manifest_from_raw(&argv) {
                Some((sub, path)) => {
                    finish(RunManifest::new(&sub, argv.clone()), &path, start, Err(Failure::Usage(e.to_string())))
                }
                None => ExitCode::from(EXIT_CONTRACT as u8),
            };
        }
    };
    let path = cli.manifest.clone().unwrap_or_else(|| cli.command.default_manifest());
    let mut manifest = RunManifest::new(cli.command.name(), argv);
    let outcome = configure_threads().and_then(|()| cli.command.execute(&mut manifest));
    finish(manifest, &path, start, outcome)
}
