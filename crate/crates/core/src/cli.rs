//! Command-line surface of the `fscil` binary.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::checkpoint::{audit_checkpoint, Checkpoint};
use crate::config::{Config, TrackSelection};
use crate::error::{Error, Result};
use crate::metrics::{average_accuracy, performance_drop, round_half_up, EvalReport, ReportFormat, Timestamps};
use crate::sessions::{build_report, stage3_incremental_session, start_pipeline, PipelineState, Protocol};

pub const LOG_ENV: &str = "FSCIL_LOG_LEVEL";

#[derive(Parser, Debug)]
#[command(name = "fscil", version, about = "Few-shot class-incremental training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset and session split into a directory.
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Directory written by gen-data; generated in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated components to disable: vcg, ct, pfs, us.
        #[arg(long)]
        ablate: Option<String>,
        #[command(flatten)]
        output: OutputArgs,
        /// Stop after this session (a checkpoint directory makes it resumable).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Continue a run from a session checkpoint.
    Resume {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides the data directory recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// AA and PD of a list of session accuracies.
    Metrics {
        #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
        accuracies: Vec<f64>,
    },
    /// Re-verify every recorded pseudo-feature of a checkpoint.
    PfsAudit {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Convert a JSON report to the long-format CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    track: Option<TrackSelection>,
    /// Write a checkpoint after every session into this directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(seed) = self.seed {
            config.data.seed = seed;
        }
        Ok(config)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn print_summary(report: &EvalReport) {
    for t in &report.tracks {
        let acc: Vec<String> = t.accuracies().iter().map(|a| format!("{:.2}", round_half_up(*a, 2))).collect();
        println!(
            "{}: {} AA={:.2} PD={:.2}",
            t.name.name(),
            acc.join(" "),
            round_half_up(t.aa, 2),
            round_half_up(t.pd, 2)
        );
    }
    for w in &report.warnings {
        println!("warning: {w}");
    }
}

/// Runs the remaining sessions, checkpointing and reporting as requested.
fn drive(
    state: &mut PipelineState,
    protocol: &Protocol,
    config: &Config,
    data_dir: Option<&Path>,
    output: &OutputArgs,
    stop_after: Option<usize>,
    started: u64,
) -> Result<()> {
    let save = |state: &PipelineState| -> Result<()> {
        if let (Some(dir), Some(done)) = (&output.checkpoint_dir, state.completed) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(Checkpoint::file_name(done));
            Checkpoint::new(config, data_dir, state).save(&path)?;
            info!("checkpoint written to {}", path.display());
        }
        Ok(())
    };
    save(state)?;
    let limit = stop_after.map_or(protocol.sessions.len(), |s| (s + 1).min(protocol.sessions.len()));
    while state.next_session() < limit {
        stage3_incremental_session(state, protocol, config)?;
        save(state)?;
    }
    if state.next_session() < protocol.sessions.len() {
        println!("stopped after session {}", state.completed.unwrap_or(0));
        return Ok(());
    }
    let tracks = output.track.unwrap_or(config.eval.tracks);
    let mut report = build_report(state, config, tracks)?;
    report.timestamps = Some(Timestamps { started_unix: started, finished_unix: unix_now() });
    if let Some(path) = &output.report {
        report.emit(path, ReportFormat::Json)?;
        info!("report written to {}", path.display());
    }
    print_summary(&report);
    Ok(())
}

fn load_protocol(config: &Config, data: Option<&Path>) -> Result<Protocol> {
    match data {
        Some(dir) => Protocol::load(dir),
        None => Protocol::generate(&config.data),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let config = common.load()?;
            let protocol = Protocol::generate(&config.data)?;
            protocol.save(&out)?;
            println!(
                "wrote {} images in {} sessions to {}",
                protocol.samples.len(),
                protocol.sessions.len(),
                out.display()
            );
            Ok(())
        }
        Command::Run { common, data, ablate, output, stop_after } => {
            let started = unix_now();
            let mut config = common.load()?;
            if let Some(list) = &ablate {
                config.ablation.disable(list)?;
            }
            if let Some(track) = output.track {
                config.eval.tracks = track;
            }
            config.validate()?;
            let protocol = load_protocol(&config, data.as_deref())?;
            let mut state = start_pipeline(&protocol, &config)?;
            drive(&mut state, &protocol, &config, data.as_deref(), &output, stop_after, started)
        }
        Command::Resume { checkpoint, data, output } => {
            let started = unix_now();
            let ck = Checkpoint::load(&checkpoint)?;
            let mut config = ck.config;
            if let Some(track) = output.track {
                config.eval.tracks = track;
            }
            let data_dir = data.or(ck.data_dir);
            let protocol = load_protocol(&config, data_dir.as_deref())?;
            let mut state = ck.state;
            drive(&mut state, &protocol, &config, data_dir.as_deref(), &output, None, started)
        }
        Command::Metrics { accuracies } => {
            let aa = average_accuracy(&accuracies)?;
            let pd = performance_drop(&accuracies)?;
            println!("AA={:.2} PD={:.2}", round_half_up(aa, 2), round_half_up(pd, 2));
            Ok(())
        }
        Command::PfsAudit { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let audits = audit_checkpoint(&ck.state)?;
            let mut failed = false;
            for (session, a) in &audits {
                println!(
                    "session {session}: {} accepted, {} fallbacks, convex {} prediction {} entropy {} count {} (max reconstruction error {:e}) {}",
                    a.checked,
                    a.fallbacks,
                    a.reconstruction_failures,
                    a.prediction_failures,
                    a.entropy_failures,
                    a.count_failures,
                    a.max_reconstruction_error,
                    if a.passed() { "PASS" } else { "FAIL" }
                );
                failed |= !a.passed();
            }
            if audits.is_empty() {
                println!("no pseudo-features recorded");
            }
            if failed {
                return Err(Error::Consistency("pseudo-feature audit failed".into()));
            }
            Ok(())
        }
        Command::Report { input, out } => {
            let report = EvalReport::load(&input)?;
            report.emit(&out, ReportFormat::Csv)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on runtime errors, 2 on usage errors.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    init_logging();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(cli_main(["fscil", "run", "--bogus"]), 2);
        assert_eq!(cli_main(["fscil", "nothing"]), 2);
        assert_eq!(cli_main(["fscil", "run", "--track", "maybe"]), 2);
    }

    #[test]
    fn runtime_errors_exit_with_one() {
        assert_eq!(cli_main(["fscil", "run", "--config", "/nonexistent/c.toml"]), 1);
        assert_eq!(cli_main(["fscil", "run", "--ablate", "vcg,xyz"]), 1);
        assert_eq!(cli_main(["fscil", "pfs-audit", "--checkpoint", "/nonexistent"]), 1);
    }

    #[test]
    fn metrics_command() {
        assert_eq!(cli_main(["fscil", "metrics", "--accuracies", "96.38,94.54,92.74,92.03,91.04,90.41,90.68,90.66,89.59"]), 0);
        assert_eq!(cli_main(["fscil", "metrics"]), 2);
    }
}
