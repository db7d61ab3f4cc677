//! Pipeline driver: subcommands that chain the label-distillation stages,
//! a single TOML configuration with dotted-key overrides, content-addressed
//! stage directories inside one run directory, and figure/report emission.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use endoked_core::{Error, ErrorCategory, Result};

pub mod config;
pub mod http_llm;
pub mod plots;
pub mod stages;

pub use config::{load_config, PipelineConfig};
pub use stages::{RunLock, StageOutcome};

#[derive(Parser)]
#[command(
    name = "endoked",
    version,
    about = "Distil colonoscopy report labels down to pixel masks and transfer \
             the encoder to pathology prediction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct CommonArgs {
    /// TOML configuration; built-in defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run directory that receives content-addressed stage outputs.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Global seed (applied after --set, like --set seed=N).
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Dotted-key override, e.g. --set mil.train.rounds=10 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset: manifest, images, truth sidecar.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Extract one report label per record into labels.tsv.
    ExtractLabels {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (defaults to the run's synth stage).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train the report->image detector and evaluate it on held-out records.
    TrainMil {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (defaults to the run's synth stage).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// labels.tsv (defaults to the run's extract stage).
        #[arg(long, value_name = "FILE")]
        labels: Option<PathBuf>,
    },
    /// Distil pixel pseudo-masks: CAM boxes prompt a segmenter, refined
    /// iteratively against a small segmentation model.
    DistillMasks {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (defaults to the run's synth stage).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Detector checkpoint (defaults to the run's mil stage).
        #[arg(long, value_name = "FILE")]
        mil: Option<PathBuf>,
    },
    /// Train a fresh segmentation model on distilled masks.
    TrainSeg {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (defaults to the run's synth stage).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Mask directory (defaults to the run's distill stage).
        #[arg(long, value_name = "DIR")]
        masks: Option<PathBuf>,
    },
    /// Transfer the detector encoder to pathology prediction with few-shot
    /// data-efficiency curves.
    FinetuneBiopsy {
        #[command(flatten)]
        common: CommonArgs,
        /// Dataset directory (defaults to the run's synth stage).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Detector checkpoint (defaults to the run's mil stage).
        #[arg(long, value_name = "FILE")]
        mil: Option<PathBuf>,
    },
    /// Consolidate metrics and draw figures from completed stages.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Serve truth-derived masks over stdin/stdout (subprocess segmenter
    /// child process).
    #[command(hide = true)]
    OracleServe {
        /// Truth sidecar JSON.
        #[arg(long, value_name = "FILE")]
        truth: PathBuf,
        #[arg(long, default_value = "exact")]
        noise: String,
        #[arg(long, default_value_t = 0)]
        radius: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_from(common: &CommonArgs) -> Result<PipelineConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    config::load_config(common.config.as_deref(), &overrides)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_synth(&cfg, &common.out).map(drop)
        }
        Command::ExtractLabels { common, data } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_extract_labels(&cfg, &common.out, data.as_deref()).map(drop)
        }
        Command::TrainMil { common, data, labels } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_train_mil(&cfg, &common.out, data.as_deref(), labels.as_deref()).map(drop)
        }
        Command::DistillMasks { common, data, mil } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_distill_masks(&cfg, &common.out, data.as_deref(), mil.as_deref()).map(drop)
        }
        Command::TrainSeg { common, data, masks } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_train_seg(&cfg, &common.out, data.as_deref(), masks.as_deref()).map(drop)
        }
        Command::FinetuneBiopsy { common, data, mil } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_finetune_biopsy(&cfg, &common.out, data.as_deref(), mil.as_deref())
                .map(drop)
        }
        Command::Report { common } => {
            let cfg = load_from(&common)?;
            let _lock = RunLock::acquire(&common.out)?;
            stages::cmd_report(&cfg, &common.out).map(drop)
        }
        Command::OracleServe { truth, noise, radius, seed } => {
            stages::cmd_oracle_serve(&truth, &noise, radius, seed)
        }
    }
}

/// Exit code for a pipeline error.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
    }
}

/// Parse arguments, run the selected command, and map the outcome to a
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2_and_help_exits_0() {
        assert_eq!(run(["endoked", "no-such-command"]), 2);
        assert_eq!(run(["endoked", "synth"]), 2); // missing --out
        assert_eq!(run(["endoked", "--help"]), 0);
    }

    #[test]
    fn config_errors_exit_2_without_touching_the_run_dir() {
        let out = tempfile::tempdir().unwrap();
        let run_dir = out.path().join("run");
        let code = run([
            "endoked",
            "synth",
            "--out",
            run_dir.to_str().unwrap(),
            "--set",
            "synth.n_records=0",
        ]);
        assert_eq!(code, 2);
        assert!(!run_dir.exists());
    }

    #[test]
    fn missing_inputs_exit_3() {
        let out = tempfile::tempdir().unwrap();
        let code = run([
            "endoked",
            "train-mil",
            "--out",
            out.path().to_str().unwrap(),
        ]);
        assert_eq!(code, 3);
    }
}
