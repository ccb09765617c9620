//! `dcn`: synthesize datasets, train, evaluate, segment and run the
//! verification suites.
//!
//! Exit codes: 0 success, 1 runtime or verification failure, 2 usage or
//! configuration error.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dualcore::commands::{cmd_eval, cmd_segment, cmd_synth, cmd_train, EvalSplit, TrainOptions};
use dualcore::config::Config;
use dualcore::verify::{run_suite, Suite};
use dualcore::{Error, Precision, Result};

#[derive(Debug, Parser)]
#[command(name = "dcn", version, about = "Dual-path mass segmentation and classification")]
struct Cli {
    /// INI configuration; defaults apply to every key it leaves out.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides `[run] seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `[run] precision`.
    #[arg(long, global = true, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from a `state.ckpt`.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Stop after this many epochs, saving a resumable state.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Evaluate every image, or one side of the configured split.
        #[arg(long, default_value = "all", value_parser = ["all", "train", "test"])]
        split: String,
        /// Directory for `report.txt` and `roc.svg`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Segment and classify one image treated as a bounding-box ROI.
    Segment {
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        #[arg(long, value_name = "PGM")]
        image: PathBuf,
        #[arg(long, value_name = "PGM")]
        mask_out: PathBuf,
        /// Soft mask output; defaults to `<mask stem>.soft.pgm`.
        #[arg(long, value_name = "PGM")]
        soft_out: Option<PathBuf>,
    },
    /// Run property suites; prints one PASS/FAIL line per check.
    Verify {
        #[arg(long, default_value = "all", value_parser = ["grad", "crf", "metrics", "all"])]
        suite: String,
    },
}

/// Internal parallelism cap. The kernels run on one thread, so this is
/// validated and otherwise has no effect.
fn thread_cap() -> Result<usize> {
    match std::env::var("DCN_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("DCN_THREADS={v} is not a positive integer"))),
        },
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run.seed = seed;
    }
    if let Some(p) = &cli.precision {
        cfg.run.precision = p.parse::<Precision>().map_err(Error::Config)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<ExitCode> {
    thread_cap()?;
    let cfg = load_config(&cli)?;
    let mut stderr = std::io::stderr();
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Synth { out, count } => {
            cmd_synth(&out, count, cfg.run.seed, &cfg.data.synth)?;
            let _ = writeln!(stdout, "wrote {count} images to {}", out.display());
        }
        Command::Train { data, out, resume, max_epochs } => {
            let opts = TrainOptions { resume, max_epochs };
            let outcome = cmd_train(&cfg, &data, &out, &opts, &mut stderr)?;
            if let Some(report) = outcome.report {
                if let Some(d) = report.mean_dice() {
                    let _ = writeln!(stdout, "test dice {d:.6}");
                }
                for (split, roc) in &report.rocs {
                    let _ = writeln!(stdout, "auc {split} {:.6}", roc.auc);
                }
            }
        }
        Command::Eval { ckpt, data, split, out } => {
            let split: EvalSplit = split.parse()?;
            let report = cmd_eval(&cfg, &ckpt, &data, split, out.as_deref())?;
            if let Some(d) = report.mean_dice() {
                let _ = writeln!(stdout, "mean dice {d:.6}");
            }
            let _ = write!(stdout, "{}", report.to_text());
        }
        Command::Segment { ckpt, image, mask_out, soft_out } => {
            let o = cmd_segment(&cfg, &ckpt, &image, &mask_out, soft_out.as_deref())?;
            let [fused, lpl, cgl] = o.class_probs;
            let _ = writeln!(stdout, "p_malignant fused {fused:.6} lpl {lpl:.6} cgl {cgl:.6}");
            let _ = writeln!(stdout, "foreground {:.6}", o.foreground_fraction);
            let _ = writeln!(stdout, "wrote {} and {}", mask_out.display(), o.soft_path.display());
        }
        Command::Verify { suite } => {
            let suite: Suite = suite.parse()?;
            let mut all = true;
            for check in run_suite(suite, cfg.run.seed) {
                all &= check.pass;
                let _ = writeln!(stdout, "{check}");
            }
            return Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}
