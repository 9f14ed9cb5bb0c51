//! Command-line front end for the harmonization pipeline.
//!
//! Configuration precedence, highest first: command-line flags, then the
//! optional JSON configuration file (`--config`, sections `simulate`,
//! `train`, `csd`), then built-in defaults.
//!
//! Exit codes: 0 on success, 1 when inputs or configuration are invalid,
//! 2 on runtime failures (clap also uses 2 for usage errors), 3 when the run
//! succeeded but some deconvolutions stopped at the iteration cap.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use nsdn_core::cli::{
    self, cmd_evaluate, cmd_pipeline, cmd_predict, cmd_report, cmd_simulate, cmd_train,
    load_file_config, EvaluateRun, FileConfig, PredictRun, ReportRun, TrainRun,
};
use nsdn_core::phantom::ProfileSpec;
use nsdn_core::Error;

#[derive(Parser)]
#[command(
    name = "nsdn",
    version,
    about = "Scanner harmonization of diffusion-MRI fiber distributions on synthetic data"
)]
struct Cli {
    /// Directory for generated files.
    #[arg(long, global = true, env = "NSDN_OUT_DIR", default_value = "nsdn_out")]
    out_dir: PathBuf,
    /// JSON configuration file with `simulate` / `train` / `csd` sections.
    #[arg(long, global = true, env = "NSDN_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate datasets and the single-fiber response.
    Simulate(SimulateArgs),
    /// Train the harmonizer (and optionally its consistency-free twin).
    Train(TrainArgs),
    /// Run a saved model over a dataset file.
    Predict(PredictArgs),
    /// Score trained models and the deconvolution baseline.
    Evaluate(EvaluateArgs),
    /// Render a report file as text and export histogram CSV.
    Report(ReportArgs),
    /// simulate + train (both models) + evaluate + report in one go.
    Pipeline(PipelineArgs),
}

fn parse_profile(s: &str) -> Result<ProfileSpec, Error> {
    s.parse()
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Labeled training entries (multiple of rotations + 1).
    #[arg(long)]
    train_labeled: Option<usize>,
    /// Labeled entries withheld for blind evaluation.
    #[arg(long)]
    blind_labeled: Option<usize>,
    #[arg(long)]
    train_paired: Option<usize>,
    #[arg(long)]
    eval_paired: Option<usize>,
    /// Extra rotations per base voxel in the training pools.
    #[arg(long)]
    rotations: Option<usize>,
    /// Reference scanner, e.g. "dirs=96,b=2000,sigma=0.04,gain=1,rot=0".
    #[arg(long, value_parser = parse_profile)]
    profile_truth: Option<ProfileSpec>,
    #[arg(long, value_parser = parse_profile)]
    profile_a: Option<ProfileSpec>,
    #[arg(long, value_parser = parse_profile)]
    profile_b: Option<ProfileSpec>,
    /// Scanner kept out of training; paired with profile A for evaluation.
    #[arg(long, value_parser = parse_profile)]
    profile_c: Option<ProfileSpec>,
}

#[derive(Args)]
struct TrainArgs {
    /// Labeled dataset (defaults to <out-dir>/train_labeled.jsonl).
    #[arg(long)]
    labeled: Option<PathBuf>,
    /// Paired dataset (defaults to <out-dir>/train_paired.jsonl).
    #[arg(long)]
    paired: Option<PathBuf>,
    /// Train from labeled data only.
    #[arg(long, conflicts_with = "paired")]
    no_paired: bool,
    /// Model name; files are model_<name>.json / cv_<name>.json.
    #[arg(long, default_value = "nsdn")]
    name: String,
    /// Also train the baseline twin (same seed, consistency term off) as `dn`.
    #[arg(long)]
    with_dn: bool,
    /// Weight of the paired-consistency loss term.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Cross-validation folds (below 2 skips cross-validation).
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Output path (defaults to <out-dir>/predictions_<model>_<dataset>.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    blind_labeled: Option<PathBuf>,
    #[arg(long)]
    paired_seen: Option<PathBuf>,
    #[arg(long)]
    paired_unseen: Option<PathBuf>,
    #[arg(long)]
    model_nsdn: Option<PathBuf>,
    #[arg(long)]
    model_dn: Option<PathBuf>,
    #[arg(long)]
    response: Option<PathBuf>,
    /// Report destination (defaults to <out-dir>/report.json).
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report file (defaults to <out-dir>/report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Histogram CSV destination (defaults to <out-dir>/report_histograms.csv).
    #[arg(long)]
    csv_out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Overrides both the simulation and training seeds.
    #[arg(long)]
    seed: Option<u64>,
}

fn stem(path: &PathBuf) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string())
}

/// Runs one subcommand; returns the number of warnings to surface via exit
/// code 3.
fn run(cli: Cli) -> Result<usize, Error> {
    let mut cfg: FileConfig = load_file_config(cli.config.as_deref())?;
    let out_dir = &cli.out_dir;
    match cli.cmd {
        Cmd::Simulate(args) => {
            macro_rules! set {
                ($($field:ident),*) => {
                    $(if let Some(v) = args.$field { cfg.simulate.$field = v; })*
                };
            }
            set!(
                seed,
                train_labeled,
                blind_labeled,
                train_paired,
                eval_paired,
                rotations,
                profile_truth,
                profile_a,
                profile_b,
                profile_c
            );
            let out = cmd_simulate(&cfg.simulate, out_dir)?;
            for f in out.files() {
                println!("wrote {}", f.display());
            }
            Ok(0)
        }
        Cmd::Train(args) => {
            macro_rules! set {
                ($($field:ident),*) => {
                    $(if let Some(v) = args.$field { cfg.train.$field = v; })*
                };
            }
            set!(
                lambda,
                epochs,
                batch_size,
                folds,
                val_fraction,
                learning_rate,
                seed
            );
            let paired = if args.no_paired {
                None
            } else {
                Some(
                    args.paired
                        .unwrap_or_else(|| out_dir.join(cli::TRAIN_PAIRED_FILE)),
                )
            };
            let run = TrainRun {
                labeled: args
                    .labeled
                    .unwrap_or_else(|| out_dir.join(cli::TRAIN_LABELED_FILE)),
                paired,
                name: args.name,
                with_dn: args.with_dn,
                config: cfg.train,
            };
            let out = cmd_train(&run, out_dir)?;
            for (name, path) in out.models.iter().chain(&out.cv_reports) {
                println!("wrote {} ({name})", path.display());
            }
            Ok(0)
        }
        Cmd::Predict(args) => {
            let out = args.out.unwrap_or_else(|| {
                out_dir.join(format!(
                    "predictions_{}_{}.jsonl",
                    stem(&args.model),
                    stem(&args.dataset)
                ))
            });
            let path = cmd_predict(&PredictRun {
                model: args.model,
                dataset: args.dataset,
                out,
            })?;
            println!("wrote {}", path.display());
            Ok(0)
        }
        Cmd::Evaluate(args) => {
            let run = EvaluateRun {
                blind_labeled: args
                    .blind_labeled
                    .unwrap_or_else(|| out_dir.join(cli::BLIND_LABELED_FILE)),
                paired_seen: args
                    .paired_seen
                    .unwrap_or_else(|| out_dir.join(cli::EVAL_PAIRED_SEEN_FILE)),
                paired_unseen: args
                    .paired_unseen
                    .unwrap_or_else(|| out_dir.join(cli::EVAL_PAIRED_UNSEEN_FILE)),
                model_nsdn: args
                    .model_nsdn
                    .unwrap_or_else(|| out_dir.join(cli::model_file("nsdn"))),
                model_dn: args
                    .model_dn
                    .unwrap_or_else(|| out_dir.join(cli::model_file("dn"))),
                response: args
                    .response
                    .unwrap_or_else(|| out_dir.join(cli::RESPONSE_FILE)),
                csd: cfg.csd,
                report_out: args
                    .report_out
                    .unwrap_or_else(|| out_dir.join(cli::REPORT_FILE)),
            };
            let out = cmd_evaluate(&run)?;
            println!("wrote {}", out.path.display());
            warn_unconverged(out.report.csd_unconverged);
            Ok(out.report.csd_unconverged)
        }
        Cmd::Report(args) => {
            let text = cmd_report(&ReportRun {
                report: args.report.unwrap_or_else(|| out_dir.join(cli::REPORT_FILE)),
                csv_out: args
                    .csv_out
                    .unwrap_or_else(|| out_dir.join(cli::HISTOGRAM_CSV_FILE)),
            })?;
            print!("{text}");
            Ok(0)
        }
        Cmd::Pipeline(args) => {
            if let Some(seed) = args.seed {
                cfg.simulate.seed = seed;
                cfg.train.seed = seed;
            }
            let out = cmd_pipeline(&cfg, out_dir)?;
            println!("report: {}", out.evaluate.path.display());
            print!("{}", out.summary);
            warn_unconverged(out.evaluate.report.csd_unconverged);
            Ok(out.evaluate.report.csd_unconverged)
        }
    }
}

fn warn_unconverged(count: usize) {
    if count > 0 {
        eprintln!("warning: {count} deconvolution runs stopped at the iteration cap");
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(0) => {}
        Ok(_) => std::process::exit(3),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(if e.is_validation() { 1 } else { 2 });
        }
    }
}
