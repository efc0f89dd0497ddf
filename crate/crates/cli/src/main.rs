//! Command-line front end: train experiments, verify gradients, generate
//! synthetic datasets, and evaluate saved models.
//!
//! Exit codes: 0 success, 1 validation/config error, 2 runtime error,
//! 3 gradcheck failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fisherda::config::ExperimentConfig;
use fisherda::data::{gen_blob_shift, gen_two_moons_shift, load_csv, save_csv, DomainTag};
use fisherda::gradcheck::run_gradcheck;
use fisherda::harness::{
    compute_embeddings, export, prepare_data, run_train_with_data, TrainedModel,
};
use fisherda::{Error, SeededRng};

/// Environment variable that overrides the config seed.
const SEED_ENV: &str = "FISHERDA_SEED";

#[derive(Parser)]
#[command(
    name = "fisherda",
    version,
    about = "Domain adaptation experiments with Fisher-regularized features"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Moons,
    Blobs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one training experiment and export metrics, embeddings, config
    /// echo, and the model snapshot into the output directory
    Train {
        /// Path to a `key = value` config file
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing)
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every analytic gradient against central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Generate a synthetic domain-shift dataset pair as CSV files
    GenData {
        #[arg(long, value_enum)]
        kind: DataKind,
        /// Output directory for source.csv and target.csv
        #[arg(long)]
        out: PathBuf,
        /// Target-domain rotation in degrees (moons)
        #[arg(long, default_value_t = 30.0)]
        rotation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Samples per domain
        #[arg(long, default_value_t = 500)]
        n: usize,
        /// Gaussian noise level (moons)
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        /// Number of blob classes (blobs)
        #[arg(long, default_value_t = 5)]
        classes: usize,
        /// Target mean shift as "dx,dy" (blobs)
        #[arg(long, default_value = "1.5,1.5")]
        shift: String,
    },
    /// Evaluate a saved model snapshot on a labeled CSV dataset
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::Train { config, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Ok(seed) = std::env::var(SEED_ENV) {
                cfg.seed = seed
                    .parse()
                    .map_err(|_| Error::Config(format!("bad {SEED_ENV} value '{seed}'")))?;
            }
            cfg.validate()?;
            let mut master = SeededRng::new(cfg.seed);
            let mut data_rng = master.fork();
            let (source, target) = prepare_data(&cfg, &mut data_rng)?;
            let outcome = run_train_with_data(&cfg, &source, &target)?;
            let embeddings = compute_embeddings(&outcome.trained, &source, &target)?;
            export(&outcome.report, &embeddings, &cfg, &out)?;
            outcome.trained.save(&out.join("model.snapshot"))?;

            let report = &outcome.report;
            println!(
                "trained {} batches (stop: {}), {} eval records",
                report.batches_run,
                report.stop_reason.as_str(),
                report.records.len()
            );
            println!("source accuracy: {:.4}", report.final_source_acc);
            if report.final_target_acc.is_nan() {
                println!("target accuracy: n/a (unlabeled target)");
            } else {
                println!("target accuracy: {:.4}", report.final_target_acc);
            }
            println!("artifacts written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { seed } => {
            let report = run_gradcheck(seed)?;
            print!("{}", report.render());
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::from(3))
            }
        }
        Cmd::GenData {
            kind,
            out,
            rotation,
            seed,
            n,
            noise,
            classes,
            shift,
        } => {
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::Config(format!("cannot create {}: {e}", out.display())))?;
            let mut rng = SeededRng::new(seed);
            let (source, target) = match kind {
                DataKind::Moons => gen_two_moons_shift(n, rotation, noise, &mut rng)?,
                DataKind::Blobs => {
                    let parsed: Result<Vec<f64>, _> =
                        shift.split(',').map(|s| s.trim().parse::<f64>()).collect();
                    let parsed = parsed
                        .map_err(|_| Error::Config(format!("bad shift list '{shift}'")))?;
                    gen_blob_shift(classes, n, &parsed, &mut rng)?
                }
            };
            let src_path = out.join("source.csv");
            let tgt_path = out.join("target.csv");
            save_csv(&source, &src_path)?;
            save_csv(&target, &tgt_path)?;
            println!("wrote {}", src_path.display());
            println!("wrote {}", tgt_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval { model, data } => {
            let model = TrainedModel::load(&model)?;
            let ds = load_csv(&data, true, DomainTag::Target)?;
            let acc = model.evaluate_raw(&ds)?;
            println!("accuracy: {acc:.4} ({} samples)", ds.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}
