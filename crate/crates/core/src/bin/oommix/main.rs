//! Artifact plumbing for the lab: train, eval, gradcheck, sweep-layers,
//! analyze, synth-data, emit-plots. Exit codes: 0 success, 1 usage or
//! config error, 2 runtime failure, 3 gradcheck over threshold.

mod svg;
mod verbs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use oommix_core::error::Error;

#[derive(Parser)]
#[command(name = "oommix", version, about = "Out-of-manifold mixup lab")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

/// Flags every verb shares.
#[derive(Args)]
struct Common {
    /// Config file of dotted key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, repeatable (e.g. --set train.batch=16).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Directory artifacts are written into.
    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Root RNG seed, overriding the config's.
    #[arg(long)]
    seed: Option<u64>,

    /// Overwrite artifacts that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Verb {
    /// Train a classifier; writes report.json, model.ckpt, metrics.jsonl
    /// and lambda.csv.
    Train(Common),

    /// Score a saved checkpoint; writes accuracy.json.
    Eval {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to score.
        #[arg(long, default_value = "out/model.ckpt")]
        model: PathBuf,

        /// CSV to score instead of the checkpoint config's test split.
        #[arg(long)]
        data: Option<PathBuf>,
    },

    /// Finite-difference every primitive and composed block; writes
    /// gradcheck.csv and exits 3 if any case breaches the threshold.
    Gradcheck {
        #[command(flatten)]
        common: Common,

        /// Random instances per case.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },

    /// Train the (m_g, m_d) placement grid; writes sweep.csv.
    SweepLayers {
        #[command(flatten)]
        common: Common,

        /// Generator placements, comma separated.
        #[arg(long = "mg", value_delimiter = ',', required = true)]
        m_gs: Vec<usize>,

        /// Discriminator placements, comma separated.
        #[arg(long = "md", value_delimiter = ',', required = true)]
        m_ds: Vec<usize>,

        /// Seeds averaged per cell; defaults to the config seed alone.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,

        /// Also run cells with m_g = m_d instead of skipping them.
        #[arg(long)]
        include_equal: bool,

        /// Worker threads; 0 picks one per cell. OOMMIX_THREADS caps it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },

    /// Post-training behavioral analysis; writes histogram.csv, dump.csv,
    /// projection.csv, pca.csv and summary.json.
    Analyze {
        #[command(flatten)]
        common: Common,

        /// Checkpoint to analyze.
        #[arg(long, default_value = "out/model.ckpt")]
        model: PathBuf,

        /// λ log of the training run.
        #[arg(long, default_value = "out/lambda.csv")]
        lambda_log: PathBuf,

        /// Generated (mixed) points to sample.
        #[arg(long, default_value_t = 500)]
        pairs: usize,

        /// Histogram bins over [0, 1].
        #[arg(long, default_value_t = 20)]
        bins: usize,

        /// Neighbors in the Isomap kNN graph.
        #[arg(long, default_value_t = 10)]
        knn_k: usize,

        /// Actual points kept for Isomap/PCA; 0 keeps all.
        #[arg(long, default_value_t = 500)]
        cap: usize,

        /// PCA variance-coverage target.
        #[arg(long, default_value_t = 0.95)]
        coverage: f64,
    },

    /// Generate the synthetic keyword dataset; writes train.csv, val.csv
    /// and test.csv.
    SynthData(Common),

    /// Render SVG figures from previously produced CSVs.
    EmitPlots(Common),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match verbs::dispatch(cli.verb) {
        Ok(code) => code,
        Err(Error::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::from(2)
        }
    }
}
