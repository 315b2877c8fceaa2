mod commands;
mod config;
mod output;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "rwre", version, about = "Random walks on trees in a boundary-case branching environment")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set walk.n=5000`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed (same as `--set seed=N`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (same as `--set workers=N`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Turn warnings and flagged rows into a nonzero exit.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Calibrate an offspring law to the boundary case and print it as JSON.
    Calibrate {
        /// Template family: gaussian-binary or two-point. Defaults to the config's template.
        #[arg(long)]
        family: Option<String>,
        #[arg(long)]
        theta: Option<f64>,
    },
    /// Renewal table, fluctuation constants and the 𝒞 / λ / Λ grids.
    Constants {
        /// Small budgets for a smoke run.
        #[arg(long)]
        quick: bool,
        #[command(flatten)]
        out: OutDir,
    },
    /// Run walk replicas and write one JSON record per line.
    Walk {
        /// fixed-steps or excursions.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        n: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Run every replica on this one quenched tree.
        #[arg(long)]
        tree_seed: Option<u64>,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact quenched summaries on frozen trees, as JSON lines.
    Quenched {
        #[arg(long)]
        depth: Option<u32>,
        #[arg(long)]
        generation: Option<u32>,
        #[arg(long)]
        n: Option<f64>,
        #[arg(long)]
        trees: Option<usize>,
        /// Restriction set (all, U, L_delta, B1, B2, B2_delta, A1, A2, A3).
        #[arg(long = "restrict", value_name = "SET")]
        set: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Named scenario: scan, local-time, range, profile, wm or all.
    Experiment {
        name: String,
        #[command(flatten)]
        out: OutDir,
    },
    /// Check the one-dimensional random-walk inequalities by simulation.
    Appendix {
        /// Fact name, repeatable; all facts when absent.
        #[arg(long = "fact")]
        facts: Vec<String>,
        #[arg(long)]
        replicas: Option<usize>,
        #[command(flatten)]
        out: OutDir,
    },
    /// Merge the manifests in a directory into one summary table.
    Report {
        #[arg(long, default_value = "out")]
        dir: PathBuf,
    },
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory.
    #[arg(long = "out", default_value = "out")]
    dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("rwre: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
