use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use csilocal::data::write_shards;
use csilocal::harness::{
    compare_runs, load_data, pipeline_bench, run_experiment, write_bench, write_compare, ExperimentConfig, PRESETS,
};

#[derive(Parser)]
#[command(name = "csilocal", version, about = "Split federated learning for CSI feedback")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config, layered over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file for tables).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Named preset, e.g. desk-indoor.
    #[arg(long)]
    preset: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(self.config.as_deref(), self.preset.as_deref())?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate and partition a synthetic dataset into train.csid and test.csid.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one algorithm and write metrics.csv, ledger.json, model.bin and config.toml.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `algorithm.name` (csilocal, fedavg, fedprox_per, ...).
        #[arg(long)]
        algorithm: Option<String>,
    },
    /// Exchanged scalars each run needed to reach a target test NMSE.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Target test NMSE.
        #[arg(long)]
        target: f64,
        /// metrics.csv files.
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
    },
    /// Simulated decoder-tail makespan with and without pipelining.
    PipelineBench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        stages: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        micro_batches: Vec<usize>,
        /// Per-UE batch sizes; the config's batch when absent.
        #[arg(long, value_delimiter = ',')]
        batches: Vec<usize>,
    },
    /// List the named presets.
    Presets,
}

fn table_sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.load()?;
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("data"));
            fs::create_dir_all(&dir)?;
            let data = load_data(&cfg)?;
            write_shards(&dir.join("train.csid"), &data.train, data.normalization)?;
            write_shards(&dir.join("test.csid"), &data.test, data.normalization)?;
            eprintln!(
                "wrote {} UEs x {} train / {} test samples to {}",
                data.train.len(),
                cfg.fleet.samples_per_ue,
                cfg.data.test_per_ue,
                dir.display()
            );
        }
        Command::Train { common, algorithm } => {
            let mut cfg = common.load()?;
            if let Some(a) = algorithm {
                cfg.algorithm.name = a;
                cfg.validate()?;
            }
            let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&cfg.algorithm.name));
            let out = run_experiment(&cfg, Some(&dir))?;
            for w in &out.summary.warnings {
                eprintln!("warning: {w}");
            }
            let last = out.rows.last().expect("at least the initial row");
            eprintln!(
                "{}: {} iterations, test NMSE {:.4e} -> {:.4e}, {} scalars exchanged, output in {}",
                out.summary.algorithm,
                last.iteration,
                out.rows[0].test_nmse,
                last.test_nmse,
                last.exchanged_scalars,
                dir.display()
            );
        }
        Command::Compare { common, target, runs } => {
            if !(target.is_finite() && target >= 0.0) {
                bail!("--target must be a non-negative number, got {target}");
            }
            let rows = compare_runs(&runs, target)?;
            write_compare(table_sink(common.out.as_deref())?, &rows)?;
        }
        Command::PipelineBench {
            common,
            stages,
            micro_batches,
            batches,
        } => {
            let cfg = common.load()?;
            let batches = if batches.is_empty() { vec![cfg.fleet.batch] } else { batches };
            let rows = pipeline_bench(&cfg, &stages, &micro_batches, &batches)?;
            write_bench(table_sink(common.out.as_deref())?, &rows)?;
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
