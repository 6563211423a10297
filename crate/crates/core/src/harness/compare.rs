use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{read_metrics, tail_costs};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::{bench_row, make_schedule};

/// Where one run first reached the target test NMSE.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: PathBuf,
    /// `None` when the target was never reached.
    pub iteration: Option<usize>,
    pub exchanged_scalars: Option<u64>,
    pub virtual_time: Option<f64>,
    pub final_test_nmse: f64,
}

impl CompareRow {
    pub fn reached(&self) -> bool {
        self.exchanged_scalars.is_some()
    }
}

/// One row per run, ordered by scalars-to-target with unreached runs last.
pub fn compare_runs(paths: &[impl AsRef<Path>], target: f64) -> Result<Vec<CompareRow>> {
    if paths.len() < 2 {
        return Err(Error::Contract(format!("compare needs at least 2 metric files, got {}", paths.len())));
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let p = p.as_ref();
        let rows = read_metrics(p)?;
        let last = rows.last().ok_or_else(|| Error::Malformed {
            path: p.to_path_buf(),
            reason: "no metric rows".into(),
        })?;
        let hit = rows.iter().find(|r| r.test_nmse <= target);
        out.push(CompareRow {
            run: p.to_path_buf(),
            iteration: hit.map(|r| r.iteration),
            exchanged_scalars: hit.map(|r| r.exchanged_scalars),
            virtual_time: hit.map(|r| r.virtual_time),
            final_test_nmse: last.test_nmse,
        });
    }
    // Stable sort: ties keep input order.
    out.sort_by_key(|r| r.exchanged_scalars.unwrap_or(u64::MAX));
    out.sort_by_key(|r| !r.reached());
    Ok(out)
}

pub fn write_compare(w: impl std::io::Write, rows: &[CompareRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["run", "iteration", "exchanged_scalars", "virtual_time", "final_test_nmse"])?;
    let or_nr = |v: Option<String>| v.unwrap_or_else(|| "not reached".into());
    for r in rows {
        out.write_record([
            r.run.display().to_string(),
            or_nr(r.iteration.map(|v| v.to_string())),
            or_nr(r.exchanged_scalars.map(|v| v.to_string())),
            or_nr(r.virtual_time.map(|v| v.to_string())),
            r.final_test_nmse.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineBenchRow {
    pub batch: usize,
    pub stages: usize,
    pub micro_batches: usize,
    pub makespan: f64,
    pub serial: f64,
    pub speedup: f64,
    pub bubble: f64,
}

/// Simulated tail makespan for every (batch, P, Q), using the config's
/// model and cost model. `serial` is the same work on one device.
pub fn pipeline_bench(
    cfg: &ExperimentConfig,
    stages: &[usize],
    micro_batches: &[usize],
    batches: &[usize],
) -> Result<Vec<PipelineBenchRow>> {
    let model = Model::<f32>::init(&cfg.model_config()?, cfg.seed)?;
    let mut out = Vec::new();
    for &batch in batches {
        for &p in stages {
            for &q in micro_batches {
                let r = bench_row(&make_schedule(p, q), &tail_costs(cfg, &model, p, q, batch)?)?;
                out.push(PipelineBenchRow {
                    batch,
                    stages: p,
                    micro_batches: q,
                    makespan: r.makespan,
                    serial: r.serial,
                    speedup: r.speedup,
                    bubble: r.bubble,
                });
            }
        }
    }
    Ok(out)
}

pub fn write_bench(w: impl std::io::Write, rows: &[PipelineBenchRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
