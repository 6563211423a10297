use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Algorithm, DataSource, ExperimentConfig};
use crate::baselines::{baseline_comm_closed_form, Federated};
use crate::data::{generate_fleet_data, read_shards, DatasetShard, FleetData};
use crate::error::{Error, Result};
use crate::model::{Model, ParamCounts, PartKind};
use crate::pipeline::{make_schedule, partition_tail, simulate_makespan, StageCostModel};
use crate::protocol::{csilocal_comm_closed_form, CommLedger, CsiLocal, IterationReport};
use crate::tensor::Tensor;

/// Exact CSV header of the metrics file.
pub const CSV_HEADER: &str = "iteration,exchanged_scalars,virtual_time,train_nmse,test_nmse,per_ue_test_nmse_json";

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub exchanged_scalars: u64,
    pub virtual_time: f64,
    /// Mean training mini-batch NMSE since the previous row; at iteration
    /// 0, eval-mode NMSE of the initial models on the training shards.
    pub train_nmse: f64,
    /// Pooled over every UE's test samples.
    pub test_nmse: f64,
    pub per_ue_test_nmse_json: String,
}

impl MetricsRow {
    pub fn per_ue(&self) -> Result<Vec<f64>> {
        serde_json::from_str(&self.per_ue_test_nmse_json)
            .map_err(|e| Error::Contract(format!("per-UE NMSE column: {e}")))
    }
}

pub fn write_metrics(w: impl Write, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: format!("unexpected header `{}`", header.join(",")),
        });
    }
    rd.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Eval-mode NMSE of each UE's model on its own shard: (pooled, per UE).
pub fn evaluate(models: &[Model<f32>], shards: &[DatasetShard]) -> Result<(f64, Vec<f64>)> {
    const CHUNK: usize = 256;
    let mut per_ue = Vec::with_capacity(shards.len());
    let (mut total, mut count) = (0.0, 0usize);
    for (m, s) in models.iter().zip(shards) {
        let mut sum = 0.0;
        for start in (0..s.len()).step_by(CHUNK) {
            let rows = s.samples.slice_rows(start..(start + CHUNK).min(s.len()))?;
            sum += m.sample_nmse(&rows)?.iter().sum::<f64>();
        }
        per_ue.push(sum / s.len() as f64);
        total += sum;
        count += s.len();
    }
    Ok((total / count as f64, per_ue))
}

fn macs(model: &Model<f32>, kind: PartKind, blocks: std::ops::Range<usize>) -> f64 {
    let positions = model.config.dims.n_t * model.config.dims.n_c;
    model.part(kind).blocks[blocks]
        .iter()
        .map(|b| b.kind.macs_per_row(positions) as f64)
        .sum()
}

/// Virtual seconds per iteration. CSILocal: UE encoder and head, then the
/// pipelined tail on the accumulated `N·B` rows. Baselines: local steps on
/// the full model. UEs run in parallel; links are not timed.
pub fn iteration_time(cfg: &ExperimentConfig, model: &Model<f32>) -> Result<f64> {
    let c = &cfg.pipeline.cost;
    let b = cfg.fleet.batch as f64;
    let fb = 1.0 + c.backward_ratio;
    let all = |k: PartKind| macs(model, k, 0..model.part(k).num_blocks());
    match cfg.algorithm()? {
        Algorithm::CsiLocal => {
            let ue = c.per_mac * b * (all(PartKind::Encoder) + all(PartKind::Head)) * fb;
            Ok(ue + tail_makespan(cfg, model, cfg.pipeline.stages, cfg.pipeline.micro_batches, cfg.fleet.batch)?)
        }
        Algorithm::Baseline(spec) => {
            let total = all(PartKind::Encoder) + all(PartKind::Tail) + all(PartKind::Head);
            Ok(spec.local_steps as f64 * c.per_mac * b * total * fb)
        }
    }
}

/// Stage costs of the tail for `N·batch` rows split into `q` micro-batches.
pub fn tail_costs(cfg: &ExperimentConfig, model: &Model<f32>, p: usize, q: usize, batch: usize) -> Result<StageCostModel> {
    let part = partition_tail(&model.tail, p)?;
    let weights: Vec<f64> = (0..p).map(|s| macs(model, PartKind::Tail, part.stage(s))).collect();
    let rows = (cfg.fleet.ues * batch) as f64 / q as f64;
    let c = &cfg.pipeline.cost;
    Ok(StageCostModel::from_rows(&weights, rows, c.per_mac, c.backward_ratio, c.transfer))
}

fn tail_makespan(cfg: &ExperimentConfig, model: &Model<f32>, p: usize, q: usize, batch: usize) -> Result<f64> {
    simulate_makespan(&make_schedule(p, q), &tail_costs(cfg, model, p, q, batch)?)
}

/// Closed-form exchanged scalars after `k` iterations.
pub fn comm_closed_form(cfg: &ExperimentConfig, counts: &ParamCounts, k: usize) -> Result<u64> {
    let t = cfg.train_config()?;
    Ok(match cfg.algorithm()? {
        Algorithm::CsiLocal => csilocal_comm_closed_form(&t.fleet, t.model.boundary, k),
        Algorithm::Baseline(spec) => baseline_comm_closed_form(&spec, counts, t.fleet.ues, k),
    })
}

enum Runner {
    Split(CsiLocal<f32>),
    Federated(Federated<f32>),
}

impl Runner {
    fn step(&mut self) -> Result<IterationReport> {
        match self {
            Runner::Split(s) => s.step(),
            Runner::Federated(f) => f.step(),
        }
    }

    fn models(&self, ues: usize) -> Vec<Model<f32>> {
        (0..ues)
            .map(|u| match self {
                Runner::Split(s) => s.model_for(u),
                Runner::Federated(f) => f.model_for(u),
            })
            .collect()
    }

    fn ledger(&self) -> &CommLedger {
        match self {
            Runner::Split(s) => &s.channel.ledger,
            Runner::Federated(f) => &f.ledger,
        }
    }
}

/// Loads or generates the training and test shards.
pub fn load_data(cfg: &ExperimentConfig) -> Result<FleetData> {
    match cfg.data.source {
        DataSource::Generate => generate_fleet_data(cfg.dims()?, &cfg.partition(), cfg.data.test_per_ue),
        DataSource::File => {
            let dir = cfg.data.path.as_ref().expect("validated");
            let (train, normalization) = read_shards(&dir.join("train.csid"))?;
            let (test, _) = read_shards(&dir.join("test.csid"))?;
            let want = [cfg.fleet.samples_per_ue, 2, cfg.model.n_t, cfg.model.n_c];
            for (name, shards) in [("train", &train), ("test", &test)] {
                if shards.len() != cfg.fleet.ues {
                    return Err(Error::config(
                        "fleet.ues",
                        format!("{name}.csid holds {} shards, config has {} UEs", shards.len(), cfg.fleet.ues),
                    ));
                }
                let s = shards[0].samples.shape();
                if name == "train" && s != want || s[1..] != want[1..] {
                    return Err(Error::dim("dataset file", s, &want));
                }
            }
            Ok(FleetData {
                train,
                test,
                normalization,
            })
        }
    }
}

/// Result of one experiment.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub summary: LedgerSummary,
    pub models: Vec<Model<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub algorithm: String,
    pub iterations: usize,
    pub uplink: Vec<u64>,
    pub downlink: Vec<u64>,
    pub total: u64,
    pub closed_form: u64,
    pub params: ParamCounts,
    pub c1: usize,
    pub c2: usize,
    /// `2·n_t·n_c / c1`.
    pub compression_ratio: f64,
    pub warnings: Vec<String>,
}

/// Trains per the config, evaluating every `eval.every` iterations and
/// stopping early if `eval.stop_fraction` is reached. With
/// `out`, writes `metrics.csv`, `ledger.json`, `model.bin` and the
/// resolved `config.toml` there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_with_data(cfg, &data, out)
}

pub fn run_with_data(cfg: &ExperimentConfig, data: &FleetData, out: Option<&Path>) -> Result<RunOutput> {
    let train = cfg.train_config()?;
    let algorithm = cfg.algorithm()?;
    let init = Model::<f32>::init(&train.model, cfg.seed)?;
    let counts = init.param_counts();
    let dt = iteration_time(cfg, &init)?;
    let shards: Vec<Tensor<f32>> = data.train.iter().map(|s| s.samples.clone()).collect();
    let mut runner = match algorithm {
        Algorithm::CsiLocal => Runner::Split(CsiLocal::from_model(train, &init, shards)?),
        Algorithm::Baseline(spec) => Runner::Federated(Federated::from_model(train, spec, &init, shards)?),
    };

    let n = cfg.fleet.ues;
    let eval_row = |runner: &Runner, it: usize, train_nmse: f64| -> Result<MetricsRow> {
        let (test, per_ue) = evaluate(&runner.models(n), &data.test)?;
        Ok(MetricsRow {
            iteration: it,
            exchanged_scalars: runner.ledger().total(),
            virtual_time: it as f64 * dt,
            train_nmse,
            test_nmse: test,
            per_ue_test_nmse_json: serde_json::to_string(&per_ue).expect("floats serialize"),
        })
    };
    let (initial_train, _) = evaluate(&runner.models(n), &data.train)?;
    let mut rows = vec![eval_row(&runner, 0, initial_train)?];
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let stop_at = cfg.eval.stop_fraction.map(|f| f * rows[0].test_nmse);
    let mut k = 0;
    for it in 1..=cfg.fleet.iterations {
        let report = runner.step()?;
        k = it;
        loss_sum += report.mean_loss();
        loss_n += 1;
        if it % cfg.eval.every == 0 || it == cfg.fleet.iterations {
            let row = eval_row(&runner, it, loss_sum / loss_n as f64).map_err(|e| e.at_iteration(it))?;
            (loss_sum, loss_n) = (0.0, 0);
            let done = stop_at.is_some_and(|t| row.test_nmse <= t);
            rows.push(row);
            if done {
                break;
            }
        }
    }

    let ledger = runner.ledger();
    let summary = LedgerSummary {
        algorithm: algorithm.to_string(),
        iterations: k,
        uplink: ledger.uplink.clone(),
        downlink: ledger.downlink.clone(),
        total: ledger.total(),
        closed_form: comm_closed_form(cfg, &counts, k)?,
        params: counts,
        c1: cfg.model.c1,
        c2: cfg.model.c2,
        compression_ratio: train.model.dims.flat_len() as f64 / cfg.model.c1 as f64,
        warnings: train.model.boundary.warnings(&counts),
    };
    let models = runner.models(n);
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_metrics(fs::File::create(dir.join("metrics.csv"))?, &rows)?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        fs::write(dir.join("ledger.json"), json + "\n")?;
        fs::write(dir.join("config.toml"), cfg.to_toml())?;
        write_params(&dir.join("model.bin"), &models)?;
    }
    Ok(RunOutput { rows, summary, models })
}

const PARAMS_MAGIC: &[u8; 4] = b"CSIP";

/// Every UE's parameters: `"CSIP"`, `u32` tensor count, then per tensor a
/// `u32`-length name, `u32` rank, `u32` extents and `f32` values, all
/// little-endian. Names are `ue{n}.{part}.{block}.{param}`.
pub fn write_params(path: &Path, models: &[Model<f32>]) -> Result<()> {
    let mut tensors = Vec::new();
    for (u, m) in models.iter().enumerate() {
        for kind in [PartKind::Encoder, PartKind::Tail, PartKind::Head] {
            for (name, t) in m.part(kind).named_params() {
                tensors.push((format!("ue{u}.{kind}.{name}"), t));
            }
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a file written by [`write_params`] as `(name, tensor)` pairs.
pub fn read_params(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = fs::read(path)?;
    let bad = |reason: &str| Error::Malformed {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.get(..4) != Some(PARAMS_MAGIC) {
        return Err(bad("missing CSIP magic"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        let b = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
        pos += n;
        Ok(b)
    };
    let word = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize;
    let count = word(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = word(take(4)?);
        let name = std::str::from_utf8(take(len)?).map_err(|_| bad("tensor name is not UTF-8"))?.to_string();
        let rank = word(take(4)?);
        let shape = (0..rank).map(|_| take(4).map(word)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}
