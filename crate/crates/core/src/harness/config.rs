use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::BaselineSpec;
use crate::data::PartitionSpec;
use crate::error::{Error, Result};
use crate::model::{BoundaryDims, CsiDims, Mode, ModelConfig};
use crate::optim::AdamConfig;
use crate::pipeline::PipelineConfig;
use crate::protocol::{FleetConfig, TrainConfig};

/// CSILocal or one of the federated baselines.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Algorithm {
    CsiLocal,
    Baseline(BaselineSpec),
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Algorithm::CsiLocal => f.write_str("csilocal"),
            Algorithm::Baseline(s) => s.fmt(f),
        }
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "csilocal" {
            Ok(Algorithm::CsiLocal)
        } else {
            s.parse().map(Algorithm::Baseline)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlgorithmSection {
    pub name: String,
    /// FedProx proximal coefficient.
    pub mu: f64,
    pub local_steps: usize,
    /// CSILocal: average the tail gradient over UEs instead of summing.
    pub average_tail_grad: bool,
}

impl Default for AlgorithmSection {
    fn default() -> Self {
        AlgorithmSection {
            name: "csilocal".into(),
            mu: 0.01,
            local_steps: 1,
            average_tail_grad: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_t: usize,
    pub n_c: usize,
    pub c1: usize,
    pub c2: usize,
    /// Width of the first tail layer; `2·n_t·n_c` when absent.
    pub c_mid: Option<usize>,
    pub bn_momentum: f64,
    pub batch_norm: Mode,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            n_t: 32,
            n_c: 32,
            c1: 256,
            c2: 256,
            c_mid: None,
            bn_momentum: 0.1,
            batch_norm: Mode::Train,
        }
    }
}

/// Virtual-time cost model. Compute time is proportional to
/// multiply-accumulates; transfers between pipeline stages add a fixed
/// latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostSection {
    /// Seconds per multiply-accumulate; the default is a 1 TMAC/s device.
    pub per_mac: f64,
    /// Backward time as a multiple of forward time.
    pub backward_ratio: f64,
    /// Seconds to hand a micro-batch to the next stage.
    pub transfer: f64,
}

impl Default for CostSection {
    fn default() -> Self {
        CostSection {
            per_mac: 1e-12,
            backward_ratio: 2.0,
            transfer: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub stages: usize,
    pub micro_batches: usize,
    pub cost: CostSection,
}

impl Default for PipelineSection {
    fn default() -> Self {
        let layout = PipelineConfig::default();
        PipelineSection {
            stages: layout.stages,
            micro_batches: layout.micro_batches,
            cost: CostSection::default(),
        }
    }
}

impl PipelineSection {
    pub fn layout(&self) -> PipelineConfig {
        PipelineConfig {
            stages: self.stages,
            micro_batches: self.micro_batches,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Generate,
    File,
}

/// Environment mixture of generated shards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixture {
    Indoor,
    Outdoor,
    /// Every UE holds half indoor, half outdoor samples.
    Iid,
    /// The descending indoor-share table.
    Noniid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub source: DataSource,
    /// Directory with `train.csid` and `test.csid` when reading files.
    pub path: Option<PathBuf>,
    pub mixture: Mixture,
    /// Per-UE indoor shares out of 10; overrides `mixture`.
    pub indoor_ratios: Option<Vec<f64>>,
    pub test_per_ue: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: DataSource::Generate,
            path: None,
            mixture: Mixture::Indoor,
            indoor_ratios: None,
            test_per_ue: 2_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluate test NMSE every this many iterations (and at the end).
    pub every: usize,
    /// Stop early at the first evaluation whose test NMSE is at most this
    /// fraction of the initial test NMSE.
    pub stop_fraction: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            every: 50,
            stop_fraction: None,
        }
    }
}

/// A complete experiment. Every section is optional in the file; missing
/// keys take the full-scale defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub algorithm: AlgorithmSection,
    pub fleet: FleetConfig,
    pub model: ModelSection,
    pub optimizer: AdamConfig,
    pub pipeline: PipelineSection,
    pub data: DataSection,
    pub eval: EvalSection,
}

/// Named desk-scale presets, merged under any user file.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper", ""),
    ("desk-indoor", DESK_SMALL),
    ("desk-outdoor", "[data]\nmixture = \"outdoor\"\n"),
    ("desk-compare", DESK_COMPARE),
    ("desk-noniid", DESK_NONIID),
    ("desk-iid", "[data]\nmixture = \"iid\"\n"),
];

const DESK_SMALL: &str = r#"
[fleet]
ues = 2
samples_per_ue = 512
batch = 16
iterations = 500

[model]
n_t = 8
n_c = 8
c1 = 32
c2 = 32

[optimizer]
eta = 1e-3

[data]
test_per_ue = 128

[eval]
every = 50
"#;

const DESK_COMPARE: &str = r#"
[fleet]
ues = 4
samples_per_ue = 512
batch = 16
iterations = 600

[model]
n_t = 16
n_c = 16
c1 = 32
c2 = 32

[optimizer]
eta = 1e-3

[data]
test_per_ue = 128

[eval]
every = 25
"#;

const DESK_NONIID: &str = r#"
[fleet]
ues = 10
samples_per_ue = 1300
batch = 16
iterations = 600

[model]
n_t = 8
n_c = 8
c1 = 32
c2 = 32

[optimizer]
eta = 1e-3

[data]
mixture = "noniid"
test_per_ue = 200

[eval]
every = 50
"#;

fn preset_layers(name: &str) -> Result<Vec<&'static str>> {
    let find = |n: &str| PRESETS.iter().find(|(k, _)| *k == n).map(|(_, v)| *v);
    let own = find(name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(k, _)| *k).collect();
        Error::config("preset", format!("unknown preset `{name}` (known: {})", names.join(", ")))
    })?;
    Ok(match name {
        "desk-outdoor" => vec![DESK_SMALL, own],
        "desk-iid" => vec![DESK_NONIID, own],
        _ => vec![own],
    })
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| Error::config(origin, e.message().to_string()))
}

impl ExperimentConfig {
    /// Preset (if any), then the file text, then validation.
    pub fn parse(text: &str, preset: Option<&str>) -> Result<Self> {
        let mut table = toml::Table::new();
        if let Some(p) = preset {
            for layer in preset_layers(p)? {
                merge(&mut table, parse_table(layer, "preset")?);
            }
        }
        merge(&mut table, parse_table(text, "config")?);
        let cfg: ExperimentConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| {
            let field = e.message().split('`').nth(1).unwrap_or("config").to_string();
            Error::config(field, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, preset: Option<&str>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, preset)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn algorithm(&self) -> Result<Algorithm> {
        let mut a: Algorithm = self.algorithm.name.parse()?;
        if let Algorithm::Baseline(spec) = &mut a {
            spec.mu = self.algorithm.mu;
            spec.local_steps = self.algorithm.local_steps;
            spec.validate()?;
        }
        Ok(a)
    }

    pub fn dims(&self) -> Result<CsiDims> {
        CsiDims::new(self.model.n_t, self.model.n_c)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(
            self.dims()?,
            BoundaryDims {
                c1: self.model.c1,
                c2: self.model.c2,
            },
        );
        m.c_mid = self.model.c_mid;
        m.bn_momentum = self.model.bn_momentum;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut fleet = self.fleet;
        fleet.seed = self.seed;
        let mut t = TrainConfig::new(fleet, self.model_config()?);
        t.optimizer = self.optimizer;
        t.pipeline = self.pipeline.layout();
        t.batch_norm = self.model.batch_norm;
        t.average_tail_grad = self.algorithm.average_tail_grad;
        Ok(t)
    }

    pub fn partition(&self) -> PartitionSpec {
        let (n, m, seed) = (self.fleet.ues, self.fleet.samples_per_ue, self.seed);
        if let Some(r) = &self.data.indoor_ratios {
            return PartitionSpec {
                indoor_ratios: r.clone(),
                samples_per_ue: m,
                seed,
            };
        }
        match self.data.mixture {
            Mixture::Indoor => PartitionSpec::uniform(n, 10.0, m, seed),
            Mixture::Outdoor => PartitionSpec::uniform(n, 0.0, m, seed),
            Mixture::Iid => PartitionSpec::uniform(n, 5.0, m, seed),
            Mixture::Noniid => PartitionSpec::noniid(n, m, seed),
        }
    }

    /// Cross-field checks; every error names the offending field.
    pub fn validate(&self) -> Result<()> {
        self.algorithm()?;
        let train = self.train_config()?;
        train.validate()?;
        let blocks = train.model.tail_blocks().len();
        if self.pipeline.stages > blocks {
            return Err(Error::config(
                "pipeline.stages",
                format!("must lie in 1..={blocks} (decoder-tail blocks), got {}", self.pipeline.stages),
            ));
        }
        let cost = &self.pipeline.cost;
        for (field, v) in [
            ("pipeline.cost.per_mac", cost.per_mac),
            ("pipeline.cost.backward_ratio", cost.backward_ratio),
            ("pipeline.cost.transfer", cost.transfer),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        if !(self.model.bn_momentum > 0.0 && self.model.bn_momentum <= 1.0) {
            return Err(Error::config("model.bn_momentum", format!("must lie in (0, 1], got {}", self.model.bn_momentum)));
        }
        if let Some(r) = &self.data.indoor_ratios {
            if r.len() != self.fleet.ues {
                return Err(Error::config(
                    "data.indoor_ratios",
                    format!("{} ratios for {} UEs", r.len(), self.fleet.ues),
                ));
            }
        }
        self.partition().validate()?;
        if self.data.source == DataSource::File && self.data.path.is_none() {
            return Err(Error::config("data.path", "required when data.source = \"file\""));
        }
        if self.data.test_per_ue == 0 {
            return Err(Error::config("data.test_per_ue", "must be at least 1"));
        }
        if self.eval.every == 0 {
            return Err(Error::config("eval.every", "must be at least 1"));
        }
        if let Some(f) = self.eval.stop_fraction {
            if !(f.is_finite() && f > 0.0) {
                return Err(Error::config("eval.stop_fraction", format!("must be positive, got {f}")));
            }
        }
        Ok(())
    }
}
