//! CSILocal split training: UEs keep the encoder and decoder head, the
//! base station trains the shared decoder tail, and only boundary
//! activations and gradients cross the link.

mod actors;
mod message;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use actors::{bts_accumulate, split_by_ue, Bts, HeadStep, Ue};
pub use message::{privacy_scan, Channel, CommLedger, Link, MessageKind, MessageRecord, PrivacyReport, SmashedBatch};

use crate::error::{Error, Result};
use crate::model::{BoundaryDims, Mode, Model, ModelConfig};
use crate::optim::AdamConfig;
use crate::pipeline::PipelineConfig;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FleetConfig {
    /// Number of UEs, `N`.
    pub ues: usize,
    /// Training samples per UE, `M`.
    pub samples_per_ue: usize,
    /// Mini-batch size per UE, `B`.
    pub batch: usize,
    /// Iterations, `K`.
    pub iterations: usize,
    /// Set from the experiment seed, not read from the fleet section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FleetConfig {
    fn default() -> Self {
        FleetConfig {
            ues: 10,
            samples_per_ue: 13_000,
            batch: 800,
            iterations: 20_000,
            seed: 0,
        }
    }
}

impl FleetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ues == 0 {
            return Err(Error::config("fleet.ues", "must be at least 1"));
        }
        if self.batch == 0 {
            return Err(Error::config("fleet.batch", "must be at least 1"));
        }
        if self.batch > self.samples_per_ue {
            return Err(Error::config(
                "fleet.batch",
                format!("{} exceeds samples_per_ue = {}", self.batch, self.samples_per_ue),
            ));
        }
        if self.iterations == 0 {
            return Err(Error::config("fleet.iterations", "must be at least 1"));
        }
        Ok(())
    }
}

/// Everything a split or federated training run needs besides data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub fleet: FleetConfig,
    pub model: ModelConfig,
    pub optimizer: AdamConfig,
    pub pipeline: PipelineConfig,
    /// Batch-norm statistics used while training.
    pub batch_norm: Mode,
    /// Average the tail gradient over UEs instead of summing.
    pub average_tail_grad: bool,
}

impl TrainConfig {
    pub fn new(fleet: FleetConfig, model: ModelConfig) -> Self {
        TrainConfig {
            fleet,
            model,
            optimizer: AdamConfig::default(),
            pipeline: PipelineConfig::default(),
            batch_norm: Mode::Train,
            average_tail_grad: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fleet.validate()?;
        self.model.validate()?;
        self.optimizer.validate()?;
        let rows = self.fleet.ues * self.fleet.batch;
        if self.pipeline.micro_batches == 0 || self.pipeline.micro_batches > rows {
            return Err(Error::config(
                "pipeline.micro_batches",
                format!("must lie in 1..={rows} (N·B), got {}", self.pipeline.micro_batches),
            ));
        }
        if self.pipeline.stages == 0 {
            return Err(Error::config("pipeline.stages", "must be at least 1"));
        }
        Ok(())
    }
}

/// Sorted mini-batch of `batch` distinct indices below `samples`, a pure
/// function of `(seed, ue, iteration)`.
pub fn minibatch_indices(seed: u64, ue: usize, iteration: usize, samples: usize, batch: usize) -> Vec<usize> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(ue as u64).to_le_bytes());
    key[16..24].copy_from_slice(&(iteration as u64).to_le_bytes());
    key[24..].copy_from_slice(b"minibtch");
    let mut rng = ChaCha8Rng::from_seed(key);
    let mut idx = sample(&mut rng, samples, batch).into_vec();
    idx.sort_unstable();
    idx
}

/// `K·N·2·B·(c1 + c2)`: each UE uploads and downloads one `B × c1` and one
/// `B × c2` tensor per iteration.
pub fn csilocal_comm_closed_form(fleet: &FleetConfig, boundary: BoundaryDims, iterations: usize) -> u64 {
    iterations as u64 * fleet.ues as u64 * 2 * fleet.batch as u64 * (boundary.c1 + boundary.c2) as u64
}

/// Per-iteration summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationReport {
    /// 1-based.
    pub iteration: usize,
    /// Mini-batch NMSE of each UE.
    pub losses: Vec<f64>,
    /// Cumulative exchanged scalars.
    pub exchanged: u64,
}

impl IterationReport {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

/// The simulated system: UEs, BTS and the link between them.
pub struct CsiLocal<T: Real = f32> {
    pub config: TrainConfig,
    pub ues: Vec<Ue<T>>,
    pub bts: Bts<T>,
    pub channel: Channel<T>,
    iteration: usize,
}

impl<T: Real> CsiLocal<T> {
    /// Every UE starts from the same initial encoder and head.
    pub fn new(config: TrainConfig, shards: Vec<Tensor<T>>) -> Result<Self> {
        let init = Model::<T>::init(&config.model, config.fleet.seed)?;
        Self::from_model(config, &init, shards)
    }

    pub fn from_model(config: TrainConfig, init: &Model<T>, shards: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        if init.config != config.model {
            return Err(Error::config("model", "initial model does not match the configured model"));
        }
        let fleet = config.fleet;
        if shards.len() != fleet.ues {
            return Err(Error::config(
                "fleet.ues",
                format!("{} UEs configured but {} shards given", fleet.ues, shards.len()),
            ));
        }
        let ues = shards
            .into_iter()
            .enumerate()
            .map(|(id, data)| {
                if data.rows() != fleet.samples_per_ue {
                    return Err(Error::config(
                        "fleet.samples_per_ue",
                        format!("UE {id} holds {} samples, expected {}", data.rows(), fleet.samples_per_ue),
                    ));
                }
                Ue::new(id, init.encoder.clone(), init.head.clone(), data, config.optimizer, config.batch_norm)
            })
            .collect::<Result<Vec<_>>>()?;
        let bts = Bts::new(
            init.tail.clone(),
            fleet.ues,
            config.optimizer,
            config.pipeline,
            config.batch_norm,
            config.average_tail_grad,
        )?;
        Ok(CsiLocal {
            config,
            ues,
            bts,
            channel: Channel::new(fleet.ues, false),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// UE `ue`'s end-to-end model.
    pub fn model_for(&self, ue: usize) -> Model<T> {
        Model {
            config: self.config.model,
            encoder: self.ues[ue].encoder.clone(),
            tail: self.bts.tail.clone(),
            head: self.ues[ue].head.clone(),
        }
    }

    /// One round: upload, tail forward, download, UE loss and head
    /// backward, upload, tail backward, download, encoder backward, and
    /// Adam updates everywhere.
    pub fn step(&mut self) -> Result<IterationReport> {
        let it = self.iteration + 1;
        self.round(it).map_err(|e| e.at_iteration(it))
    }

    fn round(&mut self, it: usize) -> Result<IterationReport> {
        let fleet = self.config.fleet;
        let mut uploads = Vec::with_capacity(fleet.ues);
        for ue in &mut self.ues {
            let idx = minibatch_indices(fleet.seed, ue.id, it, ue.samples(), fleet.batch);
            uploads.push(self.channel.send(it, ue.forward_upload(&idx)?));
        }
        let outputs = self.bts.tail_forward(&uploads)?;

        let mut losses = Vec::with_capacity(fleet.ues);
        let mut heads = Vec::with_capacity(fleet.ues);
        let mut grad_uploads = Vec::with_capacity(fleet.ues);
        for (ue, out) in self.ues.iter_mut().zip(outputs) {
            let out = self.channel.send(it, out);
            let step = ue.loss_and_backward(&out)?;
            losses.push(step.loss);
            grad_uploads.push(self.channel.send(it, step.upload.clone()));
            heads.push(step);
        }
        let (tail_grads, tail_stats, downs) = self.bts.tail_backward(&grad_uploads)?;

        for ((ue, down), head) in self.ues.iter_mut().zip(downs).zip(&heads) {
            let down = self.channel.send(it, down);
            let (enc_grads, enc_stats) = ue.encoder_backward(&down)?;
            ue.update((&enc_grads, &enc_stats), (&head.head_grads, &head.head_stats))?;
        }
        self.bts.update(&tail_grads, &tail_stats)?;
        self.channel.ledger.close_iteration();
        self.iteration = it;
        Ok(IterationReport {
            iteration: it,
            losses,
            exchanged: self.channel.ledger.total(),
        })
    }
}

/// Runs `fleet.iterations` rounds, calling `observe` after each.
pub fn train_csilocal<T: Real>(
    config: TrainConfig,
    shards: Vec<Tensor<T>>,
    mut observe: impl FnMut(&CsiLocal<T>, &IterationReport) -> Result<()>,
) -> Result<CsiLocal<T>> {
    let mut sys = CsiLocal::new(config, shards)?;
    for _ in 0..config.fleet.iterations {
        let report = sys.step()?;
        observe(&sys, &report).map_err(|e| e.at_iteration(report.iteration))?;
    }
    Ok(sys)
}
