//! Federated baselines: FedAvg, FedProx and FedGrad, each with a
//! personalized variant that keeps the encoder on the UE.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelPart, ParamCounts, PartKind, StatUpdate};
use crate::optim::Adam;
use crate::protocol::{minibatch_indices, CommLedger, IterationReport, Link, TrainConfig};
use crate::real::Real;
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    FedAvg,
    FedProx,
    FedGrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSpec {
    pub family: Family,
    /// Keep the encoder local and share only the decoder.
    #[serde(default)]
    pub personalized: bool,
    /// Proximal coefficient, used by FedProx only.
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
}

fn default_mu() -> f64 {
    0.01
}

fn default_local_steps() -> usize {
    1
}

impl BaselineSpec {
    pub fn new(family: Family, personalized: bool) -> Self {
        BaselineSpec {
            family,
            personalized,
            mu: default_mu(),
            local_steps: default_local_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("algorithm.mu", format!("must be finite and non-negative, got {}", self.mu)));
        }
        if self.local_steps == 0 {
            return Err(Error::config("algorithm.local_steps", "must be at least 1"));
        }
        if self.family == Family::FedGrad && self.local_steps != 1 {
            return Err(Error::config(
                "algorithm.local_steps",
                format!("FedGrad uploads one gradient per round, got {}", self.local_steps),
            ));
        }
        Ok(())
    }

    /// Proximal coefficient actually applied.
    pub fn prox_mu(&self) -> f64 {
        if self.family == Family::FedProx {
            self.mu
        } else {
            0.0
        }
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.family {
            Family::FedAvg => "fedavg",
            Family::FedProx => "fedprox",
            Family::FedGrad => "fedgrad",
        };
        write!(f, "{name}{}", if self.personalized { "_per" } else { "" })
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    /// `fedavg`, `fedavg_per`, `fedprox`, `fedprox_per`, `fedgrad`,
    /// `fedgrad_per`, with default `mu` and local steps.
    fn from_str(s: &str) -> Result<Self> {
        let (base, personalized) = match s.strip_suffix("_per") {
            Some(b) => (b, true),
            None => (s, false),
        };
        let family = match base {
            "fedavg" => Family::FedAvg,
            "fedprox" => Family::FedProx,
            "fedgrad" => Family::FedGrad,
            _ => {
                return Err(Error::config(
                    "algorithm.name",
                    format!("unknown algorithm `{s}` (expected csilocal, fedavg, fedprox or fedgrad, optionally with _per)"),
                ))
            }
        };
        Ok(BaselineSpec::new(family, personalized))
    }
}

/// The parts whose parameters cross the link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharedSubset {
    pub parts: Vec<PartKind>,
}

impl SharedSubset {
    pub fn contains(&self, kind: PartKind) -> bool {
        self.parts.contains(&kind)
    }

    /// Parts that stay on the UE.
    pub fn complement(&self) -> Vec<PartKind> {
        PARTS.into_iter().filter(|k| !self.contains(*k)).collect()
    }

    /// `d_shared`.
    pub fn param_count(&self, counts: &ParamCounts) -> usize {
        self.parts
            .iter()
            .map(|k| match k {
                PartKind::Encoder => counts.d1,
                PartKind::Tail => counts.d2,
                PartKind::Head => counts.d3,
            })
            .sum()
    }

    pub fn tensors<'a, T: Real>(&self, model: &'a Model<T>) -> Vec<&'a Tensor<T>> {
        self.parts.iter().flat_map(|&k| model.part(k).params()).collect()
    }
}

const PARTS: [PartKind; 3] = [PartKind::Encoder, PartKind::Tail, PartKind::Head];

pub fn shared_subset(spec: &BaselineSpec) -> SharedSubset {
    let parts = if spec.personalized {
        vec![PartKind::Tail, PartKind::Head]
    } else {
        PARTS.to_vec()
    };
    SharedSubset { parts }
}

/// `mu · (local − global)` for each tensor.
pub fn fedprox_penalty_grad<T: Real>(local: &[&Tensor<T>], global: &[&Tensor<T>], mu: f64) -> Result<Vec<Tensor<T>>> {
    if local.len() != global.len() {
        return Err(Error::Contract(format!(
            "proximal term over {} local and {} global tensors",
            local.len(),
            global.len()
        )));
    }
    local
        .iter()
        .zip(global)
        .map(|(l, g)| {
            if l.shape() != g.shape() {
                return Err(Error::dim("fedprox penalty", l.shape(), g.shape()));
            }
            let data = l.data().iter().zip(g.data()).map(|(a, b)| T::cast(mu * (a.wide() - b.wide()))).collect();
            Tensor::new(l.shape().to_vec(), data)
        })
        .collect()
}

/// `2·K·N·d_shared`: one download and one upload of the shared subset per
/// UE per round.
pub fn baseline_comm_closed_form(spec: &BaselineSpec, counts: &ParamCounts, ues: usize, rounds: usize) -> u64 {
    2 * rounds as u64 * ues as u64 * shared_subset(spec).param_count(counts) as u64
}

/// Elementwise mean over UEs, summed in `f64` in ascending UE order.
fn average<T: Real>(uploads: &[Vec<Tensor<T>>]) -> Vec<Tensor<T>> {
    let inv = 1.0 / uploads.len() as f64;
    (0..uploads[0].len())
        .map(|i| {
            let mut acc = vec![0.0f64; uploads[0][i].numel()];
            for up in uploads {
                for (a, v) in acc.iter_mut().zip(up[i].data()) {
                    *a += v.wide();
                }
            }
            Tensor::from_fn(uploads[0][i].shape().to_vec(), |j| T::cast(acc[j] * inv))
        })
        .collect()
}

/// One UE of a federated baseline: a full local model and its optimizers.
pub struct Client<T: Real = f32> {
    pub id: usize,
    pub model: Model<T>,
    /// Encoder, tail and head optimizers. Their state persists across
    /// rounds.
    pub optimizers: [Adam; 3],
    pub data: Tensor<T>,
}

struct LocalGrads<T> {
    loss: f64,
    grads: [Vec<Tensor<T>>; 3],
    stats: [Vec<StatUpdate>; 3],
}

impl<T: Real> Client<T> {
    fn gradients(&self, config: &TrainConfig, step: usize) -> Result<LocalGrads<T>> {
        let fleet = config.fleet;
        let idx = minibatch_indices(fleet.seed, self.id, step, self.data.rows(), fleet.batch);
        let batch = self.data.gather_rows(&idx)?;
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let t = g.constant(batch);
        let f = self.model.forward(&mut g, x, config.batch_norm)?;
        let l = g.nmse(f.output(), t)?;
        let loss = g.value(l).data()[0].wide();
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("UE {} loss", self.id),
                tensor: l.index(),
                element: 0,
                value: loss,
            });
        }
        let mut grads = g.backward(l)?;
        Ok(LocalGrads {
            loss,
            grads: [
                self.model.encoder.collect_grads(&mut grads, &f.encoder),
                self.model.tail.collect_grads(&mut grads, &f.tail),
                self.model.head.collect_grads(&mut grads, &f.head),
            ],
            stats: [f.encoder.stats, f.tail.stats, f.head.stats],
        })
    }

    fn commit(&mut self, stats: &[Vec<StatUpdate>; 3]) {
        for (k, s) in PARTS.into_iter().zip(stats) {
            self.model.part_mut(k).commit_stats(s);
        }
    }

    fn adam(&mut self, k: PartKind, grads: &[Tensor<T>]) -> Result<()> {
        let part: &mut ModelPart<T> = match k {
            PartKind::Encoder => &mut self.model.encoder,
            PartKind::Tail => &mut self.model.tail,
            PartKind::Head => &mut self.model.head,
        };
        self.optimizers[k as usize].step(part.params_mut(), grads)
    }
}

/// A federated baseline in progress. `global` holds the server's copy of
/// the shared parts; its other parts are unused.
pub struct Federated<T: Real = f32> {
    pub config: TrainConfig,
    pub spec: BaselineSpec,
    pub shared: SharedSubset,
    pub global: Model<T>,
    pub clients: Vec<Client<T>>,
    /// Server optimizers for the shared parts (FedGrad).
    pub server: Vec<Adam>,
    pub ledger: CommLedger,
    iteration: usize,
}

impl<T: Real> Federated<T> {
    pub fn new(config: TrainConfig, spec: BaselineSpec, shards: Vec<Tensor<T>>) -> Result<Self> {
        let init = Model::<T>::init(&config.model, config.fleet.seed)?;
        Self::from_model(config, spec, &init, shards)
    }

    pub fn from_model(config: TrainConfig, spec: BaselineSpec, init: &Model<T>, shards: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let fleet = config.fleet;
        if shards.len() != fleet.ues {
            return Err(Error::config(
                "fleet.ues",
                format!("{} UEs configured but {} shards given", fleet.ues, shards.len()),
            ));
        }
        let clients = shards
            .into_iter()
            .enumerate()
            .map(|(id, data)| {
                let mut expected = vec![fleet.samples_per_ue];
                expected.extend_from_slice(&config.model.dims.sample_shape());
                if data.shape() != expected {
                    return Err(Error::dim("UE shard", data.shape(), &expected));
                }
                let opt = |k: PartKind| Adam::new(init.part(k).params(), config.optimizer);
                Ok(Client {
                    id,
                    model: init.clone(),
                    optimizers: [opt(PartKind::Encoder)?, opt(PartKind::Tail)?, opt(PartKind::Head)?],
                    data,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let shared = shared_subset(&spec);
        let server = if spec.family == Family::FedGrad {
            shared
                .parts
                .iter()
                .map(|&k| Adam::new(init.part(k).params(), config.optimizer))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Federated {
            config,
            spec,
            shared,
            global: init.clone(),
            clients,
            server,
            ledger: CommLedger::new(fleet.ues),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn d_shared(&self) -> usize {
        self.shared.param_count(&self.global.param_counts())
    }

    /// UE `ue`'s model with the current global shared parts, as the next
    /// broadcast would leave it.
    pub fn model_for(&self, ue: usize) -> Model<T> {
        let mut m = self.clients[ue].model.clone();
        for &k in &self.shared.parts {
            m.part_mut(k).copy_params_from(self.global.part(k));
        }
        m
    }

    /// One round: broadcast, local work, upload, aggregate.
    pub fn step(&mut self) -> Result<IterationReport> {
        let it = self.iteration + 1;
        self.round(it).map_err(|e| e.at_iteration(it))
    }

    fn round(&mut self, it: usize) -> Result<IterationReport> {
        let d = self.d_shared() as u64;
        for c in &mut self.clients {
            for &k in &self.shared.parts {
                c.model.part_mut(k).copy_params_from(self.global.part(k));
            }
            self.ledger.record(c.id, Link::Downlink, d);
        }
        let losses = match self.spec.family {
            Family::FedAvg | Family::FedProx => self.local_rounds(it)?,
            Family::FedGrad => self.gradient_round(it)?,
        };
        self.ledger.close_iteration();
        self.iteration = it;
        Ok(IterationReport {
            iteration: it,
            losses,
            exchanged: self.ledger.total(),
        })
    }

    fn local_rounds(&mut self, it: usize) -> Result<Vec<f64>> {
        let mu = self.spec.prox_mu();
        let steps = self.spec.local_steps;
        let d = self.d_shared() as u64;
        let mut losses = Vec::with_capacity(self.clients.len());
        let mut uploads = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            let mut loss = 0.0;
            for s in 0..steps {
                let mut lg = c.gradients(&self.config, (it - 1) * steps + s + 1)?;
                loss += lg.loss;
                for k in PARTS {
                    let g = &mut lg.grads[k as usize];
                    if mu > 0.0 && self.shared.contains(k) {
                        let local: Vec<_> = c.model.part(k).params().collect();
                        let global: Vec<_> = self.global.part(k).params().collect();
                        for (gi, p) in g.iter_mut().zip(fedprox_penalty_grad(&local, &global, mu)?) {
                            for (a, b) in gi.data_mut().iter_mut().zip(p.data()) {
                                *a = T::cast(a.wide() + b.wide());
                            }
                        }
                    }
                    c.adam(k, g)?;
                }
                c.commit(&lg.stats);
            }
            losses.push(loss / steps as f64);
            let up: Vec<Tensor<T>> = self.shared.tensors(&c.model).into_iter().cloned().collect();
            self.ledger.record(c.id, Link::Uplink, d);
            uploads.push(up);
        }
        let mean = average(&uploads);
        let mut it_mean = mean.into_iter();
        for &k in &self.shared.parts {
            for dst in self.global.part_mut(k).params_mut() {
                *dst = it_mean.next().expect("one averaged tensor per shared tensor");
            }
        }
        Ok(losses)
    }

    fn gradient_round(&mut self, it: usize) -> Result<Vec<f64>> {
        let d = self.d_shared() as u64;
        let mut losses = Vec::with_capacity(self.clients.len());
        let mut uploads = Vec::with_capacity(self.clients.len());
        for c in &mut self.clients {
            let lg = c.gradients(&self.config, it)?;
            losses.push(lg.loss);
            let mut up = Vec::new();
            for k in PARTS {
                if self.shared.contains(k) {
                    up.extend(lg.grads[k as usize].iter().cloned());
                } else {
                    c.adam(k, &lg.grads[k as usize])?;
                }
            }
            c.commit(&lg.stats);
            self.ledger.record(c.id, Link::Uplink, d);
            uploads.push(up);
        }
        let mean = average(&uploads);
        let mut start = 0;
        for (&k, opt) in self.shared.parts.iter().zip(&mut self.server) {
            let part = self.global.part_mut(k);
            let n = part.num_tensors();
            opt.step(part.params_mut(), &mean[start..start + n])?;
            start += n;
        }
        Ok(losses)
    }
}

/// Runs `fleet.iterations` rounds, calling `observe` after each.
pub fn train_baseline<T: Real>(
    config: TrainConfig,
    spec: BaselineSpec,
    shards: Vec<Tensor<T>>,
    mut observe: impl FnMut(&Federated<T>, &IterationReport) -> Result<()>,
) -> Result<Federated<T>> {
    let mut sys = Federated::new(config, spec, shards)?;
    for _ in 0..config.fleet.iterations {
        let report = sys.step()?;
        observe(&sys, &report).map_err(|e| e.at_iteration(report.iteration))?;
    }
    Ok(sys)
}
