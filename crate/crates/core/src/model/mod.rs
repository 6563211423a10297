//! The three-part CSI autoencoder: encoder and decoder head live on each
//! UE, the decoder tail is shared at the base station.

mod block;
mod part;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use block::{Block, BlockKind, RunningStats, StatUpdate};
pub use part::{ModelPart, PartForward, PartKind};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

/// Negative slope of every leaky ReLU in the network.
pub const LEAKY_SLOPE: f64 = 0.3;

/// Batch-norm statistics: batch (train) or running (eval).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// CSI matrix extents. Samples are `(2, n_t, n_c)`: real and imaginary
/// planes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsiDims {
    pub n_t: usize,
    pub n_c: usize,
}

impl CsiDims {
    pub fn new(n_t: usize, n_c: usize) -> Result<Self> {
        if n_t == 0 {
            return Err(Error::config("model.n_t", "must be at least 1"));
        }
        if n_c == 0 {
            return Err(Error::config("model.n_c", "must be at least 1"));
        }
        Ok(CsiDims { n_t, n_c })
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        [2, self.n_t, self.n_c]
    }

    /// `2·n_t·n_c`.
    pub fn flat_len(&self) -> usize {
        2 * self.n_t * self.n_c
    }
}

/// Widths of the smashed data at the two split points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryDims {
    pub c1: usize,
    pub c2: usize,
}

impl BoundaryDims {
    /// Warnings when a boundary is not narrower than the parts around it,
    /// i.e. unless `c1 < min(d1, d2)` and `c2 < min(d2, d3)`.
    pub fn warnings(&self, counts: &ParamCounts) -> Vec<String> {
        let mut out = Vec::new();
        if self.c1 >= counts.d1.min(counts.d2) {
            out.push(format!(
                "c1 = {} is not below min(d1, d2) = {}; smashed data outweighs parameters",
                self.c1,
                counts.d1.min(counts.d2)
            ));
        }
        if self.c2 >= counts.d2.min(counts.d3) {
            out.push(format!(
                "c2 = {} is not below min(d2, d3) = {}; smashed data outweighs parameters",
                self.c2,
                counts.d2.min(counts.d3)
            ));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub dims: CsiDims,
    pub boundary: BoundaryDims,
    /// Width of the first tail layer; `2·n_t·n_c` when `None`.
    pub c_mid: Option<usize>,
    pub bn_momentum: f64,
}

impl ModelConfig {
    pub fn new(dims: CsiDims, boundary: BoundaryDims) -> Self {
        ModelConfig {
            dims,
            boundary,
            c_mid: None,
            bn_momentum: 0.1,
        }
    }

    pub fn mid_width(&self) -> usize {
        self.c_mid.unwrap_or(self.dims.flat_len())
    }

    pub fn validate(&self) -> Result<()> {
        CsiDims::new(self.dims.n_t, self.dims.n_c)?;
        if self.boundary.c1 == 0 {
            return Err(Error::config("model.c1", "must be at least 1"));
        }
        if self.boundary.c2 == 0 {
            return Err(Error::config("model.c2", "must be at least 1"));
        }
        if self.c_mid == Some(0) {
            return Err(Error::config("model.c_mid", "must be at least 1"));
        }
        Ok(())
    }

    pub fn encoder_blocks(&self) -> Vec<BlockKind> {
        vec![
            BlockKind::Conv {
                cin: 2,
                cout: 2,
                kh: 3,
                kw: 3,
                norm: true,
                slope: Some(LEAKY_SLOPE),
            },
            BlockKind::Dense {
                inputs: self.dims.flat_len(),
                outputs: self.boundary.c1,
                grid: None,
                hard_sigmoid: false,
            },
        ]
    }

    pub fn tail_blocks(&self) -> Vec<BlockKind> {
        let flat = self.dims.flat_len();
        let grid = self.dims.sample_shape();
        vec![
            BlockKind::Dense {
                inputs: self.boundary.c1,
                outputs: self.mid_width(),
                grid: None,
                hard_sigmoid: false,
            },
            BlockKind::Dense {
                inputs: self.mid_width(),
                outputs: flat,
                grid: Some(grid),
                hard_sigmoid: false,
            },
            BlockKind::Conv {
                cin: 2,
                cout: 2,
                kh: 3,
                kw: 3,
                norm: false,
                slope: Some(LEAKY_SLOPE),
            },
            crblock(3),
            crblock(5),
            BlockKind::Dense {
                inputs: flat,
                outputs: self.boundary.c2,
                grid: None,
                hard_sigmoid: false,
            },
        ]
    }

    pub fn head_blocks(&self) -> Vec<BlockKind> {
        vec![BlockKind::Dense {
            inputs: self.boundary.c2,
            outputs: self.dims.flat_len(),
            grid: Some(self.dims.sample_shape()),
            hard_sigmoid: true,
        }]
    }
}

/// Two-channel residual block with `1×k` and `k×1` convolutions.
pub fn crblock(k: usize) -> BlockKind {
    BlockKind::CrBlock {
        channels: 2,
        k,
        slope: LEAKY_SLOPE,
    }
}

/// Checks the kernel size of a CRBlock; only 3 and 5 are used.
pub fn crblock_checked(k: usize) -> Result<BlockKind> {
    if k != 3 && k != 5 {
        return Err(Error::UnsupportedKernel {
            kh: 1,
            kw: k,
            reason: "CRBlock supports k = 3 or k = 5",
        });
    }
    Ok(crblock(k))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub d: usize,
}

/// Encoder, decoder tail and decoder head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub encoder: ModelPart<T>,
    pub tail: ModelPart<T>,
    pub head: ModelPart<T>,
}

/// Graph handles of a composed forward pass.
#[derive(Debug)]
pub struct ComposedForward {
    pub encoder: PartForward,
    pub tail: PartForward,
    pub head: PartForward,
}

impl ComposedForward {
    pub fn output(&self) -> Var {
        self.head.output
    }
}

impl<T: Real> Model<T> {
    /// Deterministic initialization; each part draws from its own stream so
    /// resizing one part leaves the others unchanged.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let build = |kind: PartKind, blocks: Vec<BlockKind>, input_shape: Vec<usize>| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(kind as u64 + 1);
            ModelPart {
                kind,
                input_shape,
                blocks: blocks.into_iter().map(|k| Block::init(k, &mut rng)).collect(),
                bn_momentum: config.bn_momentum,
            }
        };
        Ok(Model {
            config: *config,
            encoder: build(
                PartKind::Encoder,
                config.encoder_blocks(),
                config.dims.sample_shape().to_vec(),
            ),
            tail: build(PartKind::Tail, config.tail_blocks(), vec![config.boundary.c1]),
            head: build(PartKind::Head, config.head_blocks(), vec![config.boundary.c2]),
        })
    }

    pub fn param_counts(&self) -> ParamCounts {
        let (d1, d2, d3) = (
            self.encoder.param_count(),
            self.tail.param_count(),
            self.head.param_count(),
        );
        ParamCounts {
            d1,
            d2,
            d3,
            d: d1 + d2 + d3,
        }
    }

    pub fn part(&self, kind: PartKind) -> &ModelPart<T> {
        match kind {
            PartKind::Encoder => &self.encoder,
            PartKind::Tail => &self.tail,
            PartKind::Head => &self.head,
        }
    }

    pub fn part_mut(&mut self, kind: PartKind) -> &mut ModelPart<T> {
        match kind {
            PartKind::Encoder => &mut self.encoder,
            PartKind::Tail => &mut self.tail,
            PartKind::Head => &mut self.head,
        }
    }

    /// `head ∘ tail ∘ encoder` on one graph.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<ComposedForward> {
        let encoder = self.encoder.forward(g, x, mode)?;
        let tail = self.tail.forward(g, encoder.output, mode)?;
        let head = self.head.forward(g, tail.output, mode)?;
        Ok(ComposedForward { encoder, tail, head })
    }

    /// Eval-mode reconstruction of a `(B, 2, n_t, n_c)` batch.
    pub fn reconstruct(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let e = self.encoder.forward_blocks(&mut g, x, 0..self.encoder.num_blocks(), Mode::Eval, false)?;
        let t = self.tail.forward_blocks(&mut g, e.output, 0..self.tail.num_blocks(), Mode::Eval, false)?;
        let h = self.head.forward_blocks(&mut g, t.output, 0..self.head.num_blocks(), Mode::Eval, false)?;
        Ok(g.value(h.output).clone())
    }

    /// Per-sample eval-mode NMSE of the reconstruction.
    pub fn sample_nmse(&self, batch: &Tensor<T>) -> Result<Vec<f64>> {
        let rec = self.reconstruct(batch)?;
        per_sample_nmse(&rec, batch)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config,
            encoder: self.encoder.cast(),
            tail: self.tail.cast(),
            head: self.head.cast(),
        }
    }
}

/// `‖ĥ_b − h_b‖² / ‖h_b‖²` for every sample `b`.
pub fn per_sample_nmse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Vec<f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("nmse", pred.shape(), target.shape()));
    }
    let w = target.row_len();
    (0..target.rows())
        .map(|b| {
            let (p, t) = (&pred.data()[b * w..(b + 1) * w], &target.data()[b * w..(b + 1) * w]);
            let den: f64 = t.iter().map(|v| v.wide() * v.wide()).sum();
            if den == 0.0 {
                return Err(Error::DegenerateSample { sample: b });
            }
            let num: f64 = p.iter().zip(t).map(|(a, b)| (a.wide() - b.wide()).powi(2)).sum();
            Ok(num / den)
        })
        .collect()
}
