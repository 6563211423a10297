use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{BatchStats, Graph, NormStats, Tensor, Var, BN_EPS};

use super::Mode;

/// Layer groups the model parts are assembled from.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockKind {
    /// Same-padded convolution, optionally followed by batch norm and a
    /// leaky ReLU.
    Conv {
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        norm: bool,
        slope: Option<f64>,
    },
    /// Fully connected layer over the flattened input. `grid` reshapes the
    /// output to `(B, grid...)`.
    Dense {
        inputs: usize,
        outputs: usize,
        grid: Option<[usize; 3]>,
        hard_sigmoid: bool,
    },
    /// Residual block: `leaky(bn(conv_kx1(leaky(bn(conv_1xk(x))))) + x)`.
    CrBlock { channels: usize, k: usize, slope: f64 },
}

impl BlockKind {
    /// Parameter names and shapes, in storage order.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            BlockKind::Conv {
                cin,
                cout,
                kh,
                kw,
                norm,
                ..
            } => {
                let mut v = vec![("conv.weight", vec![cout, cin, kh, kw]), ("conv.bias", vec![cout])];
                if norm {
                    v.push(("bn.gamma", vec![cout]));
                    v.push(("bn.beta", vec![cout]));
                }
                v
            }
            BlockKind::Dense { inputs, outputs, .. } => {
                vec![("fc.weight", vec![outputs, inputs]), ("fc.bias", vec![outputs])]
            }
            BlockKind::CrBlock { channels: c, k, .. } => vec![
                ("conv1.weight", vec![c, c, 1, k]),
                ("conv1.bias", vec![c]),
                ("bn1.gamma", vec![c]),
                ("bn1.beta", vec![c]),
                ("conv2.weight", vec![c, c, k, 1]),
                ("conv2.bias", vec![c]),
                ("bn2.gamma", vec![c]),
                ("bn2.beta", vec![c]),
            ],
        }
    }

    /// Multiply-accumulates per sample; convolutions run over `positions`
    /// spatial positions.
    pub fn macs_per_row(&self, positions: usize) -> usize {
        match *self {
            BlockKind::Conv { cin, cout, kh, kw, .. } => cin * cout * kh * kw * positions,
            BlockKind::Dense { inputs, outputs, .. } => inputs * outputs,
            BlockKind::CrBlock { channels: c, k, .. } => 2 * c * c * k * positions,
        }
    }

    /// Number of batch-norm layers (running-statistic slots).
    pub fn norm_layers(&self) -> usize {
        match self {
            BlockKind::Conv { norm, .. } => usize::from(*norm),
            BlockKind::Dense { .. } => 0,
            BlockKind::CrBlock { .. } => 2,
        }
    }

    /// Channel count of each batch-norm layer.
    fn norm_channels(&self) -> Vec<usize> {
        match *self {
            BlockKind::Conv { cout, norm: true, .. } => vec![cout],
            BlockKind::CrBlock { channels, .. } => vec![channels; 2],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self, tensor: &str) -> usize {
        match *self {
            BlockKind::Conv { cin, kh, kw, .. } => cin * kh * kw,
            BlockKind::Dense { inputs, .. } => inputs,
            BlockKind::CrBlock { channels, k, .. } => {
                debug_assert!(tensor.starts_with("conv"));
                channels * k
            }
        }
    }
}

/// Exponential-moving-average batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn fresh(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// Folds one batch in with the given momentum; the stored variance is
    /// the unbiased estimate.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        let unbias = batch.count as f64 / (batch.count as f64 - 1.0);
        for c in 0..self.mean.len() {
            self.mean[c] = (1.0 - momentum) * self.mean[c] + momentum * batch.mean[c];
            self.var[c] = (1.0 - momentum) * self.var[c] + momentum * batch.var[c] * unbias;
        }
    }
}

/// Statistics observed by one batch-norm layer during a train-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct StatUpdate {
    pub block: usize,
    pub slot: usize,
    pub stats: BatchStats,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T = f32> {
    pub kind: BlockKind,
    pub params: Vec<Tensor<T>>,
    pub stats: Vec<RunningStats>,
}

impl<T: Real> Block<T> {
    /// Uniform(−a, a) weights and biases with `a = sqrt(1 / fan_in)`;
    /// batch-norm scale 1 and shift 0.
    pub fn init(kind: BlockKind, rng: &mut impl Rng) -> Self {
        let params = kind
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gamma") {
                    Tensor::full(shape, T::one())
                } else if name.ends_with("beta") {
                    Tensor::zeros(shape)
                } else {
                    let a = (1.0 / kind.fan_in(name) as f64).sqrt();
                    Tensor::from_fn(shape, |_| T::cast(rng.random_range(-a..a)))
                }
            })
            .collect();
        let stats = kind.norm_channels().into_iter().map(RunningStats::fresh).collect();
        Block { kind, params, stats }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> Block<U> {
        Block {
            kind: self.kind.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stats: self.stats.clone(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        track: bool,
        index: usize,
        vars: &mut Vec<Var>,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let p: Vec<Var> = self
            .params
            .iter()
            .map(|t| g.leaf(t.clone(), track))
            .collect();
        vars.extend_from_slice(&p);

        let mut norm = |g: &mut Graph<T>, x: Var, gamma: Var, beta: Var, slot: usize| -> Result<Var> {
            let stats = match mode {
                Mode::Train => NormStats::Batch,
                Mode::Eval => NormStats::Running {
                    mean: &self.stats[slot].mean,
                    var: &self.stats[slot].var,
                },
            };
            let (y, seen) = g.batch_norm(x, gamma, beta, stats, BN_EPS)?;
            if let Some(stats) = seen {
                updates.push(StatUpdate {
                    block: index,
                    slot,
                    stats,
                });
            }
            Ok(y)
        };

        match self.kind {
            BlockKind::Conv { norm: has_norm, slope, .. } => {
                let mut y = g.conv2d(x, p[0], p[1])?;
                if has_norm {
                    y = norm(g, y, p[2], p[3], 0)?;
                }
                if let Some(s) = slope {
                    y = g.leaky_relu(y, s)?;
                }
                Ok(y)
            }
            BlockKind::Dense {
                inputs,
                grid,
                hard_sigmoid,
                ..
            } => {
                let x = if g.shape(x).len() == 2 { x } else { g.flatten(x)? };
                if g.shape(x)[1] != inputs {
                    return Err(Error::dim("dense input", g.shape(x), &[inputs]));
                }
                let mut y = g.linear(x, p[0], p[1])?;
                if let Some([c, h, w]) = grid {
                    let b = g.shape(y)[0];
                    y = g.reshape(y, &[b, c, h, w])?;
                }
                if hard_sigmoid {
                    y = g.hard_sigmoid(y)?;
                }
                Ok(y)
            }
            BlockKind::CrBlock { slope, .. } => {
                let a = g.conv2d(x, p[0], p[1])?;
                let a = norm(g, a, p[2], p[3], 0)?;
                let a = g.leaky_relu(a, slope)?;
                let a = g.conv2d(a, p[4], p[5])?;
                let a = norm(g, a, p[6], p[7], 1)?;
                let s = g.add(a, x)?;
                g.leaky_relu(s, slope)
            }
        }
    }
}
