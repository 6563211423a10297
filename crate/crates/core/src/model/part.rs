use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, Graph, Tensor, Var};

use super::block::{Block, StatUpdate};
use super::Mode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartKind {
    Encoder,
    Tail,
    Head,
}

impl fmt::Display for PartKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PartKind::Encoder => "encoder",
            PartKind::Tail => "tail",
            PartKind::Head => "head",
        })
    }
}

/// One of the three model parts: an ordered stack of blocks with its own
/// parameters and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPart<T = f32> {
    pub kind: PartKind,
    /// Per-sample input shape, e.g. `[2, n_t, n_c]` or `[c1]`.
    pub input_shape: Vec<usize>,
    pub blocks: Vec<Block<T>>,
    pub bn_momentum: f64,
}

/// Result of running (some of) a part's blocks on a graph.
#[derive(Debug)]
pub struct PartForward {
    pub output: Var,
    /// Parameter leaves, in flat storage order starting at `param_offset`.
    pub params: Vec<Var>,
    pub param_offset: usize,
    /// Batch statistics to fold into the running statistics.
    pub stats: Vec<StatUpdate>,
}

impl<T: Real> ModelPart<T> {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.blocks.iter().flat_map(|b| b.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.blocks.iter_mut().flat_map(|b| b.params.iter_mut())
    }

    pub fn num_tensors(&self) -> usize {
        self.blocks.iter().map(|b| b.params.len()).sum()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| {
                b.kind
                    .param_shapes()
                    .into_iter()
                    .zip(&b.params)
                    .map(move |((name, _), t)| (format!("{i}.{name}"), t))
            })
            .collect()
    }

    /// Flat tensor indices owned by `blocks`.
    pub fn tensor_range(&self, blocks: Range<usize>) -> Range<usize> {
        let before: usize = self.blocks[..blocks.start].iter().map(|b| b.params.len()).sum();
        let inside: usize = self.blocks[blocks].iter().map(|b| b.params.len()).sum();
        before..before + inside
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<PartForward> {
        self.forward_blocks(g, x, 0..self.blocks.len(), mode, true)
    }

    /// Runs `blocks` on `x`. With `track` false parameters enter the graph
    /// as constants.
    pub fn forward_blocks(
        &self,
        g: &mut Graph<T>,
        x: Var,
        blocks: Range<usize>,
        mode: Mode,
        track: bool,
    ) -> Result<PartForward> {
        if blocks.start == 0 {
            let shape = g.shape(x);
            if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
                let mut expected = vec![shape.first().copied().unwrap_or(0)];
                expected.extend_from_slice(&self.input_shape);
                return Err(Error::dim(
                    match self.kind {
                        PartKind::Encoder => "encoder input",
                        PartKind::Tail => "decoder tail input",
                        PartKind::Head => "decoder head input",
                    },
                    shape,
                    &expected,
                ));
            }
        }
        let param_offset = self.tensor_range(blocks.clone()).start;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        let mut y = x;
        for i in blocks {
            y = self.blocks[i].forward(g, y, mode, track, i, &mut params, &mut stats)?;
        }
        Ok(PartForward {
            output: y,
            params,
            param_offset,
            stats,
        })
    }

    /// Gradients for the parameters bound in `fwd`, zero where none flowed.
    pub fn collect_grads(&self, grads: &mut Gradients<T>, fwd: &PartForward) -> Vec<Tensor<T>> {
        let flat: Vec<&Tensor<T>> = self.params().collect();
        fwd.params
            .iter()
            .enumerate()
            .map(|(i, &v)| grads.or_zeros(v, flat[fwd.param_offset + i]))
            .collect()
    }

    /// Folds train-mode batch statistics into the running statistics, in
    /// the order given.
    pub fn commit_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.blocks[u.block].stats[u.slot].update(&u.stats, self.bn_momentum);
        }
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().map(|t| Tensor::zeros(t.shape().to_vec())).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelPart<U> {
        ModelPart {
            kind: self.kind,
            input_shape: self.input_shape.clone(),
            blocks: self.blocks.iter().map(Block::cast).collect(),
            bn_momentum: self.bn_momentum,
        }
    }

    /// Copies parameter values (not statistics) from `other`.
    pub fn copy_params_from(&mut self, other: &ModelPart<T>) {
        for (dst, src) in self.params_mut().zip(other.params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
}
