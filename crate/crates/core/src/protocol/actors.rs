use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelPart, PartForward, StatUpdate};
use crate::optim::{Adam, AdamConfig};
use crate::pipeline::{
    make_schedule, partition_tail, split_microbatches, PipelineConfig, PipelineForward, PipelineSchedule,
    StagePartition,
};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

use super::message::{MessageKind, SmashedBatch};

struct EncoderPass<T> {
    graph: Graph<T>,
    fwd: PartForward,
    targets: Tensor<T>,
}

/// Output of the UE-side loss and head backward.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadStep<T = f32> {
    /// Mean NMSE over the UE's mini-batch.
    pub loss: f64,
    /// Gradient at the tail output, to upload.
    pub upload: SmashedBatch<T>,
    pub head_grads: Vec<Tensor<T>>,
    pub head_stats: Vec<StatUpdate>,
}

/// A user equipment: private data, encoder, decoder head and their
/// optimizers.
pub struct Ue<T: Real = f32> {
    pub id: usize,
    pub encoder: ModelPart<T>,
    pub head: ModelPart<T>,
    pub encoder_opt: Adam,
    pub head_opt: Adam,
    /// `(M, 2, n_t, n_c)`; never leaves the UE.
    pub data: Tensor<T>,
    pub mode: Mode,
    pending: Option<EncoderPass<T>>,
}

impl<T: Real> Ue<T> {
    pub fn new(
        id: usize,
        encoder: ModelPart<T>,
        head: ModelPart<T>,
        data: Tensor<T>,
        optimizer: AdamConfig,
        mode: Mode,
    ) -> Result<Self> {
        if data.shape().len() != 4 || data.shape()[1..] != encoder.input_shape[..] {
            let mut expected = vec![data.rows()];
            expected.extend_from_slice(&encoder.input_shape);
            return Err(Error::dim("UE shard", data.shape(), &expected));
        }
        Ok(Ue {
            id,
            encoder_opt: Adam::new(encoder.params(), optimizer)?,
            head_opt: Adam::new(head.params(), optimizer)?,
            encoder,
            head,
            data,
            mode,
            pending: None,
        })
    }

    pub fn samples(&self) -> usize {
        self.data.rows()
    }

    /// Encodes the selected samples and returns the upload.
    pub fn forward_upload(&mut self, indices: &[usize]) -> Result<SmashedBatch<T>> {
        if indices.is_empty() {
            return Err(Error::Protocol(format!("UE {} was given an empty mini-batch", self.id)));
        }
        let targets = self.data.gather_rows(indices)?;
        let mut graph = Graph::new();
        let x = graph.constant(targets.clone());
        let fwd = self.encoder.forward(&mut graph, x, self.mode)?;
        let payload = graph.value(fwd.output).clone();
        self.pending = Some(EncoderPass { graph, fwd, targets });
        SmashedBatch::new(self.id, MessageKind::EncoderActivation, payload)
    }

    /// Decodes the tail output, takes the NMSE against the mini-batch and
    /// backpropagates through the head.
    pub fn loss_and_backward(&mut self, tail_output: &SmashedBatch<T>) -> Result<HeadStep<T>> {
        self.expect(tail_output, MessageKind::TailOutput)?;
        let pass = self
            .pending
            .as_ref()
            .ok_or_else(|| Error::Protocol(format!("UE {} received a tail output before uploading", self.id)))?;
        if tail_output.payload.rows() != pass.targets.rows() {
            return Err(Error::dim("tail output rows", tail_output.payload.shape(), pass.targets.shape()));
        }
        let mut g = Graph::new();
        let u: Var = g.param(tail_output.payload.clone());
        let head = self.head.forward(&mut g, u, self.mode)?;
        let t = g.constant(pass.targets.clone());
        let loss = g.nmse(head.output, t)?;
        let value = g.value(loss).data()[0].wide();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: format!("UE {} loss", self.id),
                tensor: loss.index(),
                element: 0,
                value,
            });
        }
        let mut grads = g.backward(loss)?;
        let du = grads.or_zeros(u, &tail_output.payload);
        Ok(HeadStep {
            loss: value,
            upload: SmashedBatch::new(self.id, MessageKind::HeadBoundaryGrad, du)?,
            head_grads: self.head.collect_grads(&mut grads, &head),
            head_stats: head.stats,
        })
    }

    /// Finishes the encoder backward from the downloaded boundary gradient.
    /// Returns encoder gradients and batch statistics.
    pub fn encoder_backward(&mut self, grad: &SmashedBatch<T>) -> Result<(Vec<Tensor<T>>, Vec<StatUpdate>)> {
        self.expect(grad, MessageKind::EncoderBoundaryGrad)?;
        let pass = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol(format!("UE {} received an encoder gradient with no pending pass", self.id)))?;
        let mut grads = pass.graph.backward_from(pass.fwd.output, grad.payload.clone())?;
        Ok((self.encoder.collect_grads(&mut grads, &pass.fwd), pass.fwd.stats))
    }

    /// Adam steps on encoder and head, then running-statistic updates.
    pub fn update(
        &mut self,
        encoder: (&[Tensor<T>], &[StatUpdate]),
        head: (&[Tensor<T>], &[StatUpdate]),
    ) -> Result<()> {
        self.encoder_opt.step(self.encoder.params_mut(), encoder.0)?;
        self.head_opt.step(self.head.params_mut(), head.0)?;
        self.encoder.commit_stats(encoder.1);
        self.head.commit_stats(head.1);
        Ok(())
    }

    fn expect(&self, msg: &SmashedBatch<T>, kind: MessageKind) -> Result<()> {
        if msg.ue != self.id || msg.kind != kind {
            return Err(Error::Protocol(format!(
                "UE {} expected {kind}, got {} addressed to UE {}",
                self.id, msg.kind, msg.ue
            )));
        }
        Ok(())
    }
}

/// Concatenates one batch per UE in ascending UE order. Returns the rows
/// and each UE's row range.
pub fn bts_accumulate<T: Real>(
    batches: &[SmashedBatch<T>],
    ues: usize,
    kind: MessageKind,
) -> Result<(Tensor<T>, Vec<Range<usize>>)> {
    let mut ordered: Vec<Option<&SmashedBatch<T>>> = vec![None; ues];
    for b in batches {
        if b.kind != kind {
            return Err(Error::Protocol(format!("expected {kind} from UE {}, got {}", b.ue, b.kind)));
        }
        let slot = ordered
            .get_mut(b.ue)
            .ok_or_else(|| Error::Protocol(format!("{kind} from unknown UE {}", b.ue)))?;
        if slot.replace(b).is_some() {
            return Err(Error::Protocol(format!("duplicate {kind} from UE {}", b.ue)));
        }
    }
    let mut parts = Vec::with_capacity(ues);
    let mut ranges = Vec::with_capacity(ues);
    let mut start = 0;
    for (ue, b) in ordered.into_iter().enumerate() {
        let b = b.ok_or_else(|| Error::Protocol(format!("missing {kind} from UE {ue}")))?;
        ranges.push(start..start + b.payload.rows());
        start += b.payload.rows();
        parts.push(&b.payload);
    }
    Ok((Tensor::concat_rows(&parts)?, ranges))
}

/// Splits accumulated rows back into one batch per UE.
pub fn split_by_ue<T: Real>(rows: &Tensor<T>, ranges: &[Range<usize>], kind: MessageKind) -> Result<Vec<SmashedBatch<T>>> {
    ranges
        .iter()
        .enumerate()
        .map(|(ue, r)| SmashedBatch::new(ue, kind, rows.slice_rows(r.clone())?))
        .collect()
}

struct TailPass<T> {
    fwd: PipelineForward<T>,
    ranges: Vec<Range<usize>>,
}

/// Tail parameter gradient, observed batch statistics, and one
/// encoder-boundary gradient per UE.
pub type TailBackward<T> = (Vec<Tensor<T>>, Vec<StatUpdate>, Vec<SmashedBatch<T>>);

/// The base station: shared decoder tail, its optimizer and the pipeline
/// layout.
pub struct Bts<T: Real = f32> {
    pub tail: ModelPart<T>,
    pub optimizer: Adam,
    pub pipeline: PipelineConfig,
    pub partition: StagePartition,
    pub schedule: PipelineSchedule,
    pub ues: usize,
    pub mode: Mode,
    /// Divide the tail gradient by the UE count instead of summing.
    pub average_grad: bool,
    pending: Option<TailPass<T>>,
}

impl<T: Real> Bts<T> {
    pub fn new(
        tail: ModelPart<T>,
        ues: usize,
        optimizer: AdamConfig,
        pipeline: PipelineConfig,
        mode: Mode,
        average_grad: bool,
    ) -> Result<Self> {
        let partition = partition_tail(&tail, pipeline.stages)?;
        Ok(Bts {
            optimizer: Adam::new(tail.params(), optimizer)?,
            schedule: make_schedule(pipeline.stages, pipeline.micro_batches),
            partition,
            pipeline,
            tail,
            ues,
            mode,
            average_grad,
            pending: None,
        })
    }

    /// Accumulates the uploads, runs the tail through the pipeline and
    /// returns one tail-output batch per UE.
    pub fn tail_forward(&mut self, uploads: &[SmashedBatch<T>]) -> Result<Vec<SmashedBatch<T>>> {
        let (rows, ranges) = bts_accumulate(uploads, self.ues, MessageKind::EncoderActivation)?;
        let micro = split_microbatches(rows.rows(), self.pipeline.micro_batches)?;
        let fwd = PipelineForward::run(&self.tail, &self.partition, &micro, &self.schedule, &rows, self.mode)?;
        let out = split_by_ue(fwd.output(), &ranges, MessageKind::TailOutput)?;
        self.pending = Some(TailPass { fwd, ranges });
        Ok(out)
    }

    /// Backpropagates the uploaded boundary gradients through the tail.
    pub fn tail_backward(&mut self, grads: &[SmashedBatch<T>]) -> Result<TailBackward<T>> {
        let pass = self
            .pending
            .take()
            .ok_or_else(|| Error::Protocol("tail gradients arrived with no pending forward".into()))?;
        let (dy, ranges) = bts_accumulate(grads, self.ues, MessageKind::HeadBoundaryGrad)?;
        if ranges != pass.ranges {
            return Err(Error::Protocol(format!(
                "boundary gradient rows {ranges:?} do not match forward rows {:?}",
                pass.ranges
            )));
        }
        let mut g = pass.fwd.backward(&self.tail, &dy)?;
        if self.average_grad && self.ues > 1 {
            let inv = 1.0 / self.ues as f64;
            for t in &mut g.params {
                t.data_mut().iter_mut().for_each(|v| *v = T::cast(v.wide() * inv));
            }
        }
        let down = split_by_ue(&g.input, &ranges, MessageKind::EncoderBoundaryGrad)?;
        Ok((g.params, pass.fwd.stat_updates(), down))
    }

    pub fn update(&mut self, grads: &[Tensor<T>], stats: &[StatUpdate]) -> Result<()> {
        self.optimizer.step(self.tail.params_mut(), grads)?;
        self.tail.commit_stats(stats);
        Ok(())
    }
}
