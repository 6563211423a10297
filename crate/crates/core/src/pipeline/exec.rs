use crate::error::{Error, Result};
use crate::model::{Mode, ModelPart, PartForward, StatUpdate};
use crate::real::Real;
use crate::tensor::{Graph, Tensor, Var};

use super::{Direction, MicroBatchSet, PipelineSchedule, StagePartition};

struct Cell<T> {
    graph: Graph<T>,
    input: Var,
    fwd: PartForward,
}

/// State between the forward and backward phases: one graph per
/// (stage, micro-batch).
pub struct PipelineForward<T = f32> {
    partition: StagePartition,
    micro: MicroBatchSet,
    schedule: PipelineSchedule,
    /// `cells[stage][micro]`, 0-based.
    cells: Vec<Vec<Cell<T>>>,
    output: Tensor<T>,
}

/// Parameter and input gradients of a pipelined backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineGrads<T = f32> {
    /// Aligned with the tail's flat parameter list.
    pub params: Vec<Tensor<T>>,
    /// Gradient with respect to the accumulated input rows.
    pub input: Tensor<T>,
}

fn check_shapes(partition: &StagePartition, micro: &MicroBatchSet, schedule: &PipelineSchedule, rows: usize) -> Result<()> {
    if schedule.stages != partition.stages() || schedule.micro_batches != micro.len() {
        return Err(Error::Contract(format!(
            "schedule is {}x{} but the partition has {} stages and {} micro-batches",
            schedule.stages,
            schedule.micro_batches,
            partition.stages(),
            micro.len()
        )));
    }
    if micro.rows() != rows {
        return Err(Error::Contract(format!(
            "micro-batches cover {} rows, input has {rows}",
            micro.rows()
        )));
    }
    schedule.validate()
}

impl<T: Real> PipelineForward<T> {
    /// Forward phase: runs every forward slot in schedule order.
    pub fn run(
        tail: &ModelPart<T>,
        partition: &StagePartition,
        micro: &MicroBatchSet,
        schedule: &PipelineSchedule,
        input: &Tensor<T>,
        mode: Mode,
    ) -> Result<Self> {
        check_shapes(partition, micro, schedule, input.rows())?;
        if partition.cuts.last() != Some(&tail.num_blocks()) {
            return Err(Error::Contract("partition does not cover the tail".into()));
        }
        let (p, q) = (partition.stages(), micro.len());
        let mut cells: Vec<Vec<Option<Cell<T>>>> = (0..p).map(|_| (0..q).map(|_| None).collect()).collect();
        for slot in schedule.slots.iter().filter(|s| s.direction == Direction::Forward) {
            let (s, m) = (slot.stage - 1, slot.micro_batch - 1);
            let x = if s == 0 {
                input.slice_rows(micro.ranges[m].clone())?
            } else {
                let prev = cells[s - 1][m].as_ref().expect("validated schedule");
                prev.graph.value(prev.fwd.output).clone()
            };
            let mut graph = Graph::new();
            let xv = graph.param(x);
            let fwd = tail.forward_blocks(&mut graph, xv, partition.stage(s), mode, true)?;
            cells[s][m] = Some(Cell { graph, input: xv, fwd });
        }
        let cells: Vec<Vec<Cell<T>>> = cells
            .into_iter()
            .map(|row| row.into_iter().map(|c| c.expect("validated schedule")).collect())
            .collect();
        let outs: Vec<&Tensor<T>> = cells[p - 1].iter().map(|c| c.graph.value(c.fwd.output)).collect();
        let output = Tensor::concat_rows(&outs)?;
        Ok(PipelineForward {
            partition: partition.clone(),
            micro: micro.clone(),
            schedule: schedule.clone(),
            cells,
            output,
        })
    }

    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    /// Batch-norm statistics, ordered by micro-batch then stage.
    pub fn stat_updates(&self) -> Vec<StatUpdate> {
        (0..self.micro.len())
            .flat_map(|m| self.cells.iter().flat_map(move |row| row[m].fwd.stats.iter().cloned()))
            .collect()
    }

    /// Backward phase seeded with the gradient of the loss with respect to
    /// the output rows. Micro-batch contributions are summed in ascending
    /// micro-batch order.
    pub fn backward(&self, tail: &ModelPart<T>, grad_output: &Tensor<T>) -> Result<PipelineGrads<T>> {
        if grad_output.shape() != self.output.shape() {
            return Err(Error::dim("pipeline output gradient", grad_output.shape(), self.output.shape()));
        }
        let (p, q) = (self.partition.stages(), self.micro.len());
        let mut input_grads: Vec<Vec<Option<Tensor<T>>>> = (0..p).map(|_| vec![None; q]).collect();
        let mut param_grads: Vec<Vec<Vec<Tensor<T>>>> = (0..p).map(|_| vec![Vec::new(); q]).collect();
        for slot in self.schedule.slots.iter().filter(|s| s.direction == Direction::Backward) {
            let (s, m) = (slot.stage - 1, slot.micro_batch - 1);
            let seed = if s == p - 1 {
                grad_output.slice_rows(self.micro.ranges[m].clone())?
            } else {
                input_grads[s + 1][m].take().expect("validated schedule")
            };
            let cell = &self.cells[s][m];
            let mut grads = cell.graph.backward_from(cell.fwd.output, seed)?;
            input_grads[s][m] = Some(grads.or_zeros(cell.input, cell.graph.value(cell.input)));
            param_grads[s][m] = tail.collect_grads(&mut grads, &cell.fwd);
        }

        let mut params = Vec::with_capacity(tail.num_tensors());
        for per_micro in &param_grads {
            for t in 0..per_micro[0].len() {
                let first = &per_micro[0][t];
                let mut acc = vec![0.0f64; first.numel()];
                for g in per_micro {
                    for (a, v) in acc.iter_mut().zip(g[t].data()) {
                        *a += v.wide();
                    }
                }
                params.push(Tensor::new(first.shape().to_vec(), acc.into_iter().map(T::cast).collect())?);
            }
        }
        let firsts: Vec<Tensor<T>> = input_grads[0].iter_mut().map(|g| g.take().expect("validated schedule")).collect();
        let input = Tensor::concat_rows(&firsts.iter().collect::<Vec<_>>())?;
        Ok(PipelineGrads { params, input })
    }
}

/// Both phases in one call: outputs and gradients for a given output
/// gradient.
pub fn execute_pipeline<T: Real>(
    tail: &ModelPart<T>,
    partition: &StagePartition,
    micro: &MicroBatchSet,
    schedule: &PipelineSchedule,
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, PipelineGrads<T>)> {
    let fwd = PipelineForward::run(tail, partition, micro, schedule, input, mode)?;
    let grads = fwd.backward(tail, grad_output)?;
    Ok((fwd.output, grads))
}
