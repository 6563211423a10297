use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Direction, PipelineSchedule};

/// Virtual-time costs: per-stage forward and backward time for one
/// micro-batch, plus the latency of handing a tensor to the next stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageCostModel {
    pub forward: Vec<f64>,
    pub backward: Vec<f64>,
    pub transfer: f64,
}

impl StageCostModel {
    pub fn uniform(stages: usize, tf: f64, tb: f64, transfer: f64) -> Self {
        StageCostModel {
            forward: vec![tf; stages],
            backward: vec![tb; stages],
            transfer,
        }
    }

    /// Stage `p` costs `weights[p] · rows · per_row` forward and
    /// `backward_ratio` times that backward.
    pub fn from_rows(weights: &[f64], rows: f64, per_row: f64, backward_ratio: f64, transfer: f64) -> Self {
        let forward: Vec<f64> = weights.iter().map(|w| w * rows * per_row).collect();
        StageCostModel {
            backward: forward.iter().map(|f| f * backward_ratio).collect(),
            forward,
            transfer,
        }
    }

    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.forward.len() != stages || self.backward.len() != stages {
            return Err(Error::config(
                "pipeline.cost",
                format!(
                    "{} forward and {} backward costs for {stages} stages",
                    self.forward.len(),
                    self.backward.len()
                ),
            ));
        }
        let all = self.forward.iter().chain(&self.backward).chain(std::iter::once(&self.transfer));
        if let Some(bad) = all.copied().find(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::config("pipeline.cost", format!("costs must be finite and nonnegative, got {bad}")));
        }
        Ok(())
    }

    fn cost(&self, stage: usize, d: Direction) -> f64 {
        match d {
            Direction::Forward => self.forward[stage - 1],
            Direction::Backward => self.backward[stage - 1],
        }
    }

    /// Total busy time of all slots, i.e. the same work run serially on
    /// one device with no transfers.
    pub fn serial(&self, micro_batches: usize) -> f64 {
        micro_batches as f64 * self.forward.iter().chain(&self.backward).sum::<f64>()
    }
}

/// Makespan of `schedule` under `cost`. Slots start as soon as their
/// stage is free and their input has arrived; each stage runs its slots
/// in schedule order.
pub fn simulate_makespan(schedule: &PipelineSchedule, cost: &StageCostModel) -> Result<f64> {
    schedule.validate()?;
    cost.validate(schedule.stages)?;
    let (p, q) = (schedule.stages, schedule.micro_batches);
    let idx = |stage: usize, mb: usize| (stage - 1) * q + (mb - 1);
    let mut fwd_done = vec![0.0f64; p * q];
    let mut bwd_done = vec![0.0f64; p * q];
    let mut stage_free = vec![0.0f64; p];
    for s in &schedule.slots {
        let ready = match s.direction {
            Direction::Forward if s.stage > 1 => fwd_done[idx(s.stage - 1, s.micro_batch)] + cost.transfer,
            Direction::Forward => 0.0,
            Direction::Backward if s.stage < p => bwd_done[idx(s.stage + 1, s.micro_batch)] + cost.transfer,
            Direction::Backward => fwd_done[idx(s.stage, s.micro_batch)],
        };
        let start = ready.max(stage_free[s.stage - 1]);
        let end = start + cost.cost(s.stage, s.direction);
        stage_free[s.stage - 1] = end;
        match s.direction {
            Direction::Forward => fwd_done[idx(s.stage, s.micro_batch)] = end,
            Direction::Backward => bwd_done[idx(s.stage, s.micro_batch)] = end,
        }
    }
    Ok(stage_free.into_iter().fold(0.0, f64::max))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub stages: usize,
    pub micro_batches: usize,
    pub makespan: f64,
    pub serial: f64,
    pub speedup: f64,
    /// Idle fraction of the `stages × makespan` device time.
    pub bubble: f64,
}

pub fn bench_row(schedule: &PipelineSchedule, cost: &StageCostModel) -> Result<BenchRow> {
    let makespan = simulate_makespan(schedule, cost)?;
    let serial = cost.serial(schedule.micro_batches);
    let device_time = schedule.stages as f64 * makespan;
    Ok(BenchRow {
        stages: schedule.stages,
        micro_batches: schedule.micro_batches,
        makespan,
        serial,
        speedup: if makespan > 0.0 { serial / makespan } else { 1.0 },
        bubble: if device_time > 0.0 { 1.0 - serial / device_time } else { 0.0 },
    })
}
