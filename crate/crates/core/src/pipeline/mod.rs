//! Fill-drain pipeline parallelism for the decoder tail.
//!
//! The tail is cut into `P` contiguous stages and the accumulated batch
//! into `Q` micro-batches. All forwards run first, wave by wave, then all
//! backwards in mirrored order. Execution is functional: every
//! (stage, micro-batch) cell gets its own graph, and the results depend
//! only on the schedule's data dependencies, never on timing.

mod exec;
mod sim;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BlockKind, ModelPart};
use crate::real::Real;

pub use exec::{execute_pipeline, PipelineForward, PipelineGrads};
pub use sim::{bench_row, simulate_makespan, BenchRow, StageCostModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stages: usize,
    pub micro_batches: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: 2,
            micro_batches: 2,
        }
    }
}

impl PipelineConfig {
    /// One stage, one micro-batch: plain monolithic execution.
    pub fn off() -> Self {
        PipelineConfig {
            stages: 1,
            micro_batches: 1,
        }
    }
}

/// Contiguous block ranges of the tail, one per stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePartition {
    /// `P + 1` increasing block indices from 0 to the tail's block count.
    pub cuts: Vec<usize>,
}

impl StagePartition {
    pub fn stages(&self) -> usize {
        self.cuts.len() - 1
    }

    pub fn stage(&self, p: usize) -> Range<usize> {
        self.cuts[p]..self.cuts[p + 1]
    }
}

/// Cuts the tail into `p` stages. Two stages split between the two
/// CRBlocks; any other count balances parameter counts greedily.
pub fn partition_tail<T: Real>(tail: &ModelPart<T>, p: usize) -> Result<StagePartition> {
    let n = tail.num_blocks();
    if p == 0 || p > n {
        return Err(Error::config(
            "pipeline.stages",
            format!("must lie in 1..={n} (decoder-tail blocks), got {p}"),
        ));
    }
    if p == 2 {
        let crblocks: Vec<usize> = (0..n)
            .filter(|&i| matches!(tail.blocks[i].kind, BlockKind::CrBlock { .. }))
            .collect();
        if let [first, second, ..] = crblocks[..] {
            if second == first + 1 {
                return Ok(StagePartition { cuts: vec![0, second, n] });
            }
        }
    }
    let sizes: Vec<usize> = tail.blocks.iter().map(|b| b.param_count()).collect();
    let total: usize = sizes.iter().sum();
    let mut cuts = vec![0];
    let mut acc = 0;
    let mut i = 0;
    for s in 0..p - 1 {
        let target = total as f64 * (s + 1) as f64 / p as f64;
        // take at least one block, leave at least one per remaining stage
        acc += sizes[i];
        i += 1;
        while i < n - (p - 1 - s) && (acc + sizes[i]) as f64 <= target {
            acc += sizes[i];
            i += 1;
        }
        cuts.push(i);
    }
    cuts.push(n);
    Ok(StagePartition { cuts })
}

/// Contiguous row ranges covering the accumulated batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicroBatchSet {
    pub ranges: Vec<Range<usize>>,
}

impl MicroBatchSet {
    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }
}

/// Near-equal split; the first `rows % q` ranges get the extra row.
pub fn split_microbatches(rows: usize, q: usize) -> Result<MicroBatchSet> {
    if q == 0 || q > rows {
        return Err(Error::config(
            "pipeline.micro_batches",
            format!("must lie in 1..={rows} (accumulated rows), got {q}"),
        ));
    }
    let (base, extra) = (rows / q, rows % q);
    let mut start = 0;
    let ranges = (0..q)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    Ok(MicroBatchSet { ranges })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        })
    }
}

/// One unit of work: a stage processing a micro-batch in one direction.
/// Time, stage and micro-batch are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub time: usize,
    pub stage: usize,
    pub micro_batch: usize,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PipelineSchedule {
    pub stages: usize,
    pub micro_batches: usize,
    /// Sorted by time, then stage.
    pub slots: Vec<Slot>,
}

/// Fill-drain schedule. Forward of micro-batch `q` on stage `p` runs at
/// `p + q − 1`; the backward phase mirrors it, starting with the last
/// micro-batch on the last stage.
pub fn make_schedule(p: usize, q: usize) -> PipelineSchedule {
    let fill = p + q - 1;
    let mut slots = Vec::with_capacity(2 * p * q);
    for stage in 1..=p {
        for mb in 1..=q {
            slots.push(Slot {
                time: stage + mb - 1,
                stage,
                micro_batch: mb,
                direction: Direction::Forward,
            });
            slots.push(Slot {
                time: fill + (p - stage) + (q - mb) + 1,
                stage,
                micro_batch: mb,
                direction: Direction::Backward,
            });
        }
    }
    slots.sort_by_key(|s| (s.time, s.stage));
    PipelineSchedule {
        stages: p,
        micro_batches: q,
        slots,
    }
}

impl PipelineSchedule {
    /// Last time index of the forward phase.
    pub fn forward_span(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.direction == Direction::Forward)
            .map(|s| s.time)
            .max()
            .unwrap_or(0)
    }

    pub fn span(&self) -> usize {
        self.slots.last().map_or(0, |s| s.time)
    }

    /// Checks completeness, single occupancy per stage and time, the
    /// forward and backward dependency chains, and the fill-drain barrier.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.stages, self.micro_batches);
        let idx = |stage: usize, mb: usize| (stage - 1) * q + (mb - 1);
        let mut fwd = vec![None; p * q];
        let mut bwd = vec![None; p * q];
        let mut busy = std::collections::HashSet::new();
        for s in &self.slots {
            if s.stage == 0 || s.stage > p || s.micro_batch == 0 || s.micro_batch > q || s.time == 0 {
                return Err(Error::Contract(format!("slot {s:?} outside a {p}x{q} schedule")));
            }
            if !busy.insert((s.time, s.stage)) {
                return Err(Error::Contract(format!(
                    "stage {} double-booked at time {}",
                    s.stage, s.time
                )));
            }
            let table = match s.direction {
                Direction::Forward => &mut fwd,
                Direction::Backward => &mut bwd,
            };
            if table[idx(s.stage, s.micro_batch)].replace(s.time).is_some() {
                return Err(Error::Contract(format!("slot {s:?} scheduled twice")));
            }
        }
        let missing = || Error::Contract(format!("schedule does not cover all {p}x{q} forward and backward slots"));
        let fwd: Vec<usize> = fwd.into_iter().collect::<Option<_>>().ok_or_else(missing)?;
        let bwd: Vec<usize> = bwd.into_iter().collect::<Option<_>>().ok_or_else(missing)?;
        for stage in 1..=p {
            for mb in 1..=q {
                let (f, b) = (fwd[idx(stage, mb)], bwd[idx(stage, mb)]);
                if stage > 1 && fwd[idx(stage - 1, mb)] >= f {
                    return Err(Error::Contract(format!(
                        "forward of micro-batch {mb} on stage {stage} does not follow stage {}",
                        stage - 1
                    )));
                }
                if stage < p && bwd[idx(stage + 1, mb)] >= b {
                    return Err(Error::Contract(format!(
                        "backward of micro-batch {mb} on stage {stage} does not follow stage {}",
                        stage + 1
                    )));
                }
                if f >= b {
                    return Err(Error::Contract(format!(
                        "backward of micro-batch {mb} on stage {stage} precedes its forward"
                    )));
                }
            }
        }
        let last_forward = (1..=q).map(|mb| fwd[idx(p, mb)]).max().unwrap_or(0);
        let first_backward = bwd.iter().copied().min().unwrap_or(usize::MAX);
        if last_forward >= first_backward {
            return Err(Error::Contract(
                "a backward starts before the last stage finishes all forwards".into(),
            ));
        }
        Ok(())
    }

    /// Gantt-style trace: `time,stage,micro_batch,direction`.
    pub fn write_trace<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for s in &self.slots {
            w.serialize(s)?;
        }
        w.flush()?;
        Ok(())
    }
}
