use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundaryDims, CsiDims};
use crate::real::Real;
use crate::tensor::Tensor;

/// The four kinds of smashed data. Raw CSI has no kind and so can never
/// be sent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    /// Encoder output, UE to BTS.
    EncoderActivation,
    /// Decoder-tail output, BTS to UE.
    TailOutput,
    /// Loss gradient at the tail output, UE to BTS.
    HeadBoundaryGrad,
    /// Loss gradient at the encoder output, BTS to UE.
    EncoderBoundaryGrad,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Uplink,
    Downlink,
}

impl MessageKind {
    pub const ALL: [MessageKind; 4] = [
        MessageKind::EncoderActivation,
        MessageKind::TailOutput,
        MessageKind::HeadBoundaryGrad,
        MessageKind::EncoderBoundaryGrad,
    ];

    pub fn link(self) -> Link {
        match self {
            MessageKind::EncoderActivation | MessageKind::HeadBoundaryGrad => Link::Uplink,
            MessageKind::TailOutput | MessageKind::EncoderBoundaryGrad => Link::Downlink,
        }
    }

    /// Row width: `c1` at the encoder boundary, `c2` at the head boundary.
    pub fn width(self, boundary: BoundaryDims) -> usize {
        match self {
            MessageKind::EncoderActivation | MessageKind::EncoderBoundaryGrad => boundary.c1,
            MessageKind::TailOutput | MessageKind::HeadBoundaryGrad => boundary.c2,
        }
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MessageKind::EncoderActivation => "encoder_activation",
            MessageKind::TailOutput => "tail_output",
            MessageKind::HeadBoundaryGrad => "head_boundary_grad",
            MessageKind::EncoderBoundaryGrad => "encoder_boundary_grad",
        })
    }
}

/// A boundary activation or gradient batch for one UE.
#[derive(Clone, Debug, PartialEq)]
pub struct SmashedBatch<T = f32> {
    pub ue: usize,
    pub kind: MessageKind,
    /// `(B, c1)` or `(B, c2)`.
    pub payload: Tensor<T>,
}

impl<T: Real> SmashedBatch<T> {
    pub fn new(ue: usize, kind: MessageKind, payload: Tensor<T>) -> Result<Self> {
        if payload.shape().len() != 2 {
            return Err(Error::Protocol(format!(
                "{kind} payload for UE {ue} must be 2-D, got shape {:?}",
                payload.shape()
            )));
        }
        Ok(SmashedBatch { ue, kind, payload })
    }

    pub fn scalar_count(&self) -> usize {
        self.payload.numel()
    }
}

/// Exchanged scalar counts per UE and direction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub uplink: Vec<u64>,
    pub downlink: Vec<u64>,
    /// Cumulative total after each closed iteration.
    pub history: Vec<u64>,
}

impl CommLedger {
    pub fn new(ues: usize) -> Self {
        CommLedger {
            uplink: vec![0; ues],
            downlink: vec![0; ues],
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, ue: usize, link: Link, scalars: u64) {
        match link {
            Link::Uplink => self.uplink[ue] += scalars,
            Link::Downlink => self.downlink[ue] += scalars,
        }
    }

    pub fn close_iteration(&mut self) {
        self.history.push(self.total());
    }

    pub fn uplink_total(&self) -> u64 {
        self.uplink.iter().sum()
    }

    pub fn downlink_total(&self) -> u64 {
        self.downlink.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.uplink_total() + self.downlink_total()
    }
}

/// Metadata of one sent message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub iteration: usize,
    pub ue: usize,
    pub kind: MessageKind,
    pub shape: Vec<usize>,
}

/// The UE–BTS link: counts every message into the ledger and logs it.
#[derive(Clone, Debug)]
pub struct Channel<T = f32> {
    pub ledger: CommLedger,
    pub log: Vec<MessageRecord>,
    /// Copies of sent messages, kept only when enabled.
    pub payloads: Option<Vec<SmashedBatch<T>>>,
}

impl<T: Real> Channel<T> {
    pub fn new(ues: usize, keep_payloads: bool) -> Self {
        Channel {
            ledger: CommLedger::new(ues),
            log: Vec::new(),
            payloads: keep_payloads.then(Vec::new),
        }
    }

    pub fn send(&mut self, iteration: usize, msg: SmashedBatch<T>) -> SmashedBatch<T> {
        self.ledger.record(msg.ue, msg.kind.link(), msg.scalar_count() as u64);
        self.log.push(MessageRecord {
            iteration,
            ue: msg.ue,
            kind: msg.kind,
            shape: msg.payload.shape().to_vec(),
        });
        if let Some(p) = &mut self.payloads {
            p.push(msg.clone());
        }
        msg
    }
}

/// Summary of a privacy scan.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PrivacyReport {
    pub messages: usize,
    pub rows_compared: usize,
}

/// Checks every logged message: its kind is one of the four smashed-data
/// kinds and its shape is `(rows, width)` for that kind's boundary, never
/// the `(rows, 2, n_t, n_c)` shape of raw CSI. When payloads were kept,
/// also checks no payload row reproduces a raw sample bit for bit.
pub fn privacy_scan<T: Real>(
    channel: &Channel<T>,
    boundary: BoundaryDims,
    dims: CsiDims,
    raw: &[&Tensor<T>],
) -> Result<PrivacyReport> {
    for r in &channel.log {
        if !MessageKind::ALL.contains(&r.kind) {
            return Err(Error::Protocol(format!("unknown message kind in {r:?}")));
        }
        if r.shape.len() != 2 || r.shape[1] != r.kind.width(boundary) {
            return Err(Error::Protocol(format!(
                "message {r:?} does not have the {} boundary shape",
                r.kind
            )));
        }
    }
    let mut report = PrivacyReport {
        messages: channel.log.len(),
        rows_compared: 0,
    };
    let Some(payloads) = &channel.payloads else {
        return Ok(report);
    };
    let flat = dims.flat_len();
    let bits = |row: &[T]| row.iter().map(|v| v.wide().to_bits()).collect::<Vec<u64>>();
    let mut samples = HashSet::new();
    for t in raw {
        for row in t.data().chunks(flat) {
            samples.insert(bits(row));
        }
    }
    for msg in payloads {
        let w = msg.payload.row_len();
        if w != flat {
            continue;
        }
        for row in msg.payload.data().chunks(w) {
            report.rows_compared += 1;
            if samples.contains(&bits(row)) {
                return Err(Error::Protocol(format!(
                    "{} message to or from UE {} carries a raw CSI sample",
                    msg.kind, msg.ue
                )));
            }
        }
    }
    Ok(report)
}
