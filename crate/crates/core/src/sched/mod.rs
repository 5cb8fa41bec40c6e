//! Output-link queueing disciplines.
//!
//! Every discipline implements [`Scheduler`]: packets are enqueued per flow,
//! [`Scheduler::select`] picks the next packet for the link, and once the
//! tail has left the link the caller reports back with
//! [`Scheduler::complete`]. Decisions that depend on how much a flow was
//! charged (deficit, surplus, credit) are taken at completion, so
//! disciplines that do not look at packet sizes (ERR, EBRR) never need them
//! ahead of time. The charge is either the sent size or the channel
//! occupation time, per [`Accounting`].

mod drr;
mod ebrr;
mod err;
pub mod link;
mod rr;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Accounting, FlowId, Packet};

pub use drr::Drr;
pub use ebrr::Ebrr;
pub use err::{Demotion, Err as ElasticRoundRobin};
pub use rr::RoundRobin;

#[derive(Debug, Error, PartialEq)]
pub enum SchedError {
    #[error("quantum must be positive")]
    ZeroQuantum,
    #[error("flow weight must be positive, got {0}")]
    InvalidWeight(f64),
    #[error("congestion threshold must be at least 1, got {0}")]
    InvalidThreshold(f64),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchedulerKind {
    Rr,
    Drr,
    Err,
    Ebrr,
    /// Congestion-aware round robin: ERR plus temporary demotion of flows
    /// whose service time exceeds their sending time by a threshold.
    Carr,
}

impl std::fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SchedulerKind::Rr => "RR",
            SchedulerKind::Drr => "DRR",
            SchedulerKind::Err => "ERR",
            SchedulerKind::Ebrr => "EBRR",
            SchedulerKind::Carr => "CARR",
        };
        f.write_str(s)
    }
}

fn default_quantum() -> u64 {
    8
}

fn default_tau() -> f64 {
    2.0
}

fn default_demotion_rounds() -> u64 {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerParams {
    pub kind: SchedulerKind,
    #[serde(default)]
    pub accounting: Accounting,
    /// Base quantum Q for DRR and EBRR; flow i gets `round(Q * f_i)`.
    #[serde(default = "default_quantum")]
    pub quantum: u64,
    /// Shares f_i, indexed by flow. Missing entries are 1.
    #[serde(default)]
    pub weights: Vec<f64>,
    /// CARR congestion threshold on occupation / sending.
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// CARR demotion length in rounds.
    #[serde(default = "default_demotion_rounds")]
    pub demotion_rounds: u64,
    /// CARR: hand skipped allowance back once a flow is restored.
    #[serde(default)]
    pub compensate: bool,
    /// Per-flow tail-drop capacity in packets; unbounded when absent.
    #[serde(default)]
    pub queue_capacity: Option<usize>,
}

impl SchedulerParams {
    pub fn new(kind: SchedulerKind) -> Self {
        Self {
            kind,
            accounting: Accounting::PacketSize,
            quantum: default_quantum(),
            weights: Vec::new(),
            tau: default_tau(),
            demotion_rounds: default_demotion_rounds(),
            compensate: false,
            queue_capacity: None,
        }
    }

    pub fn with_accounting(mut self, accounting: Accounting) -> Self {
        self.accounting = accounting;
        self
    }

    pub fn with_quantum(mut self, quantum: u64) -> Self {
        self.quantum = quantum;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = weights;
        self
    }

    pub fn with_queue_capacity(mut self, cap: usize) -> Self {
        self.queue_capacity = Some(cap);
        self
    }

    pub fn weight(&self, flow: FlowId) -> f64 {
        self.weights.get(flow.index()).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), SchedError> {
        if matches!(self.kind, SchedulerKind::Drr | SchedulerKind::Ebrr) && self.quantum == 0 {
            return Err(SchedError::ZeroQuantum);
        }
        if let Some(&w) = self.weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(SchedError::InvalidWeight(w));
        }
        if self.kind == SchedulerKind::Carr && (self.tau.is_nan() || self.tau < 1.0) {
            return Err(SchedError::InvalidThreshold(self.tau));
        }
        Ok(())
    }

    /// Per-flow quantum `round(Q * f_i)`, at least 1.
    pub(crate) fn flow_quantum(&self, flow: FlowId) -> u64 {
        ((self.quantum as f64 * self.weight(flow)).round() as u64).max(1)
    }

    pub fn build(&self) -> Result<Box<dyn Scheduler>, SchedError> {
        self.validate()?;
        Ok(match self.kind {
            SchedulerKind::Rr => Box::new(RoundRobin::new(self)),
            SchedulerKind::Drr => Box::new(Drr::new(self)?),
            SchedulerKind::Err => Box::new(ElasticRoundRobin::new(self, None)),
            SchedulerKind::Ebrr => Box::new(Ebrr::new(self)?),
            SchedulerKind::Carr => Box::new(ElasticRoundRobin::new(
                self,
                Some(Demotion {
                    tau: self.tau,
                    rounds: self.demotion_rounds,
                    compensate: self.compensate,
                }),
            )),
        })
    }
}

/// A packet handed to the link, with the round it was scheduled in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Selection {
    pub packet: Packet,
    pub round: u64,
}

/// What the link observed while transmitting one packet.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub flow: FlowId,
    /// Units moved (the packet size).
    pub sent: u64,
    /// Cycles the channel was held, sending plus blocking.
    pub occupation: u64,
}

impl Outcome {
    pub fn units(&self, accounting: Accounting) -> u64 {
        match accounting {
            Accounting::PacketSize => self.sent,
            Accounting::ChannelOccupation => self.occupation,
        }
    }
}

/// Summary of one scheduler visit to one flow, for auditing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Visit {
    pub flow: FlowId,
    pub round: u64,
    pub packets: u32,
    pub units: u64,
    /// ERR/CARR allowance for this visit.
    pub allowance: Option<f64>,
    /// ERR/CARR surplus computed at the end of the visit (before any reset).
    pub surplus: Option<f64>,
    /// ERR/CARR MaxSC of the previous round, as used for this allowance.
    pub max_sc_prev: Option<f64>,
    /// DRR deficit after the visit.
    pub deficit_after: Option<i64>,
    /// CARR: visit skipped because the flow was demoted.
    pub skipped: bool,
}

impl Visit {
    fn new(flow: FlowId, round: u64) -> Self {
        Self {
            flow,
            round,
            packets: 0,
            units: 0,
            allowance: None,
            surplus: None,
            max_sc_prev: None,
            deficit_after: None,
            skipped: false,
        }
    }
}

/// Per-flow state exposed for inspection; fields a discipline does not keep
/// are `None`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FlowSnapshot {
    pub queued: usize,
    pub active: bool,
    pub deficit: Option<i64>,
    pub surplus: Option<f64>,
    pub allowance: Option<f64>,
    pub credit: Option<i64>,
    pub eligible_round: Option<u64>,
    pub congested: bool,
}

pub trait Scheduler: Send {
    fn kind(&self) -> SchedulerKind;

    fn accounting(&self) -> Accounting;

    /// Queue a packet; a full queue hands it back (tail drop).
    fn enqueue(&mut self, packet: Packet) -> Result<(), Packet>;

    /// Next packet to put on the link. Must not be called while a previous
    /// selection is still outstanding. `None` only when no flow is backlogged.
    fn select(&mut self) -> Option<Selection>;

    /// Report the transmission of the outstanding selection.
    fn complete(&mut self, outcome: Outcome);

    /// Packets waiting for `flow`, excluding one currently on the link.
    fn queue_len(&self, flow: FlowId) -> usize;

    /// Total waiting packets over all flows.
    fn backlog(&self) -> usize;

    fn round(&self) -> u64;

    fn drops(&self) -> u64;

    fn flow_state(&self, flow: FlowId) -> FlowSnapshot;

    /// Drain the visit log. Logging is off until [`Scheduler::log_visits`].
    fn take_visits(&mut self) -> Vec<Visit>;

    fn log_visits(&mut self, on: bool);
}

/// Per-flow FIFOs with optional tail drop.
#[derive(Debug, Default)]
pub(crate) struct FlowQueues {
    queues: Vec<VecDeque<Packet>>,
    capacity: Option<usize>,
    drops: u64,
    total: usize,
}

impl FlowQueues {
    pub(crate) fn new(capacity: Option<usize>) -> Self {
        Self {
            capacity,
            ..Self::default()
        }
    }

    fn ensure(&mut self, flow: FlowId) {
        if self.queues.len() <= flow.index() {
            self.queues.resize_with(flow.index() + 1, VecDeque::new);
        }
    }

    /// Push; returns whether the queue was empty before.
    pub(crate) fn push(&mut self, packet: Packet) -> Result<bool, Packet> {
        self.ensure(packet.flow);
        let q = &mut self.queues[packet.flow.index()];
        if self.capacity.is_some_and(|cap| q.len() >= cap) {
            self.drops += 1;
            return Err(packet);
        }
        let was_empty = q.is_empty();
        q.push_back(packet);
        self.total += 1;
        Ok(was_empty)
    }

    pub(crate) fn pop(&mut self, flow: FlowId) -> Option<Packet> {
        let p = self.queues.get_mut(flow.index())?.pop_front();
        if p.is_some() {
            self.total -= 1;
        }
        p
    }

    pub(crate) fn front(&self, flow: FlowId) -> Option<&Packet> {
        self.queues.get(flow.index())?.front()
    }

    pub(crate) fn len(&self, flow: FlowId) -> usize {
        self.queues.get(flow.index()).map_or(0, VecDeque::len)
    }

    pub(crate) fn is_empty(&self, flow: FlowId) -> bool {
        self.len(flow) == 0
    }

    pub(crate) fn total(&self) -> usize {
        self.total
    }

    pub(crate) fn drops(&self) -> u64 {
        self.drops
    }
}

/// Active list with round boundaries: a round visits exactly the flows that
/// were in the list when it began; flows activated mid-round are appended
/// and first visited in the next round.
#[derive(Debug, Default)]
pub(crate) struct Rounds {
    pub(crate) active: VecDeque<FlowId>,
    /// RoundRobinVisitCount: visits left in the current round.
    pub(crate) visits_left: usize,
    pub(crate) round: u64,
}

impl Rounds {
    /// Pop the next flow to visit; the flag is set when a new round began.
    pub(crate) fn begin_visit(&mut self) -> Option<(FlowId, bool)> {
        if self.active.is_empty() {
            return None;
        }
        let mut new_round = false;
        if self.visits_left == 0 {
            self.round += 1;
            self.visits_left = self.active.len();
            new_round = true;
        }
        self.active.pop_front().map(|f| (f, new_round))
    }

    pub(crate) fn end_visit(&mut self, flow: FlowId, keep: bool) {
        self.visits_left = self.visits_left.saturating_sub(1);
        if keep {
            self.active.push_back(flow);
        }
    }
}

/// Grow-on-demand per-flow state table.
pub(crate) fn slot<T: Default>(v: &mut Vec<T>, flow: FlowId) -> &mut T {
    if v.len() <= flow.index() {
        v.resize_with(flow.index() + 1, T::default);
    }
    &mut v[flow.index()]
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn pkt(id: u64, flow: u32, size: u32) -> Packet {
        Packet::new(id, FlowId(flow), size, flow, 0, 0).unwrap()
    }

    /// Serve everything queued with a blocking-free link, returning
    /// `(flow, size)` in transmission order.
    pub fn drain(s: &mut dyn Scheduler) -> Vec<(u32, u32)> {
        let mut out = Vec::new();
        while let Some(sel) = s.select() {
            let size = sel.packet.size as u64;
            out.push((sel.packet.flow.0, sel.packet.size));
            s.complete(Outcome {
                flow: sel.packet.flow,
                sent: size,
                occupation: size,
            });
        }
        out
    }
}
