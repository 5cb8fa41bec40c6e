//! Domain types shared by every module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time in cycles.
pub type Cycle = u64;

#[derive(
    Copy, Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct FlowId(pub u32);

impl FlowId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for FlowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a scheduler charges a flow for one transmission.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    /// Units sent (flits or bytes); fairness under this accounting is RFB.
    #[default]
    PacketSize,
    /// Cycles the channel was held, sending plus blocking; this is CFB.
    ChannelOccupation,
}

/// Label for what one `sent_units` unit means. Both run through the same code.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Flits,
    Bytes,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("packet size must be at least 1, got {0}")]
    EmptyPacket(u32),
    #[error("deliver time {deliver} precedes inject time {inject}")]
    DeliverBeforeInject { inject: Cycle, deliver: Cycle },
    #[error("clock cannot move backwards from {now} to {to}")]
    ClockRewind { now: Cycle, to: Cycle },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Packet {
    pub id: u64,
    pub flow: FlowId,
    /// Length in flits (or bytes in byte mode).
    pub size: u32,
    pub source: u32,
    pub dest: u32,
    pub inject_time: Cycle,
    pub deliver_time: Option<Cycle>,
}

impl Packet {
    pub fn new(
        id: u64,
        flow: FlowId,
        size: u32,
        source: u32,
        dest: u32,
        inject_time: Cycle,
    ) -> Result<Self, ModelError> {
        if size == 0 {
            return Err(ModelError::EmptyPacket(size));
        }
        Ok(Self {
            id,
            flow,
            size,
            source,
            dest,
            inject_time,
            deliver_time: None,
        })
    }

    pub fn deliver(&mut self, at: Cycle) -> Result<(), ModelError> {
        if at < self.inject_time {
            return Err(ModelError::DeliverBeforeInject {
                inject: self.inject_time,
                deliver: at,
            });
        }
        self.deliver_time = Some(at);
        Ok(())
    }

    pub fn latency(&self) -> Option<Cycle> {
        self.deliver_time.map(|d| d - self.inject_time)
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clock {
    now: Cycle,
}

impl Clock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Cycle {
        self.now
    }

    pub fn tick(&mut self) -> Cycle {
        self.now += 1;
        self.now
    }

    pub fn advance_to(&mut self, to: Cycle) -> Result<(), ModelError> {
        if to < self.now {
            return Err(ModelError::ClockRewind { now: self.now, to });
        }
        self.now = to;
        Ok(())
    }
}
