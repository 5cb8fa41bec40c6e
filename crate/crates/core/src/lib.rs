//! Fair-queueing schedulers and a cycle-level wormhole 1-D mesh simulator,
//! with fairness measurement under two accountings:
//!
//! * packet-size accounting (the Relative Fairness Bound, RFB), where a flow's
//!   service is the number of flits or bytes it sent;
//! * channel-occupation accounting (the Channel Fairness Bound, CFB), where a
//!   flow's service is the number of cycles it held the output channel,
//!   sending time plus blocking time.
//!
//! Modules:
//!
//! * [`model`] and [`trace`]: packets, flows, the clock and service records.
//! * [`sched`]: RR, DRR, ERR, EBRR and congestion-aware RR behind one
//!   [`sched::Scheduler`] trait, plus a single output-link driver.
//! * [`fairness`]: backlog intervals, FM over windows, RFB/CFB estimates.
//! * [`arbitration`]: round-robin, age-based and probabilistic
//!   distance-based output arbiters.
//! * [`mesh`]: the k-ary 1-mesh simulator.
//! * [`analysis`]: acceptance-ratio recursion and the S-ratio feasibility
//!   check for hotspot traffic.

pub mod analysis;
pub mod arbitration;
pub mod fairness;
pub mod mesh;
pub mod model;
pub mod rng;
pub mod sched;
pub mod trace;

pub use model::{Accounting, Clock, Cycle, FlowId, Packet};
pub use trace::{ServiceRecord, Trace};
