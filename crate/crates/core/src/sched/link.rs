//! A single output link fed by per-flow queues, driven cycle by cycle.
//!
//! The link moves one unit per cycle from the selected packet. Each flow has
//! its own downstream: either always ready, or a small buffer that only
//! drains during the first `open` cycles of every `period` (credits withheld
//! the rest of the time). A packet that cannot push into a full downstream
//! keeps the channel and accrues blocking cycles.

use serde::{Deserialize, Serialize};

use super::{Outcome, SchedError, Scheduler, SchedulerParams, Visit};
use crate::model::{Cycle, FlowId, Packet, Units};
use crate::rng::{derive_seed, SimRng};
use crate::trace::{PacketEvent, PacketEventKind, ServiceRecord, Trace};

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SizeDist {
    Fixed { size: u32 },
    Uniform { lo: u32, hi: u32 },
}

impl SizeDist {
    fn sample(&self, rng: &mut SimRng) -> u32 {
        match *self {
            SizeDist::Fixed { size } => size,
            SizeDist::Uniform { lo, hi } => rng.range_inclusive(lo as u64, hi as u64) as u32,
        }
    }

    pub fn max(&self) -> u32 {
        match *self {
            SizeDist::Fixed { size } => size,
            SizeDist::Uniform { hi, .. } => hi,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Downstream {
    #[default]
    Free,
    /// A `depth`-unit buffer that drains one unit per cycle during the first
    /// `open` cycles of every `period`.
    Throttled { depth: u32, open: u32, period: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    /// Bernoulli arrival probability per cycle.
    #[serde(default)]
    pub rate: f64,
    /// Packets present at cycle 0.
    #[serde(default)]
    pub preload: u32,
    pub size: SizeDist,
    #[serde(default)]
    pub downstream: Downstream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    pub flows: Vec<FlowSpec>,
    /// Arrivals stop at the horizon; the run also stops there unless
    /// `drain` is set, in which case queued packets are served to the end.
    pub horizon: Cycle,
    #[serde(default)]
    pub drain: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub units: Units,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), SchedError> {
        if self.flows.is_empty() {
            return Err(SchedError::Config("at least one flow is required".into()));
        }
        for (i, f) in self.flows.iter().enumerate() {
            if !(0.0..=1.0).contains(&f.rate) {
                return Err(SchedError::Config(format!(
                    "flow {i}: rate must be in [0, 1]"
                )));
            }
            match f.size {
                SizeDist::Fixed { size: 0 } => {
                    return Err(SchedError::Config(format!(
                        "flow {i}: packet size must be >= 1"
                    )))
                }
                SizeDist::Uniform { lo, hi } if lo == 0 || lo > hi => {
                    return Err(SchedError::Config(format!("flow {i}: bad size range")))
                }
                _ => {}
            }
            if let Downstream::Throttled {
                depth,
                open,
                period,
            } = f.downstream
            {
                if depth == 0 || open == 0 || period == 0 || open > period {
                    return Err(SchedError::Config(format!(
                        "flow {i}: throttled downstream needs depth >= 1 and 0 < open <= period"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn max_packet_size(&self) -> u32 {
        self.flows.iter().map(|f| f.size.max()).max().unwrap_or(0)
    }
}

/// Generate the arrival sequence for `cfg`, ordered by time then flow.
/// Every flow draws from its own stream, so the sequence does not depend
/// on which scheduler later consumes it.
pub fn generate_arrivals(cfg: &LinkConfig) -> Vec<Packet> {
    let mut rngs: Vec<SimRng> = (0..cfg.flows.len())
        .map(|i| SimRng::new(derive_seed(cfg.seed, i as u64)))
        .collect();
    let mut out = Vec::new();
    let mut id = 0u64;
    let mut push = |flow: usize, size: u32, t: Cycle, out: &mut Vec<Packet>| {
        let p = Packet::new(id, FlowId(flow as u32), size, flow as u32, 0, t)
            .expect("sizes are validated");
        id += 1;
        out.push(p);
    };
    for (i, f) in cfg.flows.iter().enumerate() {
        for _ in 0..f.preload {
            let size = f.size.sample(&mut rngs[i]);
            push(i, size, 0, &mut out);
        }
    }
    for t in 0..cfg.horizon {
        for (i, f) in cfg.flows.iter().enumerate() {
            if f.rate > 0.0 && rngs[i].bernoulli(f.rate) {
                let size = f.size.sample(&mut rngs[i]);
                push(i, size, t, &mut out);
            }
        }
    }
    out
}

/// Queue length of one flow (waiting plus in service) from `cycle` on.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyEvent {
    pub cycle: Cycle,
    pub flow: FlowId,
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowStats {
    pub flow: FlowId,
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub sent_units: u64,
    pub occupation: u64,
    pub blocking: u64,
    /// Units delivered per cycle over the run.
    pub throughput: f64,
    pub mean_latency: f64,
    pub max_latency: Cycle,
}

#[derive(Debug)]
pub struct LinkRun {
    pub trace: Trace,
    pub occupancy: Vec<OccupancyEvent>,
    pub delivered: Vec<Packet>,
    pub flows: Vec<FlowStats>,
    pub visits: Vec<Visit>,
    /// Cycle at which the run stopped.
    pub end: Cycle,
    /// Cycles with a packet queued but nothing on the link.
    pub idle_with_backlog: u64,
}

struct InService {
    packet: Packet,
    round: u64,
    start: Cycle,
    sent: u32,
}

pub fn run_link(cfg: &LinkConfig, params: &SchedulerParams) -> Result<LinkRun, SchedError> {
    let arrivals = generate_arrivals(cfg);
    run_link_with_arrivals(cfg, params, &arrivals, false)
}

/// Drive `params`' scheduler over a fixed arrival sequence. With
/// `log_visits`, the scheduler's visit log is returned in the run.
pub fn run_link_with_arrivals(
    cfg: &LinkConfig,
    params: &SchedulerParams,
    arrivals: &[Packet],
    log_visits: bool,
) -> Result<LinkRun, SchedError> {
    cfg.validate()?;
    let mut sched = params.build()?;
    sched.log_visits(log_visits);
    Ok(drive(cfg, sched.as_mut(), arrivals))
}

fn drive(cfg: &LinkConfig, sched: &mut dyn Scheduler, arrivals: &[Packet]) -> LinkRun {
    let n = cfg.flows.len();
    let mut trace = Trace::new();
    let mut occupancy = Vec::new();
    let mut delivered = Vec::new();
    let mut visits = Vec::new();
    let mut stats: Vec<FlowStats> = (0..n)
        .map(|i| FlowStats {
            flow: FlowId(i as u32),
            ..FlowStats::default()
        })
        .collect();
    let mut qlen = vec![0usize; n];
    let mut downstream = vec![0u32; n];
    let mut in_service: Option<InService> = None;
    let mut next_arrival = 0;
    let mut idle_with_backlog = 0;
    let mut t: Cycle = 0;

    loop {
        let arrivals_left = next_arrival < arrivals.len();
        let busy = in_service.is_some() || sched.backlog() > 0;
        if t >= cfg.horizon && !(cfg.drain && (busy || arrivals_left)) {
            break;
        }

        while next_arrival < arrivals.len() && arrivals[next_arrival].inject_time <= t {
            let p = arrivals[next_arrival].clone();
            next_arrival += 1;
            let f = p.flow.index();
            stats[f].injected += 1;
            trace.record_event(PacketEvent {
                packet: p.id,
                flow: p.flow,
                cycle: t,
                kind: PacketEventKind::Inject,
            });
            match sched.enqueue(p) {
                Ok(()) => {
                    qlen[f] += 1;
                    occupancy.push(OccupancyEvent {
                        cycle: t,
                        flow: FlowId(f as u32),
                        len: qlen[f],
                    });
                }
                Err(_) => stats[f].dropped += 1,
            }
        }

        for (i, spec) in cfg.flows.iter().enumerate() {
            if let Downstream::Throttled { open, period, .. } = spec.downstream {
                if t % u64::from(period) < u64::from(open) && downstream[i] > 0 {
                    downstream[i] -= 1;
                }
            }
        }

        if in_service.is_none() {
            if let Some(sel) = sched.select() {
                in_service = Some(InService {
                    packet: sel.packet,
                    round: sel.round,
                    start: t,
                    sent: 0,
                });
            } else if sched.backlog() > 0 {
                idle_with_backlog += 1;
            }
        }

        if let Some(cur) = in_service.as_mut() {
            let f = cur.packet.flow.index();
            let ready = match cfg.flows[f].downstream {
                Downstream::Free => true,
                Downstream::Throttled { depth, .. } => downstream[f] < depth,
            };
            if ready {
                cur.sent += 1;
                if matches!(cfg.flows[f].downstream, Downstream::Throttled { .. }) {
                    downstream[f] += 1;
                }
            }
            if cur.sent == cur.packet.size {
                let cur = in_service.take().expect("in service");
                let end = t + 1;
                let size = cur.packet.size as u64;
                let occupation = end - cur.start;
                let rec = ServiceRecord::new(
                    cur.packet.flow,
                    cur.round,
                    cur.start,
                    end,
                    size,
                    occupation - size,
                )
                .expect("well-formed record");
                trace
                    .record_service(rec)
                    .expect("link records never overlap");
                sched.complete(Outcome {
                    flow: cur.packet.flow,
                    sent: size,
                    occupation,
                });
                let mut packet = cur.packet;
                packet.deliver(end).expect("end after injection");
                trace.record_event(PacketEvent {
                    packet: packet.id,
                    flow: packet.flow,
                    cycle: end,
                    kind: PacketEventKind::Deliver,
                });
                let s = &mut stats[f];
                s.delivered += 1;
                s.sent_units += size;
                s.occupation += occupation;
                s.blocking += occupation - size;
                qlen[f] -= 1;
                occupancy.push(OccupancyEvent {
                    cycle: end,
                    flow: packet.flow,
                    len: qlen[f],
                });
                delivered.push(packet);
                visits.extend(sched.take_visits());
            }
        }
        t += 1;
    }
    visits.extend(sched.take_visits());

    for s in &mut stats {
        let lat: Vec<Cycle> = delivered
            .iter()
            .filter(|p| p.flow == s.flow)
            .filter_map(Packet::latency)
            .collect();
        if !lat.is_empty() {
            s.mean_latency = lat.iter().sum::<u64>() as f64 / lat.len() as f64;
            s.max_latency = *lat.iter().max().expect("non-empty");
        }
        if t > 0 {
            s.throughput = s.sent_units as f64 / t as f64;
        }
    }

    LinkRun {
        trace,
        occupancy,
        delivered,
        flows: stats,
        visits,
        end: t,
        idle_with_backlog,
    }
}
