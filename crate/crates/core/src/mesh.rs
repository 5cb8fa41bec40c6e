//! Flit-level wormhole simulator for a k-node line (k-ary 1-mesh).
//!
//! Each router has three inputs (local, from-west, from-east) and three
//! outputs (eject, east, west). Links move one flit per cycle and a hop takes
//! one cycle. Network input buffers are bounded and guarded by credits that
//! come back one cycle after a flit leaves; source queues are unbounded.
//! Every packet holds its output from head grant until its tail passes, so
//! a free output is arbitrated only between head flits.
//!
//! Per cycle: inject, then move flits on owned outputs, then arbitrate free
//! outputs (a winner may move in the same cycle), then land every moved flit
//! in its downstream buffer. Credit checks use the occupancy at the start of
//! the cycle.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arbitration::{ArbError, ArbRequest, Arbiter, ArbiterKind, WeightPolicy};
use crate::model::{Cycle, FlowId, Packet};
use crate::rng::{derive_seed, SimRng};
use crate::sched::{Outcome, SchedError, Scheduler, SchedulerParams};
use crate::trace::{ServiceRecord, Trace, TraceError};

pub const LOCAL: usize = 0;
pub const FROM_WEST: usize = 1;
pub const FROM_EAST: usize = 2;

pub const EJECT: usize = 0;
pub const EAST: usize = 1;
pub const WEST: usize = 2;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("k must be at least 2, got {0}")]
    TooFewNodes(usize),
    #[error("packet_len must be at least 1")]
    EmptyPackets,
    #[error("buffer_depth must be at least 1")]
    NoBuffering,
    #[error("hotspot dest {dest} out of range for k = {k}")]
    HotspotOutOfRange { dest: usize, k: usize },
    #[error("warmup ({warmup}) must be below horizon ({horizon})")]
    Warmup { warmup: Cycle, horizon: Cycle },
    #[error("injection rate must lie in [0, 1], got {0}")]
    Rate(f64),
    #[error("rates list has {got} entries, expected {k}")]
    RatesLength { got: usize, k: usize },
    #[error("traced link {router}/{port} does not exist")]
    TraceLink { router: usize, port: usize },
    #[error("node {from} cannot send to {dest}")]
    BadPacket { from: usize, dest: usize },
    #[error(transparent)]
    Arbiter(#[from] ArbError),
    #[error(transparent)]
    Scheduler(#[from] SchedError),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    /// Every other node sends to `dest`.
    Hotspot { dest: usize },
    /// Each packet picks a destination uniformly among the other nodes.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    /// Offered load in packets per cycle per source.
    pub rate: f64,
    /// Per-node override of `rate`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates: Option<Vec<f64>>,
    pub pattern: Pattern,
}

/// An output port of one router.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRef {
    pub router: usize,
    pub port: usize,
}

fn default_len() -> u32 {
    4
}

fn default_depth() -> usize {
    4
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub k: usize,
    #[serde(default = "default_len")]
    pub packet_len: u32,
    #[serde(default = "default_depth")]
    pub buffer_depth: usize,
    pub injection: Injection,
    #[serde(default = "default_arbiter")]
    pub arbiter: ArbiterKind,
    /// Flow-queue mode: every output picks among the waiting head packets
    /// with this discipline instead of the arbiter (flow = source node).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheduler: Option<SchedulerParams>,
    pub horizon: Cycle,
    #[serde(default)]
    pub warmup: Cycle,
    #[serde(default)]
    pub seed: u64,
    /// Output whose per-packet service is recorded as a trace. Defaults to
    /// the hotspot's eject port.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace_link: Option<LinkRef>,
    /// Check conservation and credit invariants every cycle.
    #[serde(default = "default_true")]
    pub audit: bool,
}

fn default_arbiter() -> ArbiterKind {
    ArbiterKind::RoundRobin
}

impl MeshConfig {
    /// The saturated hotspot setup: every node but the last sends to it.
    pub fn hotspot(
        k: usize,
        arbiter: ArbiterKind,
        horizon: Cycle,
        warmup: Cycle,
        seed: u64,
    ) -> Self {
        Self {
            k,
            packet_len: default_len(),
            buffer_depth: default_depth(),
            injection: Injection {
                rate: 1.0,
                rates: None,
                pattern: Pattern::Hotspot { dest: k - 1 },
            },
            arbiter,
            scheduler: None,
            horizon,
            warmup,
            seed,
            trace_link: None,
            audit: true,
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.k < 2 {
            return Err(MeshError::TooFewNodes(self.k));
        }
        if self.packet_len == 0 {
            return Err(MeshError::EmptyPackets);
        }
        if self.buffer_depth == 0 {
            return Err(MeshError::NoBuffering);
        }
        if let Pattern::Hotspot { dest } = self.injection.pattern {
            if dest >= self.k {
                return Err(MeshError::HotspotOutOfRange { dest, k: self.k });
            }
        }
        if self.warmup >= self.horizon && self.horizon > 0 {
            return Err(MeshError::Warmup {
                warmup: self.warmup,
                horizon: self.horizon,
            });
        }
        if let Some(r) = &self.injection.rates {
            if r.len() != self.k {
                return Err(MeshError::RatesLength {
                    got: r.len(),
                    k: self.k,
                });
            }
        }
        for r in self.rates() {
            if !(0.0..=1.0).contains(&r) {
                return Err(MeshError::Rate(r));
            }
        }
        if let Some(l) = self.trace_link {
            if l.router >= self.k || l.port > 2 {
                return Err(MeshError::TraceLink {
                    router: l.router,
                    port: l.port,
                });
            }
        }
        if let ArbiterKind::Probabilistic { weights } = &self.arbiter {
            weights.validate()?;
        }
        if let Some(s) = &self.scheduler {
            s.validate()?;
        }
        Ok(())
    }

    /// Offered rate of each node; the hotspot itself does not inject.
    pub fn rates(&self) -> Vec<f64> {
        let mut r = self
            .injection
            .rates
            .clone()
            .unwrap_or_else(|| vec![self.injection.rate; self.k]);
        if let Pattern::Hotspot { dest } = self.injection.pattern {
            if let Some(x) = r.get_mut(dest) {
                *x = 0.0;
            }
        }
        r
    }

    fn traced(&self) -> Option<LinkRef> {
        self.trace_link.or(match self.injection.pattern {
            Pattern::Hotspot { dest } => Some(LinkRef {
                router: dest,
                port: EJECT,
            }),
            Pattern::Uniform => None,
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
struct Flit {
    pkt: u32,
    seq: u32,
}

#[derive(Clone, Debug)]
struct PacketInfo {
    source: usize,
    dest: usize,
    inject: Cycle,
    path_contention: f64,
}

#[derive(Debug)]
struct Source {
    rate: f64,
    rng: SimRng,
    dest_rng: SimRng,
    /// Waiting packets: (inject cycle, dest).
    pending: VecDeque<(Cycle, usize)>,
    head: Option<u32>,
    cursor: u32,
}

#[derive(Clone, Debug)]
struct Owner {
    input: usize,
    pkt: u32,
    granted: Cycle,
    round: u64,
    sending: u64,
    blocking: u64,
    starved: u64,
}

struct Output {
    owner: Option<Owner>,
    arbiter: Arbiter,
    sched: Option<Box<dyn Scheduler>>,
    announced: Vec<u32>,
    last: Option<Flit>,
}

struct Router {
    buffers: [VecDeque<Flit>; 3],
    outputs: [Output; 3],
}

/// Accumulated at one router for one source flow.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterFlowStats {
    pub router: usize,
    pub flow: FlowId,
    /// Packets whose tail passed (`k_ij`).
    pub packets: u64,
    /// Cycles an output of this router was held by the flow (`T_ij`).
    pub occupied: u64,
    pub sending: u64,
    /// Held, head flit present, no downstream credit.
    pub blocking: u64,
    /// Held, but the next flit had not arrived from upstream yet.
    pub starved: u64,
    /// `T_ij / k_ij` (`t_ij`).
    pub mean_service: f64,
    /// `(sending + blocking) / sending`; absent with no sending.
    pub s_ratio: Option<f64>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: usize,
    pub injected: u64,
    /// Delivered after warmup.
    pub delivered: u64,
    pub dropped: u64,
    /// Fraction of all post-warmup deliveries.
    pub share: f64,
    /// Delivered flits per cycle, i.e. fraction of one link's bandwidth.
    pub throughput: f64,
    pub mean_latency: f64,
    pub max_latency: Cycle,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub cycles_checked: u64,
    pub conservation_violations: u64,
    pub credit_violations: u64,
    pub contiguity_violations: u64,
    pub max_buffer_occupancy: usize,
}

impl Audit {
    pub fn clean(&self) -> bool {
        self.conservation_violations == 0
            && self.credit_violations == 0
            && self.contiguity_violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: MeshConfig,
    pub cycles: Cycle,
    pub measured_cycles: Cycle,
    pub injected_flits: u64,
    pub delivered_flits: u64,
    pub sources: Vec<SourceStats>,
    pub routers: Vec<RouterFlowStats>,
    pub audit: Audit,
    #[serde(skip)]
    pub trace: Trace,
}

impl SimReport {
    pub fn shares(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.share).collect()
    }

    /// Sources that offered traffic.
    pub fn active_sources(&self) -> Vec<&SourceStats> {
        let rates = self.config.rates();
        self.sources
            .iter()
            .filter(|s| rates[s.source] > 0.0)
            .collect()
    }

    /// `source,share,mean_latency,max_latency` for each injecting source.
    pub fn shares_csv(&self) -> String {
        let mut s = String::from("source,share,mean_latency,max_latency\n");
        for src in self.active_sources() {
            s.push_str(&format!(
                "{},{},{},{}\n",
                src.source, src.share, src.mean_latency, src.max_latency
            ));
        }
        s
    }

    pub fn stats(&self, flow: usize, router: usize) -> Option<&RouterFlowStats> {
        self.routers
            .iter()
            .find(|r| r.flow.index() == flow && r.router == router)
    }
}

/// `S[flow][router]`, `None` where the flow never sent through the router.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SMatrix {
    pub values: Vec<Vec<Option<f64>>>,
}

impl SMatrix {
    pub fn get(&self, flow: usize, router: usize) -> Option<f64> {
        self.values
            .get(flow)
            .and_then(|r| r.get(router))
            .copied()
            .flatten()
    }

    pub fn flows(&self) -> usize {
        self.values.len()
    }

    pub fn routers(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

pub fn measure_sij(report: &SimReport) -> SMatrix {
    let k = report.config.k;
    let mut values = vec![vec![None; k]; k];
    for r in &report.routers {
        values[r.flow.index()][r.router] = r.s_ratio;
    }
    SMatrix { values }
}

pub struct Mesh {
    cfg: MeshConfig,
    now: Cycle,
    routers: Vec<Router>,
    sources: Vec<Source>,
    packets: Vec<PacketInfo>,
    stats: Vec<Vec<RouterFlowStats>>,
    src_stats: Vec<SourceStats>,
    latency_sum: Vec<u128>,
    trace: Trace,
    traced: Option<LinkRef>,
    injected_flits: u64,
    delivered_flits: u64,
    audit: Audit,
}

#[derive(Copy, Clone)]
struct Move {
    router: usize,
    output: usize,
    flit: Flit,
}

impl Mesh {
    pub fn new(cfg: MeshConfig) -> Result<Self, MeshError> {
        cfg.validate()?;
        let k = cfg.k;
        let rates = cfg.rates();
        let mut routers = Vec::with_capacity(k);
        for r in 0..k {
            let mk = |o: usize| -> Result<Output, MeshError> {
                Ok(Output {
                    owner: None,
                    arbiter: Arbiter::new(
                        cfg.arbiter,
                        3,
                        derive_seed(cfg.seed, 1_000 + (r * 3 + o) as u64),
                    )?,
                    sched: cfg
                        .scheduler
                        .as_ref()
                        .map(SchedulerParams::build)
                        .transpose()?,
                    announced: Vec::new(),
                    last: None,
                })
            };
            routers.push(Router {
                buffers: Default::default(),
                outputs: [mk(0)?, mk(1)?, mk(2)?],
            });
        }
        let sources = (0..k)
            .map(|n| Source {
                rate: rates[n],
                rng: SimRng::new(derive_seed(cfg.seed, n as u64)),
                dest_rng: SimRng::new(derive_seed(cfg.seed, 2_000 + n as u64)),
                pending: VecDeque::new(),
                head: None,
                cursor: 0,
            })
            .collect();
        let stats = (0..k)
            .map(|r| {
                (0..k)
                    .map(|f| RouterFlowStats {
                        router: r,
                        flow: FlowId(f as u32),
                        ..Default::default()
                    })
                    .collect()
            })
            .collect();
        let src_stats = (0..k)
            .map(|source| SourceStats {
                source,
                ..Default::default()
            })
            .collect();
        Ok(Self {
            traced: cfg.traced(),
            cfg,
            now: 0,
            routers,
            sources,
            packets: Vec::new(),
            stats,
            src_stats,
            latency_sum: vec![0; k],
            trace: Trace::new(),
            injected_flits: 0,
            delivered_flits: 0,
            audit: Audit::default(),
        })
    }

    pub fn now(&self) -> Cycle {
        self.now
    }

    pub fn config(&self) -> &MeshConfig {
        &self.cfg
    }

    /// Queue one packet at `source` now, bypassing the injection process.
    pub fn inject(&mut self, source: usize, dest: usize) -> Result<(), MeshError> {
        if source >= self.cfg.k || dest >= self.cfg.k || source == dest {
            return Err(MeshError::BadPacket { from: source, dest });
        }
        self.sources[source].pending.push_back((self.now, dest));
        self.src_stats[source].injected += 1;
        self.injected_flits += u64::from(self.cfg.packet_len);
        Ok(())
    }

    /// Flits inside network buffers.
    pub fn flits_in_network(&self) -> usize {
        self.routers
            .iter()
            .map(|r| r.buffers.iter().map(VecDeque::len).sum::<usize>())
            .sum()
    }

    /// Flits not yet delivered: still at a source or inside the network.
    pub fn flits_in_flight(&self) -> u64 {
        let len = u64::from(self.cfg.packet_len);
        let at_sources: u64 = self
            .sources
            .iter()
            .map(|s| s.pending.len() as u64 * len + s.head.map_or(0, |_| len - u64::from(s.cursor)))
            .sum();
        at_sources + self.flits_in_network() as u64
    }

    pub fn delivered_flits(&self) -> u64 {
        self.delivered_flits
    }

    pub fn injected_flits(&self) -> u64 {
        self.injected_flits
    }

    pub fn audit(&self) -> Audit {
        self.audit
    }

    fn generate(&mut self) {
        let k = self.cfg.k;
        let len = u64::from(self.cfg.packet_len);
        for n in 0..k {
            let src = &mut self.sources[n];
            if src.rate > 0.0 && src.rng.bernoulli(src.rate) {
                let dest = match self.cfg.injection.pattern {
                    Pattern::Hotspot { dest } => dest,
                    Pattern::Uniform => {
                        let d = src.dest_rng.range_inclusive(0, k as u64 - 2) as usize;
                        if d >= n {
                            d + 1
                        } else {
                            d
                        }
                    }
                };
                src.pending.push_back((self.now, dest));
                self.src_stats[n].injected += 1;
                self.injected_flits += len;
            }
        }
        for n in 0..k {
            let src = &mut self.sources[n];
            if src.head.is_none() {
                if let Some((inject, dest)) = src.pending.pop_front() {
                    src.head = Some(self.packets.len() as u32);
                    src.cursor = 0;
                    self.packets.push(PacketInfo {
                        source: n,
                        dest,
                        inject,
                        path_contention: 1.0,
                    });
                }
            }
        }
    }

    fn head(&self, r: usize, input: usize) -> Option<Flit> {
        if input == LOCAL {
            let s = &self.sources[r];
            s.head.map(|pkt| Flit { pkt, seq: s.cursor })
        } else {
            self.routers[r].buffers[input].front().copied()
        }
    }

    fn route(&self, r: usize, pkt: u32) -> usize {
        let dest = self.packets[pkt as usize].dest;
        match dest.cmp(&r) {
            std::cmp::Ordering::Equal => EJECT,
            std::cmp::Ordering::Greater => EAST,
            std::cmp::Ordering::Less => WEST,
        }
    }

    /// Downstream (router, input) of an output, or `None` for eject.
    fn downstream(r: usize, output: usize) -> Option<(usize, usize)> {
        match output {
            EAST => Some((r + 1, FROM_WEST)),
            WEST => Some((r - 1, FROM_EAST)),
            _ => None,
        }
    }

    fn pop(&mut self, r: usize, input: usize) -> Flit {
        if input == LOCAL {
            let len = self.cfg.packet_len;
            let s = &mut self.sources[r];
            let f = Flit {
                pkt: s.head.expect("local head present"),
                seq: s.cursor,
            };
            s.cursor += 1;
            if s.cursor == len {
                s.head = None;
                s.cursor = 0;
            }
            f
        } else {
            self.routers[r].buffers[input]
                .pop_front()
                .expect("buffered head present")
        }
    }

    /// Advance one cycle.
    #[allow(clippy::needless_range_loop)]
    pub fn step(&mut self) -> Result<(), MeshError> {
        self.generate();
        let k = self.cfg.k;
        let depth = self.cfg.buffer_depth;
        let measuring = self.now >= self.cfg.warmup;
        let occ: Vec<[usize; 3]> = self
            .routers
            .iter()
            .map(|r| [r.buffers[0].len(), r.buffers[1].len(), r.buffers[2].len()])
            .collect();
        let mut moves: Vec<Move> = Vec::new();

        for r in 0..k {
            let mut used = [false; 3];
            let mut served = [false; 3];
            // owned outputs first
            for o in 0..3 {
                if let Some(input) = self.routers[r].outputs[o].owner.as_ref().map(|w| w.input) {
                    used[input] = true;
                    served[o] = true;
                    self.serve(r, o, &occ, depth, measuring, &mut moves)?;
                }
            }
            for o in 0..3 {
                if served[o] {
                    continue;
                }
                let mut cands: Vec<(usize, u32)> = Vec::new();
                for (input, &busy) in used.iter().enumerate() {
                    if busy {
                        continue;
                    }
                    if let Some(f) = self.head(r, input) {
                        if f.seq == 0 && self.route(r, f.pkt) == o {
                            cands.push((input, f.pkt));
                        }
                    }
                }
                if cands.is_empty() {
                    continue;
                }
                let (input, pkt, round) = self.choose(r, o, &cands)?;
                let live = cands.len() as f64;
                self.packets[pkt as usize].path_contention *= live;
                used[input] = true;
                self.routers[r].outputs[o].owner = Some(Owner {
                    input,
                    pkt,
                    granted: self.now,
                    round,
                    sending: 0,
                    blocking: 0,
                    starved: 0,
                });
                self.serve(r, o, &occ, depth, measuring, &mut moves)?;
            }
        }

        for m in moves {
            match Self::downstream(m.router, m.output) {
                Some((dr, di)) => {
                    self.routers[dr].buffers[di].push_back(m.flit);
                    let len = self.routers[dr].buffers[di].len();
                    self.audit.max_buffer_occupancy = self.audit.max_buffer_occupancy.max(len);
                    if len > depth {
                        self.audit.credit_violations += 1;
                    }
                }
                None => self.eject(m.flit),
            }
        }

        if self.cfg.audit {
            self.audit.cycles_checked += 1;
            if self.injected_flits != self.delivered_flits + self.flits_in_flight() {
                self.audit.conservation_violations += 1;
            }
        }
        self.now += 1;
        Ok(())
    }

    fn choose(
        &mut self,
        r: usize,
        o: usize,
        cands: &[(usize, u32)],
    ) -> Result<(usize, u32, u64), MeshError> {
        if self.routers[r].outputs[o].sched.is_some() {
            let len = self.cfg.packet_len;
            for &(_, pkt) in cands {
                let out = &mut self.routers[r].outputs[o];
                if !out.announced.contains(&pkt) {
                    let info = &self.packets[pkt as usize];
                    let p = Packet::new(
                        u64::from(pkt),
                        FlowId(info.source as u32),
                        len,
                        info.source as u32,
                        info.dest as u32,
                        info.inject,
                    )
                    .expect("packet_len validated positive");
                    let sched = out.sched.as_mut().expect("checked above");
                    if sched.enqueue(p).is_ok() {
                        out.announced.push(pkt);
                    }
                }
            }
            let out = &mut self.routers[r].outputs[o];
            let sched = out.sched.as_mut().expect("checked above");
            if let Some(sel) = sched.select() {
                let pkt = sel.packet.id as u32;
                out.announced.retain(|&p| p != pkt);
                if let Some(&(input, _)) = cands.iter().find(|c| c.1 == pkt) {
                    return Ok((input, pkt, sel.round));
                }
            }
            // the discipline held back every candidate; fall back to the oldest
            let &(input, pkt) = cands.iter().min_by_key(|c| c.1).expect("non-empty");
            return Ok((input, pkt, 0));
        }
        let reqs: Vec<ArbRequest> = cands
            .iter()
            .map(|&(input, pkt)| {
                let info = &self.packets[pkt as usize];
                let mut req = ArbRequest::new(
                    input,
                    FlowId(info.source as u32),
                    info.dest.abs_diff(info.source) as u32,
                    r.abs_diff(info.source) as u32,
                    info.inject,
                );
                if matches!(
                    self.cfg.arbiter,
                    ArbiterKind::Probabilistic {
                        weights: WeightPolicy::Variable { per_hop: true }
                    }
                ) {
                    req.path_contention = Some(info.path_contention);
                }
                req
            })
            .collect();
        let i = self.routers[r].outputs[o].arbiter.grant(&reqs)?;
        Ok((cands[i].0, cands[i].1, 0))
    }

    /// One cycle of an owned output: move the owner's next flit if it is
    /// here and the next buffer has room.
    fn serve(
        &mut self,
        r: usize,
        o: usize,
        occ: &[[usize; 3]],
        depth: usize,
        measuring: bool,
        moves: &mut Vec<Move>,
    ) -> Result<(), MeshError> {
        let owner = self.routers[r].outputs[o].owner.clone().expect("owned");
        let flow = self.packets[owner.pkt as usize].source;
        let head = self.head(r, owner.input).filter(|f| f.pkt == owner.pkt);
        let room = match Self::downstream(r, o) {
            Some((dr, di)) => occ[dr][di] < depth,
            None => true,
        };
        let st = &mut self.stats[r][flow];
        if measuring {
            st.occupied += 1;
        }
        let mut o_state = owner;
        match head {
            None => {
                o_state.starved += 1;
                if measuring {
                    st.starved += 1;
                }
            }
            Some(_) if !room => {
                o_state.blocking += 1;
                if measuring {
                    st.blocking += 1;
                }
            }
            Some(_) => {
                o_state.sending += 1;
                if measuring {
                    st.sending += 1;
                }
                let flit = self.pop(r, o_state.input);
                let out = &mut self.routers[r].outputs[o];
                let contiguous = match out.last {
                    None => flit.seq == 0,
                    Some(prev) if prev.pkt == flit.pkt => flit.seq == prev.seq + 1,
                    Some(prev) => flit.seq == 0 && prev.seq + 1 == self.cfg.packet_len,
                };
                if !contiguous {
                    self.audit.contiguity_violations += 1;
                }
                out.last = Some(flit);
                moves.push(Move {
                    router: r,
                    output: o,
                    flit,
                });
                if flit.seq + 1 == self.cfg.packet_len {
                    self.release(r, o, flow, &o_state, measuring)?;
                    return Ok(());
                }
            }
        }
        self.routers[r].outputs[o].owner = Some(o_state);
        Ok(())
    }

    fn release(
        &mut self,
        r: usize,
        o: usize,
        flow: usize,
        w: &Owner,
        measuring: bool,
    ) -> Result<(), MeshError> {
        let out = &mut self.routers[r].outputs[o];
        out.owner = None;
        if let Some(s) = out.sched.as_mut() {
            s.complete(Outcome {
                flow: FlowId(flow as u32),
                sent: w.sending,
                occupation: w.sending + w.blocking,
            });
        }
        if measuring {
            self.stats[r][flow].packets += 1;
        }
        if self.traced == Some(LinkRef { router: r, port: o }) && w.granted >= self.cfg.warmup {
            let rec = ServiceRecord::new(
                FlowId(flow as u32),
                w.round,
                w.granted,
                self.now + 1,
                w.sending,
                w.blocking,
            )?;
            self.trace.record_service(rec)?;
        }
        Ok(())
    }

    fn eject(&mut self, flit: Flit) {
        self.delivered_flits += 1;
        if flit.seq + 1 == self.cfg.packet_len && self.now >= self.cfg.warmup {
            let info = &self.packets[flit.pkt as usize];
            let lat = self.now - info.inject;
            let s = &mut self.src_stats[info.source];
            s.delivered += 1;
            s.max_latency = s.max_latency.max(lat);
            self.latency_sum[info.source] += u128::from(lat);
        }
    }

    /// Step to the horizon and summarise the post-warmup window.
    pub fn run(mut self) -> Result<SimReport, MeshError> {
        while self.now < self.cfg.horizon {
            self.step()?;
        }
        Ok(self.report())
    }

    pub fn report(&self) -> SimReport {
        let measured = self.now.saturating_sub(self.cfg.warmup);
        let total: u64 = self.src_stats.iter().map(|s| s.delivered).sum();
        let len = f64::from(self.cfg.packet_len);
        let sources = self
            .src_stats
            .iter()
            .zip(&self.latency_sum)
            .map(|(s, &lat)| SourceStats {
                share: if total == 0 {
                    0.0
                } else {
                    s.delivered as f64 / total as f64
                },
                throughput: if measured == 0 {
                    0.0
                } else {
                    s.delivered as f64 * len / measured as f64
                },
                mean_latency: if s.delivered == 0 {
                    0.0
                } else {
                    lat as f64 / s.delivered as f64
                },
                ..*s
            })
            .collect();
        let routers = self
            .stats
            .iter()
            .flatten()
            .filter(|s| s.occupied > 0)
            .map(|s| RouterFlowStats {
                mean_service: if s.packets == 0 {
                    0.0
                } else {
                    s.occupied as f64 / s.packets as f64
                },
                s_ratio: (s.sending > 0)
                    .then(|| (s.sending + s.blocking) as f64 / s.sending as f64),
                ..*s
            })
            .collect();
        SimReport {
            config: self.cfg.clone(),
            cycles: self.now,
            measured_cycles: measured,
            injected_flits: self.injected_flits,
            delivered_flits: self.delivered_flits,
            sources,
            routers,
            audit: self.audit,
            trace: self.trace.clone(),
        }
    }
}

/// Build and run in one go.
pub fn simulate(cfg: &MeshConfig) -> Result<SimReport, MeshError> {
    Mesh::new(cfg.clone())?.run()
}
