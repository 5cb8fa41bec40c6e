use super::{
    slot, FlowQueues, FlowSnapshot, Outcome, Rounds, Scheduler, SchedulerKind, SchedulerParams,
    Selection, Visit,
};
use crate::model::{Accounting, FlowId, Packet};

/// Congestion demotion settings for CARR.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Demotion {
    /// A transmission whose occupation / sending ratio exceeds this marks the
    /// flow congested.
    pub tau: f64,
    /// Rounds the mark lasts.
    pub rounds: u64,
    /// Return the allowance forfeited while demoted on the first visit after
    /// the mark clears.
    pub compensate: bool,
}

#[derive(Debug, Default, Clone)]
struct ErrFlow {
    weight: f64,
    /// SC_i of the flow's last visit (0 after it went idle).
    surplus: f64,
    /// A_i of the current or last visit.
    allowance: f64,
    sent: u64,
    active: bool,
    /// Round at which the congestion mark clears.
    congested_until: Option<u64>,
    owed: f64,
}

/// Elastic round robin, and with [`Demotion`] set, congestion-aware round
/// robin (CARR).
///
/// Each visit serves whole packets while the flow has sent less than its
/// allowance, so the last packet may overshoot. The overshoot is the
/// surplus count `SC_i(r) = sent_i(r) - A_i(r)`, and the next allowance is
/// `A_i(r+1) = f_i * (1 + MaxSC(r)) - SC_i(r)` where `MaxSC(r)` is the
/// largest weight-normalised surplus of round `r`. With unit weights that
/// is `1 + MaxSC(r) - SC_i(r)`. A flow that empties its queue has its
/// surplus reset.
///
/// CARR marks a flow congested when one of its transmissions held the
/// channel more than `tau` times its sending time. A congested flow loses
/// its visit in each round while some uncongested flow is backlogged, until
/// the mark expires `rounds` rounds later. A congested flow that is the only
/// backlogged flow is always served.
#[derive(Debug)]
pub struct Err {
    queues: FlowQueues,
    flows: Vec<ErrFlow>,
    params: SchedulerParams,
    demotion: Option<Demotion>,
    rounds: Rounds,
    max_sc_prev: f64,
    max_sc_cur: f64,
    current: Option<Visit>,
    outstanding: bool,
    log: Option<Vec<Visit>>,
}

impl Err {
    pub fn new(params: &SchedulerParams, demotion: Option<Demotion>) -> Self {
        Self {
            queues: FlowQueues::new(params.queue_capacity),
            flows: Vec::new(),
            params: params.clone(),
            demotion,
            rounds: Rounds::default(),
            max_sc_prev: 0.0,
            max_sc_cur: 0.0,
            current: None,
            outstanding: false,
            log: None,
        }
    }

    fn is_congested(&self, flow: FlowId) -> bool {
        self.flows[flow.index()]
            .congested_until
            .is_some_and(|until| self.rounds.round < until)
    }

    /// Some other backlogged flow is not congested.
    fn has_uncongested_rival(&self) -> bool {
        self.rounds.active.iter().any(|&f| !self.is_congested(f))
    }

    fn finish(&mut self, mut visit: Visit, keep: bool) {
        self.rounds.end_visit(visit.flow, keep);
        visit.max_sc_prev = Some(self.max_sc_prev);
        if let Some(log) = self.log.as_mut() {
            log.push(visit);
        }
    }

    fn end_visit(&mut self, empty: bool) {
        let mut visit = self.current.take().expect("visit in progress");
        let f = &mut self.flows[visit.flow.index()];
        let surplus = f.sent as f64 - f.allowance;
        self.max_sc_cur = self.max_sc_cur.max(surplus / f.weight);
        f.surplus = surplus;
        visit.surplus = Some(surplus);
        if empty {
            f.surplus = 0.0;
            f.active = false;
        }
        self.finish(visit, !empty);
    }
}

impl Scheduler for Err {
    fn kind(&self) -> SchedulerKind {
        if self.demotion.is_some() {
            SchedulerKind::Carr
        } else {
            SchedulerKind::Err
        }
    }

    fn accounting(&self) -> Accounting {
        self.params.accounting
    }

    fn enqueue(&mut self, packet: Packet) -> Result<(), Packet> {
        let flow = packet.flow;
        self.queues.push(packet)?;
        let weight = self.params.weight(flow);
        let f = slot(&mut self.flows, flow);
        f.weight = weight;
        if !f.active {
            f.active = true;
            self.rounds.active.push_back(flow);
        }
        Ok(())
    }

    fn select(&mut self) -> Option<Selection> {
        debug_assert!(!self.outstanding, "select with a packet outstanding");
        loop {
            if let Some(flow) = self.current.as_ref().map(|v| v.flow) {
                let packet = self.queues.pop(flow).expect("visited flow is backlogged");
                self.outstanding = true;
                return Some(Selection {
                    packet,
                    round: self.rounds.round,
                });
            }

            let (flow, new_round) = self.rounds.begin_visit()?;
            if new_round {
                self.max_sc_prev = self.max_sc_cur;
                self.max_sc_cur = 0.0;
            }
            let round = self.rounds.round;
            let allowance = {
                let f = &self.flows[flow.index()];
                f.weight * (1.0 + self.max_sc_prev) - f.surplus
            };
            let mut visit = Visit::new(flow, round);
            visit.allowance = Some(allowance);

            if let Some(dm) = self.demotion {
                let f = &mut self.flows[flow.index()];
                if f.congested_until.is_some_and(|until| round >= until) {
                    f.congested_until = None;
                }
                if self.is_congested(flow) && self.has_uncongested_rival() {
                    let f = &mut self.flows[flow.index()];
                    if dm.compensate {
                        f.owed += allowance;
                    }
                    // a skipped flow still takes part in the round, so MaxSC
                    // covers its carried surplus and its next allowance stays >= 1
                    self.max_sc_cur = self.max_sc_cur.max(f.surplus / f.weight);
                    visit.skipped = true;
                    visit.surplus = Some(f.surplus);
                    self.finish(visit, true);
                    continue;
                }
            }

            let f = &mut self.flows[flow.index()];
            f.allowance = allowance;
            if self.demotion.is_some() && f.congested_until.is_none() && f.owed > 0.0 {
                f.allowance += f.owed;
                f.owed = 0.0;
                visit.allowance = Some(f.allowance);
            }
            f.sent = 0;
            self.current = Some(visit);
        }
    }

    fn complete(&mut self, outcome: Outcome) {
        debug_assert!(self.outstanding, "complete without select");
        self.outstanding = false;
        let units = outcome.units(self.params.accounting);
        let round = self.rounds.round;
        let f = &mut self.flows[outcome.flow.index()];
        f.sent += units;
        if let Some(dm) = self.demotion {
            let ratio = if outcome.sent == 0 {
                f64::INFINITY
            } else {
                outcome.occupation as f64 / outcome.sent as f64
            };
            if ratio > dm.tau {
                f.congested_until = Some(round + dm.rounds);
            }
        }
        let (sent, allowance) = (f.sent as f64, f.allowance);
        if let Some(v) = self.current.as_mut() {
            v.packets += 1;
            v.units += units;
        }
        if self.queues.is_empty(outcome.flow) {
            self.end_visit(true);
        } else if sent >= allowance {
            self.end_visit(false);
        }
    }

    fn queue_len(&self, flow: FlowId) -> usize {
        self.queues.len(flow)
    }

    fn backlog(&self) -> usize {
        self.queues.total()
    }

    fn round(&self) -> u64 {
        self.rounds.round
    }

    fn drops(&self) -> u64 {
        self.queues.drops()
    }

    fn flow_state(&self, flow: FlowId) -> FlowSnapshot {
        let Some(f) = self.flows.get(flow.index()) else {
            return FlowSnapshot::default();
        };
        FlowSnapshot {
            queued: self.queues.len(flow),
            active: f.active,
            surplus: Some(f.surplus),
            allowance: Some(f.allowance),
            congested: self.is_congested(flow),
            ..FlowSnapshot::default()
        }
    }

    fn take_visits(&mut self) -> Vec<Visit> {
        self.log.as_mut().map(std::mem::take).unwrap_or_default()
    }

    fn log_visits(&mut self, on: bool) {
        self.log = on.then(Vec::new);
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::{drain, pkt};
    use super::*;

    fn err() -> Err {
        Err::new(&SchedulerParams::new(SchedulerKind::Err), None)
    }

    fn carr() -> Err {
        Err::new(
            &SchedulerParams::new(SchedulerKind::Carr),
            Some(Demotion {
                tau: 2.0,
                rounds: 2,
                compensate: false,
            }),
        )
    }

    fn serve(s: &mut Err, sending: u64, blocking: u64) -> FlowId {
        let sel = s.select().unwrap();
        assert_eq!(sel.packet.size as u64, sending);
        s.complete(Outcome {
            flow: sel.packet.flow,
            sent: sending,
            occupation: sending + blocking,
        });
        sel.packet.flow
    }

    #[test]
    fn first_round_allowance_is_one() {
        let mut s = err();
        s.log_visits(true);
        for f in 0..3 {
            s.enqueue(pkt(f as u64, f, 3)).unwrap();
        }
        drain(&mut s);
        let visits = s.take_visits();
        assert_eq!(visits.len(), 3);
        assert!(visits
            .iter()
            .all(|v| v.round == 1 && v.allowance == Some(1.0)));
    }

    #[test]
    fn overshoot_becomes_surplus_and_next_allowance() {
        // round 1: a sends 5 with A=1 (SC=4), b sends 1 (SC=0); MaxSC(1)=4
        // round 2: A_a = 1+4-4 = 1, A_b = 1+4-0 = 5
        let mut s = err();
        s.log_visits(true);
        s.enqueue(pkt(0, 0, 5)).unwrap();
        s.enqueue(pkt(1, 0, 5)).unwrap();
        for i in 0..6 {
            s.enqueue(pkt(10 + i, 1, 1)).unwrap();
        }
        drain(&mut s);
        let v = s.take_visits();
        assert_eq!((v[0].flow, v[0].surplus), (FlowId(0), Some(4.0)));
        assert_eq!((v[1].flow, v[1].surplus), (FlowId(1), Some(0.0)));
        assert_eq!(
            (v[2].flow, v[2].round, v[2].allowance),
            (FlowId(0), 2, Some(1.0))
        );
        assert_eq!(
            (v[3].flow, v[3].round, v[3].allowance),
            (FlowId(1), 2, Some(5.0))
        );
        assert_eq!(v[3].packets, 5);
    }

    #[test]
    fn surplus_resets_when_queue_empties() {
        let mut s = err();
        s.enqueue(pkt(0, 0, 7)).unwrap();
        drain(&mut s);
        let st = s.flow_state(FlowId(0));
        assert!(!st.active);
        assert_eq!(st.surplus, Some(0.0));
    }

    #[test]
    fn congestion_threshold() {
        // sending 4, blocking 6: ratio 2.5 > 2
        let mut s = carr();
        s.enqueue(pkt(0, 0, 4)).unwrap();
        s.enqueue(pkt(1, 0, 4)).unwrap();
        serve(&mut s, 4, 6);
        assert!(s.flow_state(FlowId(0)).congested);
    }

    #[test]
    fn blocking_free_flow_never_demoted() {
        let mut s = carr();
        for i in 0..4 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
        }
        for _ in 0..3 {
            serve(&mut s, 4, 0);
            assert!(!s.flow_state(FlowId(0)).congested);
        }
    }

    #[test]
    fn lone_congested_flow_is_still_served() {
        let mut s = carr();
        for i in 0..3 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
        }
        serve(&mut s, 4, 20);
        assert!(s.flow_state(FlowId(0)).congested);
        assert_eq!(serve(&mut s, 4, 20), FlowId(0));
        assert_eq!(serve(&mut s, 4, 20), FlowId(0));
    }

    #[test]
    fn congested_flow_skipped_until_mark_expires() {
        let mut s = carr();
        s.log_visits(true);
        for i in 0..10 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
            s.enqueue(pkt(100 + i, 1, 4)).unwrap();
        }
        // round 1: a congested (mark until round 3), b clean
        assert_eq!(serve(&mut s, 4, 20), FlowId(0));
        assert_eq!(serve(&mut s, 4, 0), FlowId(1));
        // rounds 2: a skipped, b served
        assert_eq!(serve(&mut s, 4, 0), FlowId(1));
        // round 3: mark expired, a served again (clean this time)
        assert_eq!(serve(&mut s, 4, 0), FlowId(0));
        let skipped: Vec<(u32, u64)> = s
            .take_visits()
            .iter()
            .filter(|v| v.skipped)
            .map(|v| (v.flow.0, v.round))
            .collect();
        assert_eq!(skipped, vec![(0, 2)]);
    }
}
