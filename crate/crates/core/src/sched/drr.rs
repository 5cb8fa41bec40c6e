use super::{
    slot, FlowQueues, FlowSnapshot, Outcome, Rounds, SchedError, Scheduler, SchedulerKind,
    SchedulerParams, Selection, Visit,
};
use crate::model::{Accounting, FlowId, Packet};

#[derive(Debug, Default, Clone)]
struct DrrFlow {
    deficit: i64,
    quantum: u64,
    active: bool,
}

/// Deficit round robin.
///
/// On each visit the flow's deficit counter grows by its quantum and head
/// packets are sent while `size <= deficit`. The residual carries over while
/// the flow stays backlogged and is zeroed once its queue empties.
///
/// Charges are applied at completion. Under occupation accounting the charge
/// can exceed the size that passed the send test, so the deficit may go
/// negative; the debt is repaid from later quanta.
#[derive(Debug)]
pub struct Drr {
    queues: FlowQueues,
    flows: Vec<DrrFlow>,
    params: SchedulerParams,
    rounds: Rounds,
    current: Option<Visit>,
    outstanding: bool,
    log: Option<Vec<Visit>>,
}

impl Drr {
    pub fn new(params: &SchedulerParams) -> Result<Self, SchedError> {
        if params.quantum == 0 {
            return Err(SchedError::ZeroQuantum);
        }
        Ok(Self {
            queues: FlowQueues::new(params.queue_capacity),
            flows: Vec::new(),
            params: params.clone(),
            rounds: Rounds::default(),
            current: None,
            outstanding: false,
            log: None,
        })
    }

    fn end_visit(&mut self, keep: bool) {
        let mut visit = self.current.take().expect("visit in progress");
        let f = &mut self.flows[visit.flow.index()];
        if !keep {
            f.deficit = 0;
            f.active = false;
        }
        visit.deficit_after = Some(f.deficit);
        self.rounds.end_visit(visit.flow, keep);
        if let Some(log) = self.log.as_mut() {
            log.push(visit);
        }
    }
}

impl Scheduler for Drr {
    fn kind(&self) -> SchedulerKind {
        SchedulerKind::Drr
    }

    fn accounting(&self) -> Accounting {
        self.params.accounting
    }

    fn enqueue(&mut self, packet: Packet) -> Result<(), Packet> {
        let flow = packet.flow;
        self.queues.push(packet)?;
        let quantum = self.params.flow_quantum(flow);
        let f = slot(&mut self.flows, flow);
        f.quantum = quantum;
        if !f.active {
            f.active = true;
            self.rounds.active.push_back(flow);
        }
        Ok(())
    }

    fn select(&mut self) -> Option<Selection> {
        debug_assert!(!self.outstanding, "select with a packet outstanding");
        loop {
            match self.current.as_ref().map(|v| v.flow) {
                Some(flow) => {
                    let deficit = self.flows[flow.index()].deficit;
                    match self.queues.front(flow) {
                        Some(head) if i64::from(head.size) <= deficit => {
                            let packet = self.queues.pop(flow).expect("head exists");
                            self.outstanding = true;
                            return Some(Selection {
                                packet,
                                round: self.rounds.round,
                            });
                        }
                        Some(_) => self.end_visit(true),
                        None => self.end_visit(false),
                    }
                }
                None => {
                    let (flow, _) = self.rounds.begin_visit()?;
                    let f = &mut self.flows[flow.index()];
                    f.deficit += f.quantum as i64;
                    self.current = Some(Visit::new(flow, self.rounds.round));
                }
            }
        }
    }

    fn complete(&mut self, outcome: Outcome) {
        debug_assert!(self.outstanding, "complete without select");
        self.outstanding = false;
        let units = outcome.units(self.params.accounting);
        self.flows[outcome.flow.index()].deficit -= units as i64;
        if let Some(v) = self.current.as_mut() {
            v.packets += 1;
            v.units += units;
        }
        if self.queues.is_empty(outcome.flow) {
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
        let f = self.flows.get(flow.index()).cloned().unwrap_or_default();
        FlowSnapshot {
            queued: self.queues.len(flow),
            active: f.active,
            deficit: Some(f.deficit),
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

    fn drr(quantum: u64) -> Drr {
        Drr::new(&SchedulerParams::new(SchedulerKind::Drr).with_quantum(quantum)).unwrap()
    }

    fn serve(s: &mut Drr, sel: &Selection) {
        let size = sel.packet.size as u64;
        s.complete(Outcome {
            flow: sel.packet.flow,
            sent: size,
            occupation: size,
        });
    }

    #[test]
    fn large_packet_waits_for_second_visit() {
        // Q=500, queue=[800]: first visit sends nothing and leaves DC=500,
        // the second sends 800 leaving 200, then the empty queue resets DC.
        let mut s = drr(500);
        s.log_visits(true);
        s.enqueue(pkt(0, 0, 800)).unwrap();
        let sel = s.select().unwrap();
        let visits = s.take_visits();
        assert_eq!(visits.len(), 1);
        assert_eq!(visits[0].packets, 0);
        assert_eq!(visits[0].deficit_after, Some(500));
        assert_eq!(s.flow_state(FlowId(0)).deficit, Some(1000));
        serve(&mut s, &sel);
        let visits = s.take_visits();
        assert_eq!(visits[0].packets, 1);
        assert_eq!(visits[0].units, 800);
        // residual 200 is discarded because the queue emptied
        assert_eq!(visits[0].deficit_after, Some(0));
        let st = s.flow_state(FlowId(0));
        assert!(!st.active);
        assert_eq!(st.deficit, Some(0));
    }

    #[test]
    fn deficit_carries_residual_while_backlogged() {
        let mut s = drr(500);
        s.enqueue(pkt(0, 0, 800)).unwrap();
        s.enqueue(pkt(1, 0, 800)).unwrap();
        let sel = s.select().unwrap();
        serve(&mut s, &sel);
        // 1000 - 800 = 200 carried; next packet needs 800
        assert_eq!(s.flow_state(FlowId(0)).deficit, Some(200));
    }

    #[test]
    fn small_packets_share_one_visit() {
        let mut s = drr(500);
        s.log_visits(true);
        s.enqueue(pkt(0, 0, 200)).unwrap();
        s.enqueue(pkt(1, 0, 300)).unwrap();
        assert_eq!(drain(&mut s), vec![(0, 200), (0, 300)]);
        let visits = s.take_visits();
        assert_eq!(visits.len(), 1);
        assert_eq!(visits[0].packets, 2);
        assert_eq!(visits[0].deficit_after, Some(0));
    }

    #[test]
    fn exact_quantum_packet_is_sent() {
        let mut s = drr(500);
        s.log_visits(true);
        s.enqueue(pkt(0, 0, 500)).unwrap();
        assert_eq!(drain(&mut s), vec![(0, 500)]);
        assert_eq!(s.take_visits().len(), 1);
    }

    #[test]
    fn zero_quantum_is_a_configuration_error() {
        let err = Drr::new(&SchedulerParams::new(SchedulerKind::Drr).with_quantum(0)).unwrap_err();
        assert_eq!(err, SchedError::ZeroQuantum);
    }

    #[test]
    fn weighted_quanta() {
        let params = SchedulerParams::new(SchedulerKind::Drr)
            .with_quantum(4)
            .with_weights(vec![1.0, 2.0]);
        let mut s = Drr::new(&params).unwrap();
        for i in 0..12 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
            s.enqueue(pkt(100 + i, 1, 4)).unwrap();
        }
        let order: Vec<u32> = drain(&mut s).into_iter().take(9).map(|(f, _)| f).collect();
        assert_eq!(order, vec![0, 1, 1, 0, 1, 1, 0, 1, 1]);
    }
}
