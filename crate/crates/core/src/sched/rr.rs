use super::{
    slot, FlowQueues, FlowSnapshot, Outcome, Rounds, Scheduler, SchedulerKind, SchedulerParams,
    Selection, Visit,
};
use crate::model::{Accounting, FlowId, Packet};

/// Plain packet round robin: one whole packet per visit, cyclic order over
/// backlogged flows.
#[derive(Debug)]
pub struct RoundRobin {
    queues: FlowQueues,
    active: Vec<bool>,
    rounds: Rounds,
    accounting: Accounting,
    current: Option<Visit>,
    log: Option<Vec<Visit>>,
}

impl RoundRobin {
    pub fn new(params: &SchedulerParams) -> Self {
        Self {
            queues: FlowQueues::new(params.queue_capacity),
            active: Vec::new(),
            rounds: Rounds::default(),
            accounting: params.accounting,
            current: None,
            log: None,
        }
    }
}

impl Scheduler for RoundRobin {
    fn kind(&self) -> SchedulerKind {
        SchedulerKind::Rr
    }

    fn accounting(&self) -> Accounting {
        self.accounting
    }

    fn enqueue(&mut self, packet: Packet) -> Result<(), Packet> {
        let flow = packet.flow;
        self.queues.push(packet)?;
        let active = slot(&mut self.active, flow);
        if !*active {
            *active = true;
            self.rounds.active.push_back(flow);
        }
        Ok(())
    }

    fn select(&mut self) -> Option<Selection> {
        debug_assert!(self.current.is_none(), "select with a packet outstanding");
        let (flow, _) = self.rounds.begin_visit()?;
        let packet = self.queues.pop(flow).expect("active flow has a packet");
        self.current = Some(Visit::new(flow, self.rounds.round));
        Some(Selection {
            packet,
            round: self.rounds.round,
        })
    }

    fn complete(&mut self, outcome: Outcome) {
        let mut visit = self.current.take().expect("complete without select");
        debug_assert_eq!(visit.flow, outcome.flow);
        visit.packets = 1;
        visit.units = outcome.units(self.accounting);
        let keep = !self.queues.is_empty(outcome.flow);
        if !keep {
            self.active[outcome.flow.index()] = false;
        }
        self.rounds.end_visit(outcome.flow, keep);
        if let Some(log) = self.log.as_mut() {
            log.push(visit);
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
        FlowSnapshot {
            queued: self.queues.len(flow),
            active: self.active.get(flow.index()).copied().unwrap_or(false),
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

    fn rr() -> RoundRobin {
        RoundRobin::new(&SchedulerParams::new(SchedulerKind::Rr))
    }

    #[test]
    fn alternates_between_backlogged_flows() {
        let mut s = rr();
        for i in 0..3 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
            s.enqueue(pkt(10 + i, 1, 2)).unwrap();
        }
        let order: Vec<u32> = drain(&mut s).into_iter().map(|(f, _)| f).collect();
        assert_eq!(order, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn idle_flow_is_skipped() {
        let mut s = rr();
        for i in 0..3 {
            s.enqueue(pkt(i, 0, 4)).unwrap();
        }
        let order: Vec<u32> = drain(&mut s).into_iter().map(|(f, _)| f).collect();
        assert_eq!(order, vec![0, 0, 0]);
    }

    #[test]
    fn reactivated_flow_served_after_pointer_passes() {
        let mut s = rr();
        for i in 0..4 {
            s.enqueue(pkt(i, 0, 1)).unwrap();
        }
        let sel = s.select().unwrap();
        s.enqueue(pkt(99, 1, 1)).unwrap();
        s.complete(Outcome {
            flow: sel.packet.flow,
            sent: 1,
            occupation: 1,
        });
        let order: Vec<u32> = drain(&mut s).into_iter().map(|(f, _)| f).collect();
        assert_eq!(order, vec![1, 0, 0, 0]);
    }
}
