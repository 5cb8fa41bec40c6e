//! Service records and the per-link trace they accumulate into.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Cycle, FlowId};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("record must span at least one cycle (start {start}, end {end})")]
    EmptyRecord { start: Cycle, end: Cycle },
    #[error("blocking {blocking} exceeds record span {span}")]
    BlockingExceedsSpan { blocking: u64, span: u64 },
    #[error("record starting at {start} overlaps previous record ending at {last_end}")]
    Overlap { start: Cycle, last_end: Cycle },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One transmission on an output link.
///
/// The channel is held over `[start, end)`. Of those cycles, `blocking` were
/// spent without the head flit advancing; the rest moved one unit each.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceRecord {
    pub flow: FlowId,
    pub round: u64,
    pub start: Cycle,
    pub end: Cycle,
    pub sent_units: u64,
    pub blocking: u64,
}

impl ServiceRecord {
    pub fn new(
        flow: FlowId,
        round: u64,
        start: Cycle,
        end: Cycle,
        sent_units: u64,
        blocking: u64,
    ) -> Result<Self, TraceError> {
        if end <= start {
            return Err(TraceError::EmptyRecord { start, end });
        }
        if blocking > end - start {
            return Err(TraceError::BlockingExceedsSpan {
                blocking,
                span: end - start,
            });
        }
        Ok(Self {
            flow,
            round,
            start,
            end,
            sent_units,
            blocking,
        })
    }

    /// Cycles the channel was held: sending plus blocking.
    pub fn occupation(&self) -> u64 {
        self.end - self.start
    }

    pub fn sending(&self) -> u64 {
        self.occupation() - self.blocking
    }

    /// Occupation over sending time; 1.0 for a blocking-free record.
    pub fn occupation_ratio(&self) -> f64 {
        let sending = self.sending();
        if sending == 0 {
            f64::INFINITY
        } else {
            self.occupation() as f64 / sending as f64
        }
    }

    fn overlap(&self, t1: Cycle, t2: Cycle) -> u64 {
        let lo = self.start.max(t1);
        let hi = self.end.min(t2);
        hi.saturating_sub(lo)
    }

    /// Units of this record falling inside `[t1, t2)`, prorated linearly over
    /// the record's span.
    pub fn sent_within(&self, t1: Cycle, t2: Cycle) -> f64 {
        let ov = self.overlap(t1, t2);
        if ov == self.occupation() {
            self.sent_units as f64
        } else {
            self.sent_units as f64 * ov as f64 / self.occupation() as f64
        }
    }

    pub fn occupation_within(&self, t1: Cycle, t2: Cycle) -> u64 {
        self.overlap(t1, t2)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PacketEventKind {
    Inject,
    Deliver,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketEvent {
    pub packet: u64,
    pub flow: FlowId,
    pub cycle: Cycle,
    pub kind: PacketEventKind,
}

/// Service history of a single output link.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    records: Vec<ServiceRecord>,
    events: Vec<PacketEvent>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: Vec<ServiceRecord>) -> Result<Self, TraceError> {
        let mut trace = Self::new();
        for rec in records {
            trace.record_service(rec)?;
        }
        Ok(trace)
    }

    /// Append a record. Records on one link must not overlap in time.
    pub fn record_service(&mut self, rec: ServiceRecord) -> Result<(), TraceError> {
        if rec.end <= rec.start {
            return Err(TraceError::EmptyRecord {
                start: rec.start,
                end: rec.end,
            });
        }
        if let Some(last) = self.records.last() {
            if rec.start < last.end {
                return Err(TraceError::Overlap {
                    start: rec.start,
                    last_end: last.end,
                });
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn record_event(&mut self, ev: PacketEvent) {
        self.events.push(ev);
    }

    pub fn records(&self) -> &[ServiceRecord] {
        &self.records
    }

    pub fn events(&self) -> &[PacketEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// End of the last record, or 0.
    pub fn horizon(&self) -> Cycle {
        self.records.last().map_or(0, |r| r.end)
    }

    /// Flows that appear in at least one record, ascending.
    pub fn flows(&self) -> Vec<FlowId> {
        let mut flows: Vec<FlowId> = self.records.iter().map(|r| r.flow).collect();
        flows.sort_unstable();
        flows.dedup();
        flows
    }

    /// Units `flow` sent inside `[t1, t2)`. Records straddling a boundary
    /// contribute in proportion to the part of their span inside the window.
    pub fn sent_in_interval(&self, flow: FlowId, t1: Cycle, t2: Cycle) -> f64 {
        self.overlapping(t1, t2)
            .filter(|r| r.flow == flow)
            .map(|r| r.sent_within(t1, t2))
            .sum()
    }

    /// Cycles `flow` held the link inside `[t1, t2)`.
    pub fn occupation_in_interval(&self, flow: FlowId, t1: Cycle, t2: Cycle) -> u64 {
        self.overlapping(t1, t2)
            .filter(|r| r.flow == flow)
            .map(|r| r.occupation_within(t1, t2))
            .sum()
    }

    fn overlapping(&self, t1: Cycle, t2: Cycle) -> impl Iterator<Item = &ServiceRecord> {
        // records are sorted and disjoint, so ends are sorted too
        let first = self.records.partition_point(|r| r.end <= t1);
        self.records[first..]
            .iter()
            .take_while(move |r| r.start < t2)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), TraceError> {
        let mut wtr = csv::Writer::from_writer(w);
        if self.records.is_empty() {
            wtr.write_record(["flow", "round", "start", "end", "sent_units", "blocking"])?;
        }
        for rec in &self.records {
            wtr.serialize(rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, TraceError> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut trace = Self::new();
        for rec in rdr.deserialize() {
            trace.record_service(rec?)?;
        }
        Ok(trace)
    }

    /// Records as a JSON array, field names as in the CSV header.
    pub fn to_json(&self) -> Result<String, TraceError> {
        Ok(serde_json::to_string(&self.records)?)
    }

    pub fn from_json(s: &str) -> Result<Self, TraceError> {
        let records: Vec<ServiceRecord> = serde_json::from_str(s)?;
        Self::from_records(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(flow: u32, start: Cycle, end: Cycle, sent: u64, blocking: u64) -> ServiceRecord {
        ServiceRecord::new(FlowId(flow), 0, start, end, sent, blocking).unwrap()
    }

    #[test]
    fn append_to_empty() {
        let mut t = Trace::new();
        t.record_service(rec(0, 0, 4, 4, 0)).unwrap();
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn adjacent_records_do_not_overlap() {
        let mut t = Trace::new();
        t.record_service(rec(0, 6, 10, 4, 0)).unwrap();
        t.record_service(rec(1, 10, 12, 2, 0)).unwrap();
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn overlap_is_rejected() {
        let mut t = Trace::new();
        t.record_service(rec(0, 6, 10, 4, 0)).unwrap();
        let err = t.record_service(rec(1, 9, 12, 3, 0)).unwrap_err();
        assert!(matches!(
            err,
            TraceError::Overlap {
                start: 9,
                last_end: 10
            }
        ));
        assert_eq!(t.len(), 1);
    }

    #[test]
    fn malformed_records() {
        assert!(ServiceRecord::new(FlowId(0), 0, 5, 5, 0, 0).is_err());
        assert!(ServiceRecord::new(FlowId(0), 0, 5, 7, 1, 3).is_err());
    }

    #[test]
    fn contained_record_counts_fully() {
        let t = Trace::from_records(vec![rec(0, 100, 200, 100, 0)]).unwrap();
        assert_eq!(t.sent_in_interval(FlowId(0), 0, 1000), 100.0);
        assert_eq!(t.sent_in_interval(FlowId(1), 0, 1000), 0.0);
        assert_eq!(t.sent_in_interval(FlowId(0), 300, 1000), 0.0);
    }

    #[test]
    fn straddling_record_is_prorated() {
        // 10 of the 20 cycles of (90,110) fall inside (0,100)
        let t = Trace::from_records(vec![rec(0, 90, 110, 20, 0)]).unwrap();
        assert_eq!(t.sent_in_interval(FlowId(0), 0, 100), 10.0);
        assert_eq!(t.sent_in_interval(FlowId(0), 100, 200), 10.0);
        assert_eq!(t.occupation_in_interval(FlowId(0), 0, 100), 10);
    }

    #[test]
    fn occupation_counts_blocking() {
        let r = rec(0, 0, 10, 4, 6);
        assert_eq!(r.sending(), 4);
        assert_eq!(r.occupation(), 10);
        assert_eq!(r.occupation_ratio(), 2.5);
    }

    #[test]
    fn csv_has_expected_header() {
        let t = Trace::from_records(vec![rec(1, 0, 4, 4, 0), rec(0, 4, 9, 3, 2)]).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("flow,round,start,end,sent_units,blocking\n"));
        assert!(text.contains("0,0,4,9,3,2"));
        let back = Trace::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.records(), t.records());
    }

    #[test]
    fn empty_csv_still_has_header() {
        let mut buf = Vec::new();
        Trace::new().write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "flow,round,start,end,sent_units,blocking\n"
        );
    }

    fn arb_trace() -> impl Strategy<Value = Trace> {
        prop::collection::vec((0u32..3, 0u64..5, 1u64..12, 0u64..12), 1..30).prop_map(|parts| {
            let mut t = Trace::new();
            let mut now = 0;
            for (flow, gap, sent, blocking) in parts {
                let start = now + gap;
                let end = start + sent + blocking;
                t.record_service(rec(flow, start, end, sent, blocking))
                    .unwrap();
                now = end;
            }
            t
        })
    }

    proptest! {
        #[test]
        fn interval_additivity(t in arb_trace(), a in 0u64..400, b in 0u64..400, c in 0u64..400) {
            let mut v = [a, b, c];
            v.sort_unstable();
            let [t1, t2, t3] = v;
            prop_assume!(t1 < t2 && t2 < t3);
            for f in 0..3 {
                let f = FlowId(f);
                let whole = t.sent_in_interval(f, t1, t3);
                let parts = t.sent_in_interval(f, t1, t2) + t.sent_in_interval(f, t2, t3);
                prop_assert!((whole - parts).abs() < 1e-9);
                prop_assert_eq!(
                    t.occupation_in_interval(f, t1, t3),
                    t.occupation_in_interval(f, t1, t2) + t.occupation_in_interval(f, t2, t3)
                );
            }
        }

        #[test]
        fn no_proration_loss_over_horizon(t in arb_trace()) {
            let total: u64 = t.records().iter().map(|r| r.sent_units).sum();
            let measured: f64 = t.flows().into_iter()
                .map(|f| t.sent_in_interval(f, 0, t.horizon()))
                .sum();
            prop_assert!((measured - total as f64).abs() < 1e-9);
        }

        #[test]
        fn json_round_trip(t in arb_trace()) {
            let back = Trace::from_json(&t.to_json().unwrap()).unwrap();
            prop_assert_eq!(back.records(), t.records());
        }
    }
}
