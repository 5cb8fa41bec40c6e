//! Fairness measurement over a link trace.
//!
//! `FM(t1, t2)` is the largest difference in normalised service
//! (`service_i / f_i`) between two flows that were both backlogged for the
//! whole window. The Relative Fairness Bound counts service as units sent;
//! the Channel Fairness Bound counts it as cycles the channel was held,
//! sending plus blocking. Both bounds are suprema over all windows and all
//! executions. Here they are estimated from one trace by sweeping every
//! window on a grid; `FM` is piecewise linear between record boundaries, so
//! the boundary grid already attains the supremum for that trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Accounting, Cycle, FlowId};
use crate::sched::link::OccupancyEvent;
use crate::trace::Trace;

#[derive(Debug, Error, PartialEq)]
pub enum FairnessError {
    #[error("flow weight must be positive, got {0}")]
    InvalidWeight(f64),
    #[error("interval must satisfy t1 < t2, got ({t1}, {t2})")]
    InvalidInterval { t1: Cycle, t2: Cycle },
    #[error("occupancy events out of order at index {index}")]
    Unordered { index: usize },
    #[error("trace has no records")]
    EmptyTrace,
}

/// Flow shares `f_i`, indexed by flow; missing entries are 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Weights(pub Vec<f64>);

impl Weights {
    pub fn uniform() -> Self {
        Self::default()
    }

    pub fn get(&self, flow: FlowId) -> f64 {
        self.0.get(flow.index()).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<(), FairnessError> {
        match self.0.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            Some(&w) => Err(FairnessError::InvalidWeight(w)),
            None => Ok(()),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub start: Cycle,
    pub end: Cycle,
}

/// Maximal half-open intervals during which each flow's queue was non-empty.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BacklogIntervals {
    pub flows: BTreeMap<FlowId, Vec<Interval>>,
}

impl BacklogIntervals {
    pub fn intervals(&self, flow: FlowId) -> &[Interval] {
        self.flows.get(&flow).map_or(&[], Vec::as_slice)
    }

    /// Whether `flow` was backlogged throughout `[t1, t2)`.
    pub fn backlogged_throughout(&self, flow: FlowId, t1: Cycle, t2: Cycle) -> bool {
        let iv = self.intervals(flow);
        let i = iv.partition_point(|x| x.end <= t1);
        iv.get(i).is_some_and(|x| x.start <= t1 && x.end >= t2)
    }

    /// Treat every flow in `flows` as backlogged over `[0, horizon)`.
    pub fn always(flows: impl IntoIterator<Item = FlowId>, horizon: Cycle) -> Self {
        Self {
            flows: flows
                .into_iter()
                .map(|f| {
                    (
                        f,
                        vec![Interval {
                            start: 0,
                            end: horizon,
                        }],
                    )
                })
                .collect(),
        }
    }
}

/// Backlog intervals from a queue-length trajectory. Events at the same
/// cycle are applied together; intervals still open at the end close at
/// `horizon` (or the last event, if later).
pub fn backlog_intervals(
    events: &[OccupancyEvent],
    horizon: Cycle,
) -> Result<BacklogIntervals, FairnessError> {
    if let Some(i) = events.windows(2).position(|w| w[1].cycle < w[0].cycle) {
        return Err(FairnessError::Unordered { index: i + 1 });
    }
    let mut len: BTreeMap<FlowId, usize> = BTreeMap::new();
    let mut open: BTreeMap<FlowId, Cycle> = BTreeMap::new();
    let mut out = BacklogIntervals::default();
    let mut i = 0;
    while i < events.len() {
        let cycle = events[i].cycle;
        let mut touched = Vec::new();
        while i < events.len() && events[i].cycle == cycle {
            let e = events[i];
            let before = *len.get(&e.flow).unwrap_or(&0);
            if !touched.iter().any(|(f, _)| *f == e.flow) {
                touched.push((e.flow, before));
            }
            len.insert(e.flow, e.len);
            i += 1;
        }
        for (flow, before) in touched {
            let after = len[&flow];
            out.flows.entry(flow).or_default();
            if before == 0 && after > 0 {
                open.insert(flow, cycle);
            } else if before > 0 && after == 0 {
                if let Some(start) = open.remove(&flow) {
                    if cycle > start {
                        out.flows
                            .get_mut(&flow)
                            .expect("entry created above")
                            .push(Interval { start, end: cycle });
                    }
                }
            }
        }
    }
    let last = events.last().map_or(0, |e| e.cycle);
    for (flow, start) in open {
        let end = horizon.max(last);
        if end > start {
            out.flows
                .entry(flow)
                .or_default()
                .push(Interval { start, end });
        }
    }
    Ok(out)
}

/// Service of `flow` in `[t1, t2)` divided by its share.
pub fn normalized_service(
    trace: &Trace,
    flow: FlowId,
    share: f64,
    t1: Cycle,
    t2: Cycle,
    mode: Accounting,
) -> Result<f64, FairnessError> {
    if !(share.is_finite() && share > 0.0) {
        return Err(FairnessError::InvalidWeight(share));
    }
    if t1 >= t2 {
        return Err(FairnessError::InvalidInterval { t1, t2 });
    }
    let service = match mode {
        Accounting::PacketSize => trace.sent_in_interval(flow, t1, t2),
        Accounting::ChannelOccupation => trace.occupation_in_interval(flow, t1, t2) as f64,
    };
    Ok(service / share)
}

/// `FM(t1, t2)`: max over pairs of flows backlogged throughout the window of
/// the absolute difference in normalised service; 0 with fewer than two.
pub fn fm_over_interval(
    trace: &Trace,
    backlogs: &BacklogIntervals,
    weights: &Weights,
    t1: Cycle,
    t2: Cycle,
    mode: Accounting,
) -> Result<f64, FairnessError> {
    if t1 >= t2 {
        return Err(FairnessError::InvalidInterval { t1, t2 });
    }
    weights.validate()?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut n = 0;
    for &flow in backlogs.flows.keys() {
        if backlogs.backlogged_throughout(flow, t1, t2) {
            let v = normalized_service(trace, flow, weights.get(flow), t1, t2, mode)?;
            lo = lo.min(v);
            hi = hi.max(v);
            n += 1;
        }
    }
    Ok(if n < 2 { 0.0 } else { hi - lo })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum WindowGrid {
    /// Every pair of record start/end times. When there are more than
    /// `max_points` distinct boundaries an evenly spaced subset is used.
    Boundaries { max_points: Option<usize> },
    /// Every pair of multiples of `step` up to the trace horizon.
    Uniform { step: Cycle },
    /// These windows only.
    Explicit { windows: Vec<(Cycle, Cycle)> },
}

impl Default for WindowGrid {
    fn default() -> Self {
        WindowGrid::Boundaries { max_points: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanOptions {
    pub grid: WindowGrid,
    /// Keep every window's FM (for CSV export); off keeps only the summary.
    pub keep_windows: bool,
    /// Number of equal-width window-length bins in the profile.
    pub bins: usize,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            grid: WindowGrid::default(),
            keep_windows: false,
            bins: 20,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowFm {
    pub t1: Cycle,
    pub t2: Cycle,
    pub fm: f64,
}

/// Largest FM among windows whose length falls in `[lo, hi)`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: f64,
    pub hi: f64,
    pub windows: u64,
    pub max_fm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowScan {
    pub mode: Accounting,
    /// Max FM over all scanned windows: an empirical lower bound on the
    /// discipline's true bound.
    pub estimate: f64,
    pub argmax: Option<(Cycle, Cycle)>,
    pub windows_scanned: u64,
    /// Windows in which at least two flows were backlogged.
    pub windows_compared: u64,
    pub profile: Vec<LengthBin>,
    /// Least-squares slope of per-bin max FM against bin centre length,
    /// in units per cycle. Near zero when FM does not grow with the window.
    pub slope: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub windows: Vec<WindowFm>,
}

/// Sweep every window of the grid under one accounting.
pub fn rfb_estimate(
    trace: &Trace,
    backlogs: &BacklogIntervals,
    weights: &Weights,
    opts: &ScanOptions,
    mode: Accounting,
) -> Result<WindowScan, FairnessError> {
    if trace.is_empty() {
        return Err(FairnessError::EmptyTrace);
    }
    weights.validate()?;
    let mut acc = Accumulator::default();
    match &opts.grid {
        WindowGrid::Explicit { windows } => {
            for &(t1, t2) in windows {
                let fm = fm_over_interval(trace, backlogs, weights, t1, t2, mode)?;
                let pair = count_backlogged(backlogs, t1, t2) >= 2;
                acc.push(t1, t2, fm, pair, opts.keep_windows);
            }
        }
        grid => {
            let points = grid_points(trace, grid);
            sweep(
                trace,
                backlogs,
                weights,
                &points,
                mode,
                opts.keep_windows,
                &mut acc,
            );
        }
    }
    Ok(acc.finish(mode, opts.bins))
}

fn count_backlogged(backlogs: &BacklogIntervals, t1: Cycle, t2: Cycle) -> usize {
    backlogs
        .flows
        .keys()
        .filter(|&&f| backlogs.backlogged_throughout(f, t1, t2))
        .count()
}

fn grid_points(trace: &Trace, grid: &WindowGrid) -> Vec<Cycle> {
    match *grid {
        WindowGrid::Boundaries { max_points } => {
            let mut pts: Vec<Cycle> = trace
                .records()
                .iter()
                .flat_map(|r| [r.start, r.end])
                .collect();
            pts.sort_unstable();
            pts.dedup();
            match max_points {
                Some(m) if m >= 2 && pts.len() > m => {
                    let last = pts.len() - 1;
                    let mut thin: Vec<Cycle> = (0..m).map(|k| pts[k * last / (m - 1)]).collect();
                    thin.dedup();
                    thin
                }
                _ => pts,
            }
        }
        WindowGrid::Uniform { step } => {
            let step = step.max(1);
            let h = trace.horizon();
            let mut pts: Vec<Cycle> = (0..=h / step).map(|k| k * step).collect();
            if pts.last() != Some(&h) {
                pts.push(h);
            }
            pts
        }
        WindowGrid::Explicit { .. } => unreachable!("explicit windows are evaluated directly"),
    }
}

/// Cumulative service of each flow from cycle 0 up to each grid point.
fn cumulative(trace: &Trace, flow: FlowId, points: &[Cycle], mode: Accounting) -> Vec<f64> {
    let recs: Vec<_> = trace.records().iter().filter(|r| r.flow == flow).collect();
    let mut out = Vec::with_capacity(points.len());
    let mut idx = 0;
    let mut full = 0.0;
    for &t in points {
        while idx < recs.len() && recs[idx].end <= t {
            full += match mode {
                Accounting::PacketSize => recs[idx].sent_units as f64,
                Accounting::ChannelOccupation => recs[idx].occupation() as f64,
            };
            idx += 1;
        }
        let partial = match recs.get(idx) {
            Some(r) if r.start < t => match mode {
                Accounting::PacketSize => r.sent_within(r.start, t),
                Accounting::ChannelOccupation => r.occupation_within(r.start, t) as f64,
            },
            _ => 0.0,
        };
        out.push(full + partial);
    }
    out
}

fn sweep(
    trace: &Trace,
    backlogs: &BacklogIntervals,
    weights: &Weights,
    points: &[Cycle],
    mode: Accounting,
    keep: bool,
    acc: &mut Accumulator,
) {
    struct Column {
        share: f64,
        cum: Vec<f64>,
        // end of the backlog interval covering each point, or 0
        until: Vec<Cycle>,
    }
    let cols: Vec<Column> = backlogs
        .flows
        .iter()
        .map(|(&flow, ivs)| {
            let until = points
                .iter()
                .map(|&t| {
                    let i = ivs.partition_point(|x| x.end <= t);
                    ivs.get(i).filter(|x| x.start <= t).map_or(0, |x| x.end)
                })
                .collect();
            Column {
                share: weights.get(flow),
                cum: cumulative(trace, flow, points, mode),
                until,
            }
        })
        .collect();

    for a in 0..points.len() {
        for b in a + 1..points.len() {
            let (t1, t2) = (points[a], points[b]);
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            let mut n = 0;
            for c in &cols {
                if c.until[a] >= t2 {
                    let v = (c.cum[b] - c.cum[a]) / c.share;
                    lo = lo.min(v);
                    hi = hi.max(v);
                    n += 1;
                }
            }
            let fm = if n < 2 { 0.0 } else { hi - lo };
            acc.push(t1, t2, fm, n >= 2, keep);
        }
    }
}

#[derive(Default)]
struct Accumulator {
    best: Option<(f64, Cycle, Cycle)>,
    scanned: u64,
    compared: Vec<(Cycle, f64)>,
    windows: Vec<WindowFm>,
}

impl Accumulator {
    fn push(&mut self, t1: Cycle, t2: Cycle, fm: f64, pair: bool, keep: bool) {
        self.scanned += 1;
        if self.best.is_none_or(|(b, _, _)| fm > b) {
            self.best = Some((fm, t1, t2));
        }
        if pair {
            self.compared.push((t2 - t1, fm));
        }
        if keep {
            self.windows.push(WindowFm { t1, t2, fm });
        }
    }

    fn finish(self, mode: Accounting, bins: usize) -> WindowScan {
        let profile = length_profile(&self.compared, bins.max(1));
        let slope = ls_slope(
            &profile
                .iter()
                .filter(|b| b.windows > 0)
                .map(|b| ((b.lo + b.hi) / 2.0, b.max_fm))
                .collect::<Vec<_>>(),
        );
        WindowScan {
            mode,
            estimate: self.best.map_or(0.0, |b| b.0),
            argmax: self.best.filter(|b| b.0 > 0.0).map(|b| (b.1, b.2)),
            windows_scanned: self.scanned,
            windows_compared: self.compared.len() as u64,
            profile,
            slope,
            windows: self.windows,
        }
    }
}

fn length_profile(samples: &[(Cycle, f64)], bins: usize) -> Vec<LengthBin> {
    let Some(min) = samples.iter().map(|s| s.0).min() else {
        return Vec::new();
    };
    let max = samples.iter().map(|s| s.0).max().expect("non-empty");
    let lo = min as f64;
    let width = ((max - min) as f64 / bins as f64).max(f64::MIN_POSITIVE);
    let mut out: Vec<LengthBin> = (0..bins)
        .map(|k| LengthBin {
            lo: lo + k as f64 * width,
            hi: lo + (k + 1) as f64 * width,
            windows: 0,
            max_fm: 0.0,
        })
        .collect();
    for &(len, fm) in samples {
        let k = (((len as f64 - lo) / width) as usize).min(bins - 1);
        out[k].windows += 1;
        out[k].max_fm = out[k].max_fm.max(fm);
    }
    out
}

/// Ordinary least-squares slope; 0 for fewer than two points.
pub fn ls_slope(points: &[(f64, f64)]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Both estimates over the same windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub grid: WindowGrid,
    pub rfb: WindowScan,
    pub cfb: WindowScan,
    pub backlogs: BacklogIntervals,
}

impl FairnessReport {
    pub fn compute(
        trace: &Trace,
        backlogs: &BacklogIntervals,
        weights: &Weights,
        opts: &ScanOptions,
    ) -> Result<Self, FairnessError> {
        Ok(Self {
            grid: opts.grid.clone(),
            rfb: rfb_estimate(trace, backlogs, weights, opts, Accounting::PacketSize)?,
            cfb: rfb_estimate(
                trace,
                backlogs,
                weights,
                opts,
                Accounting::ChannelOccupation,
            )?,
            backlogs: backlogs.clone(),
        })
    }

    pub fn rfb_estimate(&self) -> f64 {
        self.rfb.estimate
    }

    pub fn cfb_estimate(&self) -> f64 {
        self.cfb.estimate
    }

    /// `t1,t2,fm` rows for one accounting; empty unless windows were kept.
    pub fn windows_csv(&self, mode: Accounting) -> String {
        let scan = match mode {
            Accounting::PacketSize => &self.rfb,
            Accounting::ChannelOccupation => &self.cfb,
        };
        let mut s = String::from("t1,t2,fm\n");
        for w in &scan.windows {
            s.push_str(&format!("{},{},{}\n", w.t1, w.t2, w.fm));
        }
        s
    }
}
