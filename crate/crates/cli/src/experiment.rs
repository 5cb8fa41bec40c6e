//! Running experiments and collecting their artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fairmesh::analysis::{check_ratio_constraint, required_weights, Feasibility, RequiredWeights};
use fairmesh::arbitration::{grant_probabilistic, ArbError};
use fairmesh::fairness::{backlog_intervals, FairnessError, FairnessReport, Weights};
use fairmesh::mesh::{measure_sij, simulate, MeshError, SMatrix, SimReport};
use fairmesh::rng::SimRng;
use fairmesh::sched::link::{generate_arrivals, run_link_with_arrivals, FlowStats};
use fairmesh::sched::{SchedError, SchedulerParams};
use fairmesh::trace::{Trace, TraceError};
use fairmesh::Accounting;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, ExperimentKind, SCHEMA_VERSION};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Scheduler(#[from] SchedError),
    #[error(transparent)]
    Fairness(#[from] FairnessError),
    #[error(transparent)]
    Arbiter(#[from] ArbError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot read report {path}: {source}")]
    ReadReport {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed report: {0}")]
    Json(#[from] serde_json::Error),
}

impl RunError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshResult {
    pub sim: SimReport,
    pub s_matrix: SMatrix,
    pub feasibility: Feasibility,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub required_weights: Option<RequiredWeights>,
    /// Largest over smallest share among injecting sources.
    pub share_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerRun {
    pub label: String,
    pub params: SchedulerParams,
    pub flows: Vec<FlowStats>,
    pub idle_with_backlog: u64,
    pub fairness: FairnessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArbResult {
    pub weights: Vec<f64>,
    pub trials: u64,
    pub expected: Vec<f64>,
    pub observed: Vec<f64>,
    pub max_abs_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunResult {
    Mesh(Box<MeshResult>),
    Link(Vec<SchedulerRun>),
    Arbitration(ArbResult),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub result: RunResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub runs: Vec<SeedRun>,
}

impl Report {
    pub fn to_json(&self) -> Result<String, RunError> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn mesh(&self, i: usize) -> Option<&MeshResult> {
        match &self.runs.get(i)?.result {
            RunResult::Mesh(m) => Some(m),
            _ => None,
        }
    }

    pub fn link(&self, i: usize) -> Option<&[SchedulerRun]> {
        match &self.runs.get(i)?.result {
            RunResult::Link(l) => Some(l),
            _ => None,
        }
    }

    pub fn arbitration(&self, i: usize) -> Option<&ArbResult> {
        match &self.runs.get(i)?.result {
            RunResult::Arbitration(a) => Some(a),
            _ => None,
        }
    }
}

/// A finished experiment: the report plus extra files, in write order.
#[derive(Debug)]
pub struct Outcome {
    pub report: Report,
    pub artifacts: Vec<(String, String)>,
}

impl Outcome {
    /// Write `report.json` and every artifact into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>, RunError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| RunError::Write { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        let mut written = Vec::new();
        let files = std::iter::once(("report.json".to_string(), self.report.to_json()?))
            .chain(self.artifacts.iter().cloned());
        for (name, body) in files {
            let path = dir.join(&name);
            std::fs::write(&path, body).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn label(p: &SchedulerParams) -> String {
    match p.accounting {
        Accounting::PacketSize => p.kind.to_string(),
        Accounting::ChannelOccupation => format!("{}-cfb", p.kind),
    }
}

fn trace_csv(trace: &Trace) -> Result<String, RunError> {
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn run_mesh(cfg: &ExperimentConfig, seed: u64) -> Result<MeshResult, RunError> {
    let mut mesh = cfg.mesh.clone().expect("validated");
    mesh.seed = seed;
    let sim = simulate(&mesh)?;
    let s_matrix = measure_sij(&sim);
    let feasibility = check_ratio_constraint(&s_matrix, cfg.epsilon);
    let shares: Vec<f64> = sim.active_sources().iter().map(|s| s.share).collect();
    let lo = shares.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = shares.iter().copied().fold(0.0, f64::max);
    Ok(MeshResult {
        required_weights: required_weights(&s_matrix).ok(),
        share_spread: if lo > 0.0 { hi / lo } else { f64::INFINITY },
        sim,
        s_matrix,
        feasibility,
    })
}

fn run_link(
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Vec<SchedulerRun>, Vec<Trace>), RunError> {
    let mut link = cfg.link.clone().expect("validated");
    link.seed = seed;
    let arrivals = generate_arrivals(&link);
    let mut runs = Vec::new();
    let mut traces = Vec::new();
    for params in &cfg.schedulers {
        let run = run_link_with_arrivals(&link, params, &arrivals, false)?;
        let backlogs = backlog_intervals(&run.occupancy, run.end)?;
        let weights = Weights(params.weights.clone());
        let fairness = FairnessReport::compute(&run.trace, &backlogs, &weights, &cfg.fairness)?;
        runs.push(SchedulerRun {
            label: label(params),
            params: params.clone(),
            flows: run.flows,
            idle_with_backlog: run.idle_with_backlog,
            fairness,
        });
        traces.push(run.trace);
    }
    Ok((runs, traces))
}

fn run_arb(cfg: &ExperimentConfig, seed: u64) -> Result<ArbResult, RunError> {
    let arb = cfg.arbitration.as_ref().expect("validated");
    let total: f64 = arb.weights.iter().sum();
    let expected: Vec<f64> = arb.weights.iter().map(|w| w / total).collect();
    let mut counts = vec![0u64; arb.weights.len()];
    let mut rng = SimRng::new(seed);
    for _ in 0..arb.trials {
        counts[grant_probabilistic(&arb.weights, &mut rng)?] += 1;
    }
    let observed: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 / arb.trials as f64)
        .collect();
    let max_abs_deviation = observed
        .iter()
        .zip(&expected)
        .map(|(o, e)| (o - e).abs())
        .fold(0.0, f64::max);
    Ok(ArbResult {
        weights: arb.weights.clone(),
        trials: arb.trials,
        expected,
        observed,
        max_abs_deviation,
    })
}

enum Raw {
    Mesh(Box<MeshResult>),
    Link(Vec<SchedulerRun>, Vec<Trace>),
    Arb(ArbResult),
}

/// Run every seed of `cfg` (seeds in parallel, each run single-threaded)
/// and collect the report and per-kind CSVs. Files come from the first
/// seed; the report covers all of them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Outcome, RunError> {
    cfg.validate()?;
    let seeds = cfg.run_seeds();
    let raw: Vec<Raw> = seeds
        .par_iter()
        .map(|&seed| -> Result<Raw, RunError> {
            Ok(match cfg.kind {
                ExperimentKind::MeshHotspot | ExperimentKind::SRatioFeasibility => {
                    Raw::Mesh(Box::new(run_mesh(cfg, seed)?))
                }
                ExperimentKind::StandaloneScheduler | ExperimentKind::RfbVsCfbPathology => {
                    let (runs, traces) = run_link(cfg, seed)?;
                    Raw::Link(runs, traces)
                }
                ExperimentKind::ArbConvergence => Raw::Arb(run_arb(cfg, seed)?),
            })
        })
        .collect::<Result<_, _>>()?;

    let mut artifacts = Vec::new();
    let mut runs = Vec::new();
    for (i, (seed, r)) in seeds.iter().zip(raw).enumerate() {
        let first = i == 0;
        let result = match r {
            Raw::Mesh(m) => {
                if first {
                    mesh_artifacts(cfg, &m, &mut artifacts)?;
                }
                RunResult::Mesh(m)
            }
            Raw::Link(mut sruns, traces) => {
                if first {
                    link_artifacts(&mut sruns, &traces, &mut artifacts)?;
                }
                for s in &mut sruns {
                    s.fairness.rfb.windows.clear();
                    s.fairness.cfb.windows.clear();
                }
                RunResult::Link(sruns)
            }
            Raw::Arb(a) => RunResult::Arbitration(a),
        };
        runs.push(SeedRun {
            seed: *seed,
            result,
        });
    }
    let report = Report {
        schema_version: SCHEMA_VERSION,
        kind: cfg.kind,
        config: cfg.clone(),
        runs,
    };
    if cfg.kind == ExperimentKind::ArbConvergence {
        artifacts.push(("frequencies.csv".into(), frequencies_csv(&report)));
    }
    Ok(Outcome { report, artifacts })
}

fn mesh_artifacts(
    cfg: &ExperimentConfig,
    m: &MeshResult,
    out: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    out.push(("trace.csv".into(), trace_csv(&m.sim.trace)?));
    out.push(("shares.csv".into(), m.sim.shares_csv()));
    let mut s = String::from("flow,router,s\n");
    for (f, row) in m.s_matrix.values.iter().enumerate() {
        for (r, v) in row.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "{f},{r},{v}");
            }
        }
    }
    out.push(("s_matrix.csv".into(), s));
    if cfg.kind == ExperimentKind::SRatioFeasibility {
        let body =
            serde_json::to_string_pretty(&FeasibilityFile::from_result(m, cfg.epsilon))? + "\n";
        out.push(("feasibility.json".into(), body));
    }
    Ok(())
}

fn link_artifacts(
    runs: &mut [SchedulerRun],
    traces: &[Trace],
    out: &mut Vec<(String, String)>,
) -> Result<(), RunError> {
    if let Some(t) = traces.first() {
        out.push(("trace.csv".into(), trace_csv(t)?));
    }
    let mut profile = String::from("scheduler,mode,lo,hi,windows,max_fm\n");
    for (i, (run, trace)) in runs.iter().zip(traces).enumerate() {
        let tag = format!("{i}-{}", run.label);
        if runs.len() > 1 {
            out.push((format!("trace_{tag}.csv"), trace_csv(trace)?));
        }
        for (mode, name) in [
            (Accounting::PacketSize, "rfb"),
            (Accounting::ChannelOccupation, "cfb"),
        ] {
            let scan = match mode {
                Accounting::PacketSize => &run.fairness.rfb,
                Accounting::ChannelOccupation => &run.fairness.cfb,
            };
            for b in &scan.profile {
                let _ = writeln!(
                    profile,
                    "{},{name},{},{},{},{}",
                    run.label, b.lo, b.hi, b.windows, b.max_fm
                );
            }
            if !scan.windows.is_empty() {
                out.push((
                    format!("fm_{tag}_{name}.csv"),
                    run.fairness.windows_csv(mode),
                ));
            }
        }
    }
    out.push(("fm_profile.csv".into(), profile));
    Ok(())
}

fn frequencies_csv(report: &Report) -> String {
    let mut s = String::from("seed,index,weight,expected,observed\n");
    for run in &report.runs {
        if let RunResult::Arbitration(a) = &run.result {
            for (i, w) in a.weights.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{i},{w},{},{}",
                    run.seed, a.expected[i], a.observed[i]
                );
            }
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityFile {
    pub epsilon: f64,
    pub feasibility: Feasibility,
    pub required_weights: Option<RequiredWeights>,
    pub s_matrix: SMatrix,
}

impl FeasibilityFile {
    fn from_result(m: &MeshResult, epsilon: f64) -> Self {
        Self {
            epsilon,
            feasibility: check_ratio_constraint(&m.s_matrix, epsilon),
            required_weights: m.required_weights,
            s_matrix: m.s_matrix.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub index: usize,
    pub scheduler: String,
    pub flow: u32,
    pub throughput: f64,
    pub mean_latency: f64,
    pub fm_rfb: f64,
    pub fm_cfb: f64,
}

/// Run each listed scheduler on the same arrivals and tabulate per-flow
/// throughput, latency and both FM estimates.
pub fn compare_schedulers(
    cfg: &ExperimentConfig,
) -> Result<(Outcome, Vec<ComparisonRow>), RunError> {
    if !matches!(
        cfg.kind,
        ExperimentKind::StandaloneScheduler | ExperimentKind::RfbVsCfbPathology
    ) {
        return Err(ConfigError::Invalid {
            key: "kind",
            msg: format!("compare needs a link experiment, got {}", cfg.kind),
        }
        .into());
    }
    if cfg.schedulers.len() < 2 {
        return Err(ConfigError::Invalid {
            key: "schedulers",
            msg: "compare needs at least two schedulers".into(),
        }
        .into());
    }
    let mut outcome = run_experiment(cfg)?;
    let mut rows = Vec::new();
    for run in &outcome.report.runs {
        if let RunResult::Link(sruns) = &run.result {
            for (index, s) in sruns.iter().enumerate() {
                for f in &s.flows {
                    rows.push(ComparisonRow {
                        seed: run.seed,
                        index,
                        scheduler: s.label.clone(),
                        flow: f.flow.0,
                        throughput: f.throughput,
                        mean_latency: f.mean_latency,
                        fm_rfb: s.fairness.rfb_estimate(),
                        fm_cfb: s.fairness.cfb_estimate(),
                    });
                }
            }
        }
    }
    let mut csv = String::from("seed,index,scheduler,flow,throughput,mean_latency,fm_rfb,fm_cfb\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            r.seed, r.index, r.scheduler, r.flow, r.throughput, r.mean_latency, r.fm_rfb, r.fm_cfb
        );
    }
    outcome.artifacts.push(("comparison.csv".into(), csv));
    Ok((outcome, rows))
}

/// Summary of a stored report: S-matrix feasibility for mesh runs, FM
/// estimates for link runs, frequencies for arbitration runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub kind: ExperimentKind,
    pub epsilon: f64,
    pub runs: Vec<AnalysisEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnalysisEntry {
    Mesh {
        seed: u64,
        shares: Vec<f64>,
        share_spread: f64,
        feasibility: Feasibility,
        required_weights: Option<RequiredWeights>,
    },
    Link {
        seed: u64,
        scheduler: String,
        fm_rfb: f64,
        fm_cfb: f64,
        rfb_slope: f64,
        cfb_slope: f64,
    },
    Arbitration {
        seed: u64,
        max_abs_deviation: f64,
    },
}

pub fn analyze_report(path: &Path, epsilon: Option<f64>) -> Result<Analysis, RunError> {
    let text = std::fs::read_to_string(path).map_err(|source| RunError::ReadReport {
        path: path.to_path_buf(),
        source,
    })?;
    let report: Report = serde_json::from_str(&text)?;
    let epsilon = epsilon.unwrap_or(report.config.epsilon);
    let mut runs = Vec::new();
    for run in &report.runs {
        match &run.result {
            RunResult::Mesh(m) => runs.push(AnalysisEntry::Mesh {
                seed: run.seed,
                shares: m.sim.active_sources().iter().map(|s| s.share).collect(),
                share_spread: m.share_spread,
                feasibility: check_ratio_constraint(&m.s_matrix, epsilon),
                required_weights: required_weights(&m.s_matrix).ok(),
            }),
            RunResult::Link(sruns) => {
                for s in sruns {
                    runs.push(AnalysisEntry::Link {
                        seed: run.seed,
                        scheduler: s.label.clone(),
                        fm_rfb: s.fairness.rfb_estimate(),
                        fm_cfb: s.fairness.cfb_estimate(),
                        rfb_slope: s.fairness.rfb.slope,
                        cfb_slope: s.fairness.cfb.slope,
                    });
                }
            }
            RunResult::Arbitration(a) => runs.push(AnalysisEntry::Arbitration {
                seed: run.seed,
                max_abs_deviation: a.max_abs_deviation,
            }),
        }
    }
    Ok(Analysis {
        kind: report.kind,
        epsilon,
        runs,
    })
}

impl std::fmt::Display for Analysis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{} report, epsilon {}", self.kind, self.epsilon)?;
        for e in &self.runs {
            match e {
                AnalysisEntry::Mesh {
                    seed,
                    shares,
                    share_spread,
                    feasibility,
                    ..
                } => {
                    let sh: Vec<String> = shares.iter().map(|s| format!("{s:.4}")).collect();
                    writeln!(f, "seed {seed}: shares [{}], max/min {share_spread:.2}", sh.join(", "))?;
                    let verdict = if feasibility.vacuous {
                        "vacuously feasible"
                    } else if feasibility.feasible {
                        "feasible"
                    } else {
                        "infeasible"
                    };
                    write!(f, "  S-ratio constraint: {verdict}, max deviation {:.4}", feasibility.max_deviation)?;
                    if let Some(w) = feasibility.witness {
                        write!(
                            f,
                            " at flows ({}, {}) routers ({}, {}): {:.4} vs {:.4}",
                            w.m, w.n, w.k, w.t, w.ratio_k, w.ratio_t
                        )?;
                    }
                    writeln!(f)?;
                }
                AnalysisEntry::Link {
                    seed,
                    scheduler,
                    fm_rfb,
                    fm_cfb,
                    rfb_slope,
                    cfb_slope,
                } => writeln!(
                    f,
                    "seed {seed} {scheduler}: FM packet-size {fm_rfb:.2} (slope {rfb_slope:.5}), occupation {fm_cfb:.2} (slope {cfb_slope:.5})"
                )?,
                AnalysisEntry::Arbitration {
                    seed,
                    max_abs_deviation,
                } => writeln!(f, "seed {seed}: max |observed - expected| {max_abs_deviation:.5}")?,
            }
        }
        Ok(())
    }
}
