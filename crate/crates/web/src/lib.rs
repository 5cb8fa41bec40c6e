//! Browser bindings. Each export runs a small experiment and returns JSON
//! for the page in `www/` to draw.

use fairmesh::arbitration::{grant_probabilistic, ArbiterKind, WeightPolicy};
use fairmesh::fairness::{backlog_intervals, FairnessReport, ScanOptions, Weights, WindowGrid};
use fairmesh::mesh::{simulate, MeshConfig};
use fairmesh::rng::SimRng;
use fairmesh::sched::link::{
    generate_arrivals, run_link_with_arrivals, Downstream, FlowSpec, LinkConfig, SizeDist,
};
use fairmesh::sched::{SchedulerKind, SchedulerParams};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn arbiter(name: &str) -> Result<ArbiterKind, String> {
    Ok(match name {
        "rr" => ArbiterKind::RoundRobin,
        "age" => ArbiterKind::AgeBased,
        "fw" => ArbiterKind::Probabilistic {
            weights: WeightPolicy::Fixed { c: 2.0 },
        },
        "cw" => ArbiterKind::Probabilistic {
            weights: WeightPolicy::Current { c: 2.0 },
        },
        "vw" => ArbiterKind::Probabilistic {
            weights: WeightPolicy::Variable { per_hop: true },
        },
        other => return Err(format!("unknown arbiter {other:?}")),
    })
}

/// Per-source sink shares of a saturated hotspot on a `k`-node line.
pub fn hotspot(k: usize, arb: &str, horizon: u64, seed: u64) -> Result<Value, String> {
    let cfg = MeshConfig::hotspot(k, arbiter(arb)?, horizon, horizon / 10, seed);
    let report = simulate(&cfg).map_err(|e| e.to_string())?;
    let shares: Vec<f64> = report.active_sources().iter().map(|s| s.share).collect();
    let latency: Vec<f64> = report
        .active_sources()
        .iter()
        .map(|s| s.mean_latency)
        .collect();
    let max = shares.iter().copied().fold(0.0, f64::max);
    let min = shares.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(json!({
        "arbiter": cfg.arbiter.name(),
        "shares": shares,
        "latency": latency,
        "spread": if min > 0.0 { max / min } else { f64::INFINITY },
    }))
}

/// Empirical grant frequencies of a weighted probabilistic arbiter.
pub fn frequencies(weights: &[f64], trials: u32, seed: u64) -> Result<Value, String> {
    let mut rng = SimRng::new(seed);
    let mut counts = vec![0u64; weights.len()];
    for _ in 0..trials {
        counts[grant_probabilistic(weights, &mut rng).map_err(|e| e.to_string())?] += 1;
    }
    let total: f64 = weights.iter().sum();
    Ok(json!({
        "expected": weights.iter().map(|w| w / total).collect::<Vec<_>>(),
        "observed": counts.iter().map(|&c| c as f64 / f64::from(trials)).collect::<Vec<_>>(),
    }))
}

/// Two flows on one link; flow A's downstream only drains `open` cycles of
/// every `period`. Reports both FM estimates and per-flow service under DRR
/// and under CARR with congestion threshold `tau`.
pub fn pathology(
    open: u32,
    period: u32,
    tau: f64,
    horizon: u64,
    seed: u64,
) -> Result<Value, String> {
    let link = LinkConfig {
        flows: vec![
            FlowSpec {
                rate: 0.05,
                preload: 0,
                size: SizeDist::Fixed { size: 8 },
                downstream: Downstream::Throttled {
                    depth: 4,
                    open,
                    period,
                },
            },
            FlowSpec {
                rate: 0.1,
                preload: 0,
                size: SizeDist::Fixed { size: 8 },
                downstream: Downstream::Free,
            },
        ],
        horizon,
        drain: false,
        seed,
        units: Default::default(),
    };
    let arrivals = generate_arrivals(&link);
    let opts = ScanOptions {
        grid: WindowGrid::Boundaries {
            max_points: Some(600),
        },
        keep_windows: false,
        bins: 20,
    };
    let mut out = Vec::new();
    for params in [
        SchedulerParams::new(SchedulerKind::Drr),
        SchedulerParams {
            tau,
            ..SchedulerParams::new(SchedulerKind::Carr)
        },
    ] {
        params.validate().map_err(|e| e.to_string())?;
        let run =
            run_link_with_arrivals(&link, &params, &arrivals, false).map_err(|e| e.to_string())?;
        let backlogs = backlog_intervals(&run.occupancy, run.end).map_err(|e| e.to_string())?;
        let fm = FairnessReport::compute(&run.trace, &backlogs, &Weights::uniform(), &opts)
            .map_err(|e| e.to_string())?;
        out.push(json!({
            "scheduler": params.kind.to_string(),
            "fm_rfb": fm.rfb_estimate(),
            "fm_cfb": fm.cfb_estimate(),
            "throughput": run.flows.iter().map(|f| f.throughput).collect::<Vec<_>>(),
            "latency": run.flows.iter().map(|f| f.mean_latency).collect::<Vec<_>>(),
        }));
    }
    Ok(Value::Array(out))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = hotspotShares)]
pub fn hotspot_shares(k: usize, arbiter: &str, horizon: u32, seed: u32) -> Result<String, JsError> {
    to_js(hotspot(k, arbiter, u64::from(horizon), u64::from(seed)))
}

#[wasm_bindgen(js_name = grantFrequencies)]
pub fn grant_frequencies(weights: &[f64], trials: u32, seed: u32) -> Result<String, JsError> {
    to_js(frequencies(weights, trials, u64::from(seed)))
}

#[wasm_bindgen(js_name = pathologyFm)]
pub fn pathology_fm(
    open: u32,
    period: u32,
    tau: f64,
    horizon: u32,
    seed: u32,
) -> Result<String, JsError> {
    to_js(pathology(
        open,
        period,
        tau,
        u64::from(horizon),
        u64::from(seed),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rr_hotspot_halves_per_hop() {
        let v = hotspot(4, "rr", 20_000, 1).unwrap();
        let shares: Vec<f64> = serde_json::from_value(v["shares"].clone()).unwrap();
        assert_eq!(shares.len(), 3);
        assert!((shares[2] - 0.5).abs() < 0.02, "{shares:?}");
        assert!((shares[0] - 0.25).abs() < 0.02, "{shares:?}");
    }

    #[test]
    fn unknown_arbiter_is_rejected() {
        assert!(hotspot(4, "lottery", 100, 1).is_err());
    }

    #[test]
    fn frequencies_follow_weights() {
        let v = frequencies(&[1.0, 3.0], 100_000, 2).unwrap();
        let obs: Vec<f64> = serde_json::from_value(v["observed"].clone()).unwrap();
        assert!((obs[1] - 0.75).abs() < 0.01);
        assert!(frequencies(&[], 10, 2).is_err());
    }

    #[test]
    fn pathology_shows_occupation_gap() {
        let v = pathology(4, 10, 1.4, 5_000, 1).unwrap();
        let (drr, carr) = (&v[0], &v[1]);
        assert!(drr["fm_cfb"].as_f64().unwrap() > drr["fm_rfb"].as_f64().unwrap());
        assert!(carr["fm_cfb"].as_f64().unwrap() < drr["fm_cfb"].as_f64().unwrap());
        assert!(pathology(0, 10, 1.4, 100, 1).is_err());
        assert!(pathology(4, 10, 0.5, 100, 1).is_err());
    }
}
