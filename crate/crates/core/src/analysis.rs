//! Closed-form model of bandwidth split along a merge chain.
//!
//! Router `j` of the chain merges the traffic of routers `0..j` (arriving
//! from the west) with flow `j` (local). If a west packet of flow `i` and
//! the local head compete with weights `W(i,j)` and `W(j,j)`, the local flow
//! gets on average `W(j,j)/W(i,j)` packets per west packet of flow `i`. The
//! accepted-packet ratio therefore extends by one component per router:
//!
//! `R_j = R_{j-1} ++ [ sum_{i<j} W(j,j)/W(i,j) * R_{j-1}(i) ]`, `R_0 = [1]`.
//!
//! Equalising per-router service time `W(i,j) * S(i,j)` with measured
//! occupation/sending ratios `S` pins the first-hop weight ratio twice, and
//! the two agree only if `S(m,k)/S(n,k) == S(m,t)/S(n,t)` for all flows and
//! routers. [`required_weights`] is only meaningful under that equal-service
//! premise; [`check_ratio_constraint`] tests whether it can hold at all.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mesh::SMatrix;
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("missing weight W({flow},{router})")]
    MissingWeight { flow: usize, router: usize },
    #[error("weight W({flow},{router}) must be positive, got {value}")]
    InvalidWeight {
        flow: usize,
        router: usize,
        value: f64,
    },
    #[error("S({flow},{router}) is undefined")]
    UndefinedS { flow: usize, router: usize },
}

/// `W(i,j)` for `i <= j`; row `j` holds `W(0,j) ..= W(j,j)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTable {
    pub rows: Vec<Vec<f64>>,
}

impl WeightTable {
    pub fn uniform(j_max: usize) -> Self {
        Self {
            rows: (0..=j_max).map(|j| vec![1.0; j + 1]).collect(),
        }
    }

    /// Random integer entries in `lo..=hi`.
    pub fn random(j_max: usize, lo: u64, hi: u64, rng: &mut SimRng) -> Self {
        Self {
            rows: (0..=j_max)
                .map(|j| {
                    (0..=j)
                        .map(|_| rng.range_inclusive(lo, hi) as f64)
                        .collect()
                })
                .collect(),
        }
    }

    pub fn get(&self, flow: usize, router: usize) -> Result<f64, AnalysisError> {
        let w = self
            .rows
            .get(router)
            .and_then(|r| r.get(flow))
            .copied()
            .ok_or(AnalysisError::MissingWeight { flow, router })?;
        if !(w.is_finite() && w > 0.0) {
            return Err(AnalysisError::InvalidWeight {
                flow,
                router,
                value: w,
            });
        }
        Ok(w)
    }

    /// Scale every row so that `W(j,j) = 1`.
    pub fn normalized(&self) -> Self {
        Self {
            rows: self
                .rows
                .iter()
                .map(|r| {
                    let d = *r.last().unwrap_or(&1.0);
                    r.iter().map(|w| w / d).collect()
                })
                .collect(),
        }
    }
}

/// `R_j` for `j = 0 ..= j_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRatios {
    pub ratios: Vec<Vec<f64>>,
}

impl AcceptanceRatios {
    pub fn at(&self, router: usize) -> &[f64] {
        &self.ratios[router]
    }

    /// `R_j` scaled to sum to 1.
    pub fn proportions(&self, router: usize) -> Vec<f64> {
        let r = &self.ratios[router];
        let s: f64 = r.iter().sum();
        r.iter().map(|x| x / s).collect()
    }
}

pub fn acceptance_ratios(w: &WeightTable, j_max: usize) -> Result<AcceptanceRatios, AnalysisError> {
    let mut ratios = vec![vec![1.0]];
    for j in 1..=j_max {
        let prev = &ratios[j - 1];
        let wjj = w.get(j, j)?;
        let mut local = 0.0;
        for (i, r) in prev.iter().enumerate() {
            local += wjj / w.get(i, j)? * r;
        }
        let mut next = prev.clone();
        next.push(local);
        ratios.push(next);
    }
    Ok(AcceptanceRatios { ratios })
}

/// Packets accepted per flow at router `j_max` of an ideal merge chain:
/// every router always has both a west head and a local head waiting, no
/// buffering or latency, and each grant is drawn with probability
/// proportional to the two heads' weights.
pub fn merge_chain_counts(
    w: &WeightTable,
    j_max: usize,
    grants: u64,
    rng: &mut SimRng,
) -> Result<Vec<u64>, AnalysisError> {
    // validate up front so the hot loop can index freely
    let mut table = Vec::with_capacity(j_max + 1);
    for j in 0..=j_max {
        let row = (0..=j)
            .map(|i| w.get(i, j))
            .collect::<Result<Vec<_>, _>>()?;
        table.push(row);
    }
    let mut west: Vec<Option<usize>> = vec![None; j_max + 1];
    let mut counts = vec![0u64; j_max + 1];
    for _ in 0..grants {
        let f = next_packet(j_max, &table, &mut west, rng);
        counts[f] += 1;
    }
    Ok(counts)
}

fn next_packet(j: usize, w: &[Vec<f64>], west: &mut [Option<usize>], rng: &mut SimRng) -> usize {
    if j == 0 {
        return 0;
    }
    let head = match west[j] {
        Some(f) => f,
        None => {
            let f = next_packet(j - 1, w, west, rng);
            west[j] = Some(f);
            f
        }
    };
    let (wi, wj) = (w[j][head], w[j][j]);
    if rng.next_f64() * (wi + wj) < wi {
        west[j] = None;
        head
    } else {
        j
    }
}

/// The two first-hop weight ratios `W(0,1)/W(1,1)` implied by equal service.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequiredWeights {
    /// From router 1: `S(1,1) / S(0,1)`.
    pub from_router1: f64,
    /// From router 2: `S(1,2) / S(0,2)`.
    pub from_router2: f64,
}

impl RequiredWeights {
    pub fn agree(&self, tolerance: f64) -> bool {
        (self.from_router1 - self.from_router2).abs() <= tolerance
    }

    /// `(W(0,1), W(1,1))` from the router-1 candidate with `W(1,1) = 1`.
    pub fn first_hop(&self) -> (f64, f64) {
        (self.from_router1, 1.0)
    }
}

pub fn required_weights(s: &SMatrix) -> Result<RequiredWeights, AnalysisError> {
    let get = |flow, router| {
        s.get(flow, router)
            .filter(|v| *v > 0.0)
            .ok_or(AnalysisError::UndefinedS { flow, router })
    };
    Ok(RequiredWeights {
        from_router1: get(1, 1)? / get(0, 1)?,
        from_router2: get(1, 2)? / get(0, 2)?,
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub t: usize,
    /// `S(m,k) / S(n,k)`
    pub ratio_k: f64,
    /// `S(m,t) / S(n,t)`
    pub ratio_t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feasibility {
    pub feasible: bool,
    /// True when fewer than two flows or routers could be compared.
    pub vacuous: bool,
    pub epsilon: f64,
    pub max_deviation: f64,
    pub witness: Option<Witness>,
    pub quadruples_checked: u64,
}

/// Largest `|S(m,k)/S(n,k) - S(m,t)/S(n,t)|` over ordered flow pairs and
/// router pairs where all four entries are defined.
pub fn check_ratio_constraint(s: &SMatrix, epsilon: f64) -> Feasibility {
    let flows = s.flows();
    let routers = s.routers();
    let mut best: Option<(f64, Witness)> = None;
    let mut checked = 0;
    for m in 0..flows {
        for n in 0..flows {
            if m == n {
                continue;
            }
            let ratio = |r: usize| -> Option<f64> {
                let (a, b) = (s.get(m, r)?, s.get(n, r)?);
                (b > 0.0).then(|| a / b)
            };
            let defined: Vec<(usize, f64)> = (0..routers)
                .filter_map(|r| ratio(r).map(|x| (r, x)))
                .collect();
            for (a, &(k, rk)) in defined.iter().enumerate() {
                for &(t, rt) in &defined[a + 1..] {
                    checked += 1;
                    let d = (rk - rt).abs();
                    if best.is_none_or(|(b, _)| d > b) {
                        best = Some((
                            d,
                            Witness {
                                m,
                                n,
                                k,
                                t,
                                ratio_k: rk,
                                ratio_t: rt,
                            },
                        ));
                    }
                }
            }
        }
    }
    let max_deviation = best.map_or(0.0, |b| b.0);
    Feasibility {
        feasible: max_deviation <= epsilon,
        vacuous: checked == 0,
        epsilon,
        max_deviation,
        witness: best.map(|b| b.1),
        quadruples_checked: checked,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(rows: &[&[Option<f64>]]) -> SMatrix {
        SMatrix {
            values: rows.iter().map(|r| r.to_vec()).collect(),
        }
    }

    #[test]
    fn uniform_weights_double_each_hop() {
        let r = acceptance_ratios(&WeightTable::uniform(3), 3).unwrap();
        assert_eq!(r.at(1), &[1.0, 1.0]);
        assert_eq!(r.at(2), &[1.0, 1.0, 2.0]);
        assert_eq!(r.at(3), &[1.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn first_router_is_the_weight_ratio() {
        let w = WeightTable {
            rows: vec![vec![1.0], vec![1.0, 3.0]],
        };
        let r = acceptance_ratios(&w, 1).unwrap();
        assert_eq!(r.at(1), &[1.0, 3.0]);
    }

    #[test]
    fn normalized_table_gives_same_ratios() {
        let w = WeightTable {
            rows: vec![vec![2.0], vec![1.0, 4.0], vec![3.0, 2.0, 2.0]],
        };
        let a = acceptance_ratios(&w, 2).unwrap();
        let b = acceptance_ratios(&w.normalized(), 2).unwrap();
        for (x, y) in a.proportions(2).iter().zip(b.proportions(2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_weight() {
        let w = WeightTable {
            rows: vec![vec![1.0], vec![1.0]],
        };
        assert_eq!(
            acceptance_ratios(&w, 1).unwrap_err(),
            AnalysisError::MissingWeight { flow: 1, router: 1 }
        );
    }

    #[test]
    fn merge_chain_uniform_matches_geometric_split() {
        let w = WeightTable::uniform(3);
        let counts = merge_chain_counts(&w, 3, 200_000, &mut SimRng::new(4)).unwrap();
        let expect = acceptance_ratios(&w, 3).unwrap().proportions(3);
        for (c, e) in counts.iter().zip(expect) {
            assert!((*c as f64 / 200_000.0 - e).abs() < 0.01);
        }
    }

    #[test]
    fn required_weight_examples() {
        let m = s(&[
            &[Some(1.0), Some(2.0), Some(2.0)],
            &[None, Some(1.0), Some(4.0)],
        ]);
        let r = required_weights(&m).unwrap();
        assert_eq!(r.from_router1, 0.5);
        assert_eq!(r.first_hop(), (0.5, 1.0));
        assert_eq!(r.from_router2, 2.0);
        let eq = s(&[&[Some(3.0); 3], &[Some(3.0); 3]]);
        let r = required_weights(&eq).unwrap();
        assert_eq!((r.from_router1, r.from_router2), (1.0, 1.0));
    }

    #[test]
    fn required_weights_undefined() {
        let m = s(&[&[Some(1.0), None, Some(2.0)], &[None, Some(1.0), Some(4.0)]]);
        assert_eq!(
            required_weights(&m).unwrap_err(),
            AnalysisError::UndefinedS { flow: 0, router: 1 }
        );
    }

    #[test]
    fn proportional_rows_feasible() {
        let m = s(&[
            &[Some(2.0), Some(4.0), Some(6.0)],
            &[Some(1.0), Some(2.0), Some(3.0)],
        ]);
        let f = check_ratio_constraint(&m, 0.0);
        assert!(f.feasible);
        assert!(!f.vacuous);
        assert_eq!(f.max_deviation, 0.0);
    }

    #[test]
    fn ratio_two_versus_three_infeasible() {
        let m = s(&[&[Some(2.0), Some(3.0)], &[Some(1.0), Some(1.0)]]);
        let f = check_ratio_constraint(&m, 0.1);
        assert!(!f.feasible);
        assert_eq!(f.max_deviation, 1.0);
        let w = f.witness.unwrap();
        assert_eq!((w.m, w.n, w.k, w.t), (0, 1, 0, 1));
    }

    #[test]
    fn too_small_is_vacuous() {
        let f = check_ratio_constraint(&s(&[&[Some(2.0), Some(3.0)]]), 0.05);
        assert!(f.feasible && f.vacuous);
        let f = check_ratio_constraint(&s(&[&[Some(2.0)], &[Some(1.0)]]), 0.05);
        assert!(f.feasible && f.vacuous);
    }

    fn arb_table(j_max: usize) -> impl Strategy<Value = WeightTable> {
        let sizes: Vec<_> = (0..=j_max)
            .map(|j| prop::collection::vec(1u32..5, j + 1))
            .collect();
        sizes.prop_map(|rows| WeightTable {
            rows: rows
                .into_iter()
                .map(|r| r.into_iter().map(f64::from).collect())
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn ratios_positive_and_sized(w in arb_table(4)) {
            let r = acceptance_ratios(&w, 4).unwrap();
            for j in 0..=4 {
                prop_assert_eq!(r.at(j).len(), j + 1);
                prop_assert!(r.at(j).iter().all(|x| *x > 0.0));
            }
        }

        #[test]
        fn scaling_one_router_keeps_its_proportions(w in arb_table(3), j in 1usize..4, c in 0.1f64..10.0) {
            let base = acceptance_ratios(&w, 3).unwrap();
            let mut scaled = w.clone();
            for x in &mut scaled.rows[j] {
                *x *= c;
            }
            let r = acceptance_ratios(&scaled, 3).unwrap();
            for (a, b) in base.proportions(j).iter().zip(r.proportions(j)) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn exact_feasibility_means_candidates_agree(
            base in prop::collection::vec(0.5f64..5.0, 3),
            scale in 0.2f64..5.0,
        ) {
            let m = SMatrix { values: vec![
                base.iter().map(|x| Some(x * scale)).collect(),
                base.iter().map(|x| Some(*x)).collect(),
            ]};
            let f = check_ratio_constraint(&m, 1e-9);
            prop_assert!(f.feasible);
            let r = required_weights(&m).unwrap();
            prop_assert!(r.agree(1e-9));
        }
    }
}
