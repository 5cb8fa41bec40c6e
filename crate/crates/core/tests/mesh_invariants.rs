use fairmesh::arbitration::{ArbiterKind, WeightPolicy};
use fairmesh::mesh::{simulate, Injection, Mesh, MeshConfig, Pattern};
use fairmesh::sched::{SchedulerKind, SchedulerParams};
use proptest::prelude::*;

fn arbiter() -> impl Strategy<Value = ArbiterKind> {
    prop_oneof![
        Just(ArbiterKind::RoundRobin),
        Just(ArbiterKind::AgeBased),
        (1.0f64..3.0).prop_map(|c| ArbiterKind::Probabilistic {
            weights: WeightPolicy::Fixed { c }
        }),
        (1.0f64..3.0).prop_map(|c| ArbiterKind::Probabilistic {
            weights: WeightPolicy::Current { c }
        }),
        any::<bool>().prop_map(|per_hop| ArbiterKind::Probabilistic {
            weights: WeightPolicy::Variable { per_hop }
        }),
    ]
}

fn scheduler() -> impl Strategy<Value = Option<SchedulerParams>> {
    prop_oneof![
        3 => Just(None),
        1 => prop::sample::select(vec![
            SchedulerKind::Rr,
            SchedulerKind::Drr,
            SchedulerKind::Err,
            SchedulerKind::Ebrr,
            SchedulerKind::Carr,
        ])
        .prop_map(|k| Some(SchedulerParams::new(k))),
    ]
}

fn mesh_config() -> impl Strategy<Value = MeshConfig> {
    (
        2usize..=6,
        1u32..=6,
        1usize..=5,
        0.0f64..=1.0,
        any::<bool>(),
        arbiter(),
        scheduler(),
        any::<u64>(),
    )
        .prop_flat_map(|(k, len, depth, rate, hotspot, arb, sched, seed)| {
            (0..k).prop_map(move |dest| MeshConfig {
                k,
                packet_len: len,
                buffer_depth: depth,
                injection: Injection {
                    rate,
                    rates: None,
                    pattern: if hotspot {
                        Pattern::Hotspot { dest }
                    } else {
                        Pattern::Uniform
                    },
                },
                arbiter: arb,
                scheduler: sched.clone(),
                horizon: 600,
                warmup: 0,
                seed,
                trace_link: None,
                audit: true,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn flits_conserved_and_buffers_bounded(cfg in mesh_config()) {
        let depth = cfg.buffer_depth;
        let mut mesh = Mesh::new(cfg).unwrap();
        for _ in 0..600 {
            mesh.step().unwrap();
            prop_assert_eq!(
                mesh.injected_flits(),
                mesh.delivered_flits() + mesh.flits_in_flight()
            );
        }
        let audit = mesh.audit();
        prop_assert_eq!(audit.cycles_checked, 600);
        prop_assert_eq!(audit.conservation_violations, 0);
        prop_assert_eq!(audit.credit_violations, 0);
        prop_assert_eq!(audit.contiguity_violations, 0);
        prop_assert!(audit.max_buffer_occupancy <= depth);
    }

    #[test]
    fn same_seed_same_run(cfg in mesh_config()) {
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        prop_assert_eq!(a.sources, b.sources);
        prop_assert_eq!(a.routers, b.routers);
        prop_assert_eq!(a.trace.records(), b.trace.records());
    }

    #[test]
    fn sink_shares_sum_to_at_most_one(cfg in mesh_config()) {
        let r = simulate(&cfg).unwrap();
        let total: f64 = r.shares().iter().sum();
        prop_assert!(total <= 1.0 + 1e-9);
        for s in &r.routers {
            prop_assert_eq!(s.occupied, s.sending + s.blocking + s.starved);
        }
    }
}
