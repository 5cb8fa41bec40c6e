//! Canned experiment configs compiled into the binary.

const PRESETS: &[(&str, &str)] = &[
    ("hotspot-rr", include_str!("../presets/hotspot-rr.json")),
    ("hotspot-vw", include_str!("../presets/hotspot-vw.json")),
    ("hotspot-age", include_str!("../presets/hotspot-age.json")),
    ("s-ratio-rr", include_str!("../presets/s-ratio-rr.json")),
    (
        "arb-convergence",
        include_str!("../presets/arb-convergence.json"),
    ),
    ("pathology", include_str!("../presets/pathology.json")),
    (
        "err-boundedness",
        include_str!("../presets/err-boundedness.json"),
    ),
];

pub fn names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

pub fn get(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|p| p.0 == name).map(|p| p.1)
}
