//! Calibration and scenario files shipped with the crate.

use crate::sim::scenario::{Calibration, Scenario};

pub const CALIBRATION: &str = include_str!("../../presets/paper-calibrated.json");

/// `(file stem, contents)` of every shipped scenario.
pub const SCENARIOS: &[(&str, &str)] = &[
    (
        "ablation-scaledown",
        include_str!("../../presets/scenarios/ablation-scaledown.json"),
    ),
    (
        "ablation-scaleup",
        include_str!("../../presets/scenarios/ablation-scaleup.json"),
    ),
    (
        "autoscale-patterned",
        include_str!("../../presets/scenarios/autoscale-patterned.json"),
    ),
    (
        "latency-breakdown",
        include_str!("../../presets/scenarios/latency-breakdown.json"),
    ),
    (
        "peak-memory-dsv2-lite",
        include_str!("../../presets/scenarios/peak-memory-dsv2-lite.json"),
    ),
    (
        "scaledown-latency-dsv2-lite",
        include_str!("../../presets/scenarios/scaledown-latency-dsv2-lite.json"),
    ),
    (
        "scaledown-latency-qwen3",
        include_str!("../../presets/scenarios/scaledown-latency-qwen3.json"),
    ),
    (
        "scaleup-latency-dsv2-lite",
        include_str!("../../presets/scenarios/scaleup-latency-dsv2-lite.json"),
    ),
    (
        "scaleup-latency-dsv3",
        include_str!("../../presets/scenarios/scaleup-latency-dsv3.json"),
    ),
    (
        "scaleup-latency-qwen3",
        include_str!("../../presets/scenarios/scaleup-latency-qwen3.json"),
    ),
    (
        "slo-dynamics-scaledown",
        include_str!("../../presets/scenarios/slo-dynamics-scaledown.json"),
    ),
    (
        "slo-dynamics-scaleup",
        include_str!("../../presets/scenarios/slo-dynamics-scaleup.json"),
    ),
    (
        "slo-vs-rps",
        include_str!("../../presets/scenarios/slo-vs-rps.json"),
    ),
    (
        "throughput-offline",
        include_str!("../../presets/scenarios/throughput-offline.json"),
    ),
];

pub fn calibration() -> Calibration {
    serde_json::from_str(CALIBRATION).expect("shipped calibration parses")
}

pub fn scenario(name: &str) -> Option<Scenario> {
    SCENARIOS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| Scenario::from_json(text).expect("shipped scenario parses"))
}

pub fn all() -> Vec<Scenario> {
    SCENARIOS
        .iter()
        .map(|(_, text)| Scenario::from_json(text).expect("shipped scenario parses"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_resolve() {
        let cal = calibration();
        for sc in all() {
            for s in sc.expand() {
                s.resolve(&cal)
                    .unwrap_or_else(|e| panic!("{}: {e}", s.name));
            }
        }
    }
}
