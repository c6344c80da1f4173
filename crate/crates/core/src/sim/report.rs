//! Results of all strategies of one scenario, side by side.

use crate::sim::log::{RunLog, SimError};
use crate::sim::metrics::{self, ThroughputWindows, WindowPoint};
use crate::sim::runner::Outcome;
use crate::sim::scenario::Resolved;
use crate::sim::strategy::StrategySpec;

#[derive(Debug, Clone)]
pub struct Comparison {
    pub scenario: Resolved,
    pub outcomes: Vec<Outcome>,
}

impl Comparison {
    /// Pairs each scenario with its outcomes; `outcomes` must be in
    /// [`crate::sim::runner::run_all`] order.
    pub fn group(scenarios: Vec<Resolved>, outcomes: Vec<Outcome>) -> Vec<Comparison> {
        let mut it = outcomes.into_iter();
        scenarios
            .into_iter()
            .map(|sc| {
                let outcomes = it.by_ref().take(sc.strategies.len()).collect();
                Comparison {
                    scenario: sc,
                    outcomes,
                }
            })
            .collect()
    }

    pub fn name(&self) -> &str {
        &self.scenario.name
    }

    pub fn runs(&self) -> impl Iterator<Item = (StrategySpec, &RunLog)> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok().map(|l| (o.strategy, l)))
    }

    pub fn run(&self, spec: StrategySpec) -> Option<&RunLog> {
        self.runs().find(|(s, _)| *s == spec).map(|(_, l)| l)
    }

    /// Strategies that could not run here, with the reason.
    pub fn skipped(&self) -> Vec<(StrategySpec, String)> {
        self.outcomes
            .iter()
            .filter_map(|o| match &o.result {
                Err(SimError::Infeasible { reason, .. }) => Some((o.strategy, reason.clone())),
                _ => None,
            })
            .collect()
    }

    /// Runs that broke an invariant.
    pub fn failures(&self) -> Vec<(StrategySpec, String)> {
        self.outcomes
            .iter()
            .filter_map(|o| match &o.result {
                Err(e @ SimError::Invariant(_)) => Some((o.strategy, e.to_string())),
                _ => None,
            })
            .collect()
    }

    pub fn command_time(&self) -> Option<f64> {
        self.scenario.commands.first().map(|c| c.0)
    }

    /// Longest first-transition latency over the feasible strategies.
    pub fn slowest_latency(&self) -> Option<f64> {
        self.runs()
            .filter_map(|(_, l)| l.scalings.first().map(|s| s.latency))
            .reduce(f64::max)
    }

    pub fn throughput(&self) -> Vec<(StrategySpec, ThroughputWindows)> {
        let (Some(cmd), Some(slowest)) = (self.command_time(), self.slowest_latency()) else {
            return Vec::new();
        };
        self.runs()
            .map(|(s, l)| {
                (
                    s,
                    metrics::throughput_windows(l, cmd, slowest, self.scenario.throughput_window),
                )
            })
            .collect()
    }

    pub fn attainment_series(&self, log: &RunLog) -> Vec<WindowPoint> {
        let until = self.scenario.workload.duration.max(log.end_time);
        metrics::windowed_attainment(
            &log.requests,
            &self.scenario.slo,
            self.scenario.slo.window,
            until,
        )
    }

    pub fn recovery(&self) -> Vec<(StrategySpec, Option<f64>)> {
        let Some(cmd) = self.command_time() else {
            return Vec::new();
        };
        let target = self.scenario.slo.attainment_target;
        self.runs()
            .map(|(s, l)| {
                (
                    s,
                    metrics::recovery_time(&self.attainment_series(l), cmd, target),
                )
            })
            .collect()
    }

    pub fn slo_per_device(&self) -> Vec<(StrategySpec, Option<f64>)> {
        let Some(cmd) = self.command_time() else {
            return Vec::new();
        };
        self.runs()
            .map(|(s, l)| (s, metrics::slo_per_device(l, &self.scenario.slo, cmd)))
            .collect()
    }

    pub fn attainment(&self) -> Vec<(StrategySpec, Option<f64>)> {
        self.runs()
            .map(|(s, l)| {
                (
                    s,
                    metrics::attainment(
                        &l.requests,
                        &self.scenario.slo,
                        f64::NEG_INFINITY,
                        f64::INFINITY,
                    ),
                )
            })
            .collect()
    }
}
