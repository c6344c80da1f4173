//! Runs batches of (scenario, strategy) jobs, in parallel or one by one.
//!
//! Every strategy of a scenario sees the same trace. Results come back in
//! job order whichever execution mode is used.

use crate::sim::engine;
use crate::sim::log::{RunLog, SimError};
use crate::sim::scenario::Resolved;
use crate::sim::strategy::StrategySpec;
use crate::sim::workload::Request;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[default]
    Parallel,
    Sequential,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub scenario: String,
    pub strategy: StrategySpec,
    pub result: Result<RunLog, SimError>,
}

/// Runs every strategy listed by every scenario.
pub fn run_all(scenarios: &[Resolved], exec: Execution) -> Vec<Outcome> {
    let traces: Vec<Vec<Request>> = map(scenarios, exec, |sc| sc.workload.generate(sc.seed));
    let jobs: Vec<(usize, StrategySpec)> = scenarios
        .iter()
        .enumerate()
        .flat_map(|(i, sc)| sc.strategies.iter().map(move |s| (i, *s)))
        .collect();
    map(&jobs, exec, |(i, spec)| Outcome {
        scenario: scenarios[*i].name.clone(),
        strategy: *spec,
        result: engine::run(&scenarios[*i], *spec, &traces[*i]),
    })
}

#[cfg(feature = "parallel")]
fn map<T: Sync, U: Send>(
    items: &[T],
    exec: Execution,
    f: impl Fn(&T) -> U + Sync + Send,
) -> Vec<U> {
    use rayon::prelude::*;
    match exec {
        Execution::Parallel => items.par_iter().map(f).collect(),
        Execution::Sequential => items.iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn map<T: Sync, U: Send>(
    items: &[T],
    _exec: Execution,
    f: impl Fn(&T) -> U + Sync + Send,
) -> Vec<U> {
    items.iter().map(f).collect()
}
