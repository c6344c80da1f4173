mod common;

use elastic_sim::sim::presets;
use elastic_sim::sim::runner::{self, Execution};
use elastic_sim::sim::scenario::CommandSpec;
use elastic_sim::sim::strategy::{Strategy, StrategySpec};
use elastic_sim::sim::suite;
use elastic_sim::sim::workload::ArrivalPattern;
use proptest::prelude::*;

use common::lifecycle_violation;

fn strategy_choices() -> Vec<StrategySpec> {
    let mut v: Vec<StrategySpec> = Strategy::ALL.into_iter().map(StrategySpec::plain).collect();
    v.extend(StrategySpec::ladder().into_iter().skip(1));
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_command_sequences_keep_lifecycle_legal(
        initial in 1u32..=4,
        commands in prop::collection::vec((0.0f64..150.0, 1u32..=4), 1..5),
        autoscale in any::<bool>(),
        pause in any::<bool>(),
        preseed in any::<bool>(),
        rps in 0.2f64..4.0,
        seed in any::<u64>(),
        pick in 0usize..64,
    ) {
        let cal = presets::calibration();
        let mut sc = presets::scenario("ablation-scaleup").unwrap();
        sc.name = "prop".into();
        sc.seed = seed;
        sc.initial.dp = initial;
        sc.commands = commands.into_iter().map(|(at, dp)| CommandSpec { at, dp }).collect();
        sc.autoscale = autoscale;
        sc.pause_intake_during_scaling = pause;
        sc.preseed_standby = preseed;
        sc.workload.arrivals = ArrivalPattern::FixedRps { rps };
        sc.workload.duration = 120.0;
        let choices = strategy_choices();
        sc.strategies = vec![choices[pick % choices.len()]];
        let resolved = sc.resolve(&cal).unwrap();
        for o in runner::run_all(&[resolved], Execution::Sequential) {
            match o.result {
                Ok(log) => prop_assert_eq!(lifecycle_violation(&log), None),
                Err(e) => prop_assert!(e.is_infeasible(), "{}", e),
            }
        }
    }
}

#[test]
fn fuzzed_scenarios_cover_many_events_without_violations() {
    let mut events = 0;
    let mut runs = 0;
    for o in runner::run_all(&suite::fuzz_scenarios(7, 32), Execution::Parallel) {
        match o.result {
            Ok(log) => {
                assert_eq!(
                    lifecycle_violation(&log),
                    None,
                    "{} {}",
                    o.scenario,
                    o.strategy
                );
                events += log.events_processed;
                runs += 1;
            }
            Err(e) => assert!(e.is_infeasible(), "{} {}: {e}", o.scenario, o.strategy),
        }
    }
    assert!(runs > 16, "{runs} feasible runs");
    assert!(events >= 10_000, "{events} events");
}
