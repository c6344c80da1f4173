mod common;

use std::time::Instant;

use elastic_sim::hmm::{ExecOptions, Hmm};
use elastic_sim::topology::{ClusterSpec, ModelSpec, ParallelConfig};
use proptest::prelude::*;

use common::brute_force_min_moves;

fn model(experts: u32) -> ModelSpec {
    ModelSpec {
        name: "m".into(),
        num_experts_total: experts,
        experts_active_per_token: 1,
        bytes_per_expert: 1 << 20,
        attention_shard_bytes: 1 << 20,
        kv_bytes_per_token: 1,
        kv_tokens_per_device: 1 << 10,
        pages_per_expert: 2,
    }
}

#[test]
fn plans_move_the_fewest_experts_exhaustively() {
    let started = Instant::now();
    let cluster = ClusterSpec::with_devices(6);
    let mut cases = 0;
    for experts in 1..=12 {
        for tp in 1..=6u32 {
            for from_dp in 1..=6 / tp {
                for to_dp in 1..=6 / tp {
                    let from = ParallelConfig::on_first(from_dp, tp, &cluster.devices);
                    let to = ParallelConfig::on_first(to_dp, tp, &cluster.devices);
                    let mut hmm = Hmm::new(model(experts), cluster.clone());
                    hmm.initialize(&from, 0.0).unwrap();
                    let plan = hmm.compute_plan(&to).unwrap();
                    let current = hmm.current().unwrap().placement.assignment.clone();
                    assert_eq!(
                        plan.expert_moves.len(),
                        brute_force_min_moves(&current, &to),
                        "E={experts} {from} -> {to}"
                    );
                    assert!(plan.target_placement(experts).is_balanced_for(&to));
                    cases += 1;
                }
            }
        }
    }
    assert!(cases > 500);
    assert!(
        started.elapsed().as_secs_f64() < 5.0,
        "took {:?}",
        started.elapsed()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// After several executed transitions the placement is no longer
    /// contiguous; plans must stay minimal from there too.
    #[test]
    fn chained_plans_stay_minimal(
        experts in 1u32..=12,
        tp in 1u32..=2,
        hops in prop::collection::vec(1u32..=6, 1..6),
    ) {
        let cluster = ClusterSpec::with_devices(6);
        let max_dp = 6 / tp;
        let mut hmm = Hmm::new(model(experts), cluster.clone());
        hmm.initialize(&ParallelConfig::on_first(1, tp, &cluster.devices), 0.0).unwrap();
        let mut t = 1.0;
        for dp in hops {
            let to = ParallelConfig::on_first(1 + (dp - 1) % max_dp, tp, &cluster.devices);
            let plan = hmm.compute_plan(&to).unwrap();
            let current = hmm.current().unwrap().placement.assignment.clone();
            prop_assert_eq!(plan.expert_moves.len(), brute_force_min_moves(&current, &to));
            let rec = hmm.execute_plan(&plan, t, ExecOptions::default()).unwrap();
            t += rec.duration() + 1.0;
            hmm.commit_switchover(t).unwrap();
            let layout = hmm.current().unwrap().clone();
            prop_assert!(layout.placement.is_balanced_for(&to));
            prop_assert_eq!(hmm.check_layout(&layout), Ok(()));
            prop_assert_eq!(hmm.check_conservation(), Ok(()));
        }
    }
}
