//! Oracles shared by the integration tests. Nothing here calls the metric
//! or suite code under test; everything is recomputed from raw records.

#![allow(dead_code)]

use std::collections::BTreeMap;

use elastic_sim::imm::{InstanceId, InstanceState};
use elastic_sim::sim::log::{RequestRecord, RunLog};
use elastic_sim::sim::presets;
use elastic_sim::sim::scenario::Resolved;
use elastic_sim::topology::{DeviceId, ParallelConfig};

/// Fewest experts that must change device to reach any placement on `to`
/// whose per-position counts are balanced (sizes differ by at most one,
/// larger ones first). Tries every such placement by walking experts in
/// order and every device with room left.
pub fn brute_force_min_moves(current: &[DeviceId], to: &ParallelConfig) -> usize {
    let e = current.len();
    let n = to.device_set.len();
    let quota: Vec<usize> = (0..n).map(|p| e / n + usize::from(p < e % n)).collect();
    let mut best = usize::MAX;
    let mut room = quota.clone();
    fn walk(
        i: usize,
        cost: usize,
        room: &mut [usize],
        current: &[DeviceId],
        devs: &[DeviceId],
        best: &mut usize,
    ) {
        if cost + unavoidable(i, room, current, devs) >= *best {
            return;
        }
        if i == current.len() {
            *best = cost;
            return;
        }
        // Staying put first finds a good bound early.
        let mut order: Vec<usize> = (0..devs.len()).collect();
        order.sort_by_key(|p| devs[*p] != current[i]);
        for p in order {
            if room[p] == 0 {
                continue;
            }
            room[p] -= 1;
            walk(
                i + 1,
                cost + usize::from(devs[p] != current[i]),
                room,
                current,
                devs,
                best,
            );
            room[p] += 1;
        }
    }
    // Experts from `i` on that cannot stay: their device is gone or has
    // less room left than experts wanting to stay on it.
    fn unavoidable(i: usize, room: &[usize], current: &[DeviceId], devs: &[DeviceId]) -> usize {
        let mut left = 0;
        for (p, d) in devs.iter().enumerate() {
            let want = current[i..].iter().filter(|c| *c == d).count();
            left += want.saturating_sub(room[p]);
        }
        left + current[i..].iter().filter(|c| !devs.contains(c)).count()
    }
    walk(0, 0, &mut room, current, &to.device_set, &mut best);
    best
}

pub fn preset(name: &str) -> Vec<Resolved> {
    let cal = presets::calibration();
    presets::scenario(name)
        .unwrap_or_else(|| panic!("preset {name}"))
        .expand()
        .iter()
        .map(|s| s.resolve(&cal).expect("preset resolves"))
        .collect()
}

/// Legal lifecycle successor, written out independently of the library.
fn next_state(s: InstanceState) -> Option<InstanceState> {
    use InstanceState::*;
    Some(match s {
        Cold => PreInitializing,
        PreInitializing => Standby,
        Standby => Attaching,
        Attaching => Warming,
        Warming => Active,
        Active => Draining,
        Draining => Retired,
        Retired => return None,
    })
}

/// Replays a run's lifecycle and routing records and reports the first
/// violation of: legal edges only, one active instance at a time, no
/// admission to a retired instance, every request completed.
pub fn lifecycle_violation(log: &RunLog) -> Option<String> {
    let mut state: BTreeMap<InstanceId, InstanceState> = BTreeMap::new();
    let mut retired: BTreeMap<InstanceId, f64> = BTreeMap::new();
    for ev in &log.lifecycle {
        let cur = *state.get(&ev.instance).unwrap_or(&InstanceState::Cold);
        if cur != ev.old_state || next_state(cur) != Some(ev.new_state) {
            return Some(format!(
                "{:?} {:?}->{:?} from {cur:?}",
                ev.instance, ev.old_state, ev.new_state
            ));
        }
        state.insert(ev.instance, ev.new_state);
        if state
            .values()
            .filter(|s| **s == InstanceState::Active)
            .count()
            > 1
        {
            return Some(format!("two active instances at {}", ev.time));
        }
        if ev.new_state == InstanceState::Retired {
            retired.insert(ev.instance, ev.time);
        }
    }
    for a in &log.admissions {
        if let Some(id) = a.instance {
            if retired.get(&id).is_some_and(|t| a.time >= *t) {
                return Some(format!("admission to retired {id:?} at {}", a.time));
            }
        }
    }
    if let Some(r) = log.requests.iter().find(|r| r.completion.is_none()) {
        return Some(format!("request {:?} never completed", r.id));
    }
    None
}

pub fn ttft(r: &RequestRecord) -> Option<f64> {
    Some(r.first_token? - r.arrival)
}

pub fn tpot(r: &RequestRecord) -> Option<f64> {
    let span = r.completion? - r.first_token?;
    Some(if r.decode_tokens > 1 {
        span / f64::from(r.decode_tokens - 1)
    } else {
        0.0
    })
}

pub fn met(r: &RequestRecord, ttft_max: f64, tpot_max: f64) -> bool {
    matches!((ttft(r), tpot(r)), (Some(a), Some(b)) if a <= ttft_max && b <= tpot_max)
}
