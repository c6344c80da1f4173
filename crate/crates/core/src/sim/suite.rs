//! Runs every shipped preset and checks the expected orderings.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::fabric::{MemoryLedger, TransferKind};
use crate::hmm::Hmm;
use crate::imm::{InstanceId, InstanceState};
use crate::sim::log::RunLog;
use crate::sim::presets;
use crate::sim::report::Comparison;
use crate::sim::runner::{self, Execution};
use crate::sim::scenario::{CommandSpec, Resolved, Scenario, ScenarioError};
use crate::sim::strategy::{Strategy, StrategySpec};
use crate::sim::workload::ArrivalPattern;
use crate::topology::{balanced_quota, ClusterSpec, DeviceId, ModelSpec, ParallelConfig};
use crate::vmem::{PageContent, PageId, PageStore, RangeId, VmemOpKind};

pub const PEAK_OVER_COLD: f64 = 1.05;
pub const EXTRAVAGANT_OVER_ELASTIC: f64 = 1.5;
pub const LATENCY_RATIO: f64 = 0.15;
pub const EQUAL_WINDOW_TOLERANCE: f64 = 0.01;
pub const SUSTAINED_ATTAINMENT: f64 = 0.90;
pub const COLOCATED_FLOOR: f64 = 0.40;
pub const FUZZ_MIN_EVENTS: u64 = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub id: u8,
    pub title: &'static str,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn new(id: u8, title: &'static str, failures: Vec<String>, ok: String) -> Check {
        let pass = failures.is_empty();
        Check {
            id,
            title,
            pass,
            detail: if pass { ok } else { failures.join("; ") },
        }
    }
}

pub struct SuiteReport {
    pub comparisons: Vec<Comparison>,
    pub checks: Vec<Check>,
}

/// Every preset, expanded, with an optional seed override.
pub fn preset_scenarios(seed: Option<u64>) -> Result<Vec<Resolved>, ScenarioError> {
    let cal = presets::calibration();
    let mut out = Vec::new();
    for sc in presets::all() {
        for mut s in sc.expand() {
            if let Some(seed) = seed {
                s.seed = seed;
            }
            out.push(s.resolve(&cal)?);
        }
    }
    Ok(out)
}

pub fn run(exec: Execution, seed: Option<u64>) -> Result<SuiteReport, ScenarioError> {
    let scenarios = preset_scenarios(seed)?;
    let outcomes = runner::run_all(&scenarios, exec);
    let other = match exec {
        Execution::Parallel => Execution::Sequential,
        Execution::Sequential => Execution::Parallel,
    };
    let again = runner::run_all(&scenarios, other);
    let comparisons = Comparison::group(scenarios, outcomes);
    let checks = vec![
        zero_downtime(&comparisons),
        ablation_ordering(&comparisons),
        peak_memory(&comparisons),
        latency_dominance(&comparisons),
        expert_move_minimality(12, 6),
        zero_copy(&comparisons),
        disk_uniqueness(&comparisons),
        vmem_soundness(20, 1000),
        throughput_windows(&comparisons),
        slo_dynamics(&comparisons),
        slo_vs_rps(&comparisons),
        determinism(&comparisons, &again),
        lifecycle_safety(&comparisons, seed.unwrap_or(0)),
    ];
    Ok(SuiteReport {
        comparisons,
        checks,
    })
}

fn is_full_elastic(s: StrategySpec) -> bool {
    s == StrategySpec::plain(Strategy::Elastic)
}

fn with_prefix<'a>(
    cs: &'a [Comparison],
    prefix: &'a str,
) -> impl Iterator<Item = &'a Comparison> + 'a {
    cs.iter().filter(move |c| c.name().starts_with(prefix))
}

fn first_latency(log: &RunLog) -> Option<f64> {
    log.scalings.first().map(|s| s.latency)
}

fn zero_downtime(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut n = 0;
    for c in cs {
        for (s, log) in c.runs() {
            for r in &log.scalings {
                if is_full_elastic(s) {
                    n += 1;
                    if r.downtime != 0.0 {
                        bad.push(format!(
                            "{} elastic {} downtime {}",
                            c.name(),
                            r.event,
                            r.downtime
                        ));
                    }
                } else if s.strategy == Strategy::ColdRestart {
                    n += 1;
                    if (r.downtime - r.latency).abs() > 1e-9 {
                        bad.push(format!(
                            "{} cold {} downtime {} latency {}",
                            c.name(),
                            r.event,
                            r.downtime,
                            r.latency
                        ));
                    }
                }
            }
        }
    }
    Check::new(1, "zero downtime", bad, format!("{n} transitions"))
}

fn ablation_ordering(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut rows = Vec::new();
    for name in ["ablation-scaleup", "ablation-scaledown"] {
        let Some(c) = cs.iter().find(|c| c.name() == name) else {
            bad.push(format!("{name} missing"));
            continue;
        };
        let mut prev = f64::NEG_INFINITY;
        let mut lats = Vec::new();
        for (level, spec) in StrategySpec::ladder().into_iter().enumerate() {
            let Some(r) = c.run(spec).and_then(|l| l.scalings.first()) else {
                bad.push(format!("{name} {spec} has no scaling"));
                continue;
            };
            if r.latency <= prev {
                bad.push(format!(
                    "{name} {spec} {:.3} not above {:.3}",
                    r.latency, prev
                ));
            }
            let want_down = if level == 4 { r.latency } else { 0.0 };
            if (r.downtime - want_down).abs() > 1e-9 {
                bad.push(format!("{name} {spec} downtime {}", r.downtime));
            }
            prev = r.latency;
            lats.push(format!("{:.2}", r.latency));
        }
        rows.push(format!("{name} [{}]", lats.join(" < ")));
    }
    Check::new(2, "ablation ordering", bad, rows.join(", "))
}

fn peak_memory(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut rows = Vec::new();
    for c in with_prefix(cs, "peak-memory-") {
        let peak = |s: Strategy| {
            c.run(StrategySpec::plain(s))
                .and_then(|l| l.scalings.first())
                .map(|r| r.peak_mem as f64)
        };
        let (Some(e), Some(cold), Some(x)) = (
            peak(Strategy::Elastic),
            peak(Strategy::ColdRestart),
            peak(Strategy::Extravagant),
        ) else {
            bad.push(format!("{} lacks a run", c.name()));
            continue;
        };
        if !(cold <= e && e <= PEAK_OVER_COLD * cold) {
            bad.push(format!("{} elastic/cold {:.3}", c.name(), e / cold));
        }
        if x < EXTRAVAGANT_OVER_ELASTIC * e {
            bad.push(format!("{} extravagant/elastic {:.3}", c.name(), x / e));
        }
        rows.push(format!("{} e/c {:.3} x/e {:.3}", c.name(), e / cold, x / e));
    }
    if rows.is_empty() && bad.is_empty() {
        bad.push("no peak-memory scenarios".into());
    }
    Check::new(3, "peak memory ordering", bad, rows.join(", "))
}

fn latency_dominance(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for c in cs.iter().filter(|c| {
        c.name().starts_with("scaleup-latency-") || c.name().starts_with("scaledown-latency-")
    }) {
        let Some(e) = c
            .run(StrategySpec::plain(Strategy::Elastic))
            .and_then(first_latency)
        else {
            bad.push(format!("{} has no elastic scaling", c.name()));
            continue;
        };
        let best = c
            .runs()
            .filter(|(s, _)| s.strategy != Strategy::Elastic)
            .filter_map(|(_, l)| first_latency(l))
            .reduce(f64::min);
        let Some(best) = best else {
            bad.push(format!("{} has no feasible baseline", c.name()));
            continue;
        };
        n += 1;
        worst = worst.max(e / best);
        if e > LATENCY_RATIO * best {
            bad.push(format!("{} ratio {:.3}", c.name(), e / best));
        }
    }
    Check::new(
        4,
        "scaling latency dominance",
        bad,
        format!("{n} transitions, worst ratio {worst:.3}"),
    )
}

/// Exact minimum number of experts that change device over all balanced
/// placements for `to`, by dynamic programming over remaining quotas.
fn min_moves(current: &[DeviceId], to: &ParallelConfig) -> u32 {
    fn go(
        i: usize,
        rem: &mut Vec<u32>,
        current: &[DeviceId],
        devs: &[DeviceId],
        memo: &mut HashMap<(usize, Vec<u32>), u32>,
    ) -> u32 {
        if i == current.len() {
            return 0;
        }
        if let Some(v) = memo.get(&(i, rem.clone())) {
            return *v;
        }
        let mut best = u32::MAX;
        for p in 0..rem.len() {
            if rem[p] == 0 {
                continue;
            }
            rem[p] -= 1;
            let cost = u32::from(devs[p] != current[i]) + go(i + 1, rem, current, devs, memo);
            rem[p] += 1;
            best = best.min(cost);
        }
        memo.insert((i, rem.clone()), best);
        best
    }
    let mut rem = balanced_quota(current.len() as u32, to.device_set.len() as u32);
    go(0, &mut rem, current, &to.device_set, &mut HashMap::new())
}

fn tiny_model(experts: u32) -> ModelSpec {
    ModelSpec {
        name: "tiny".into(),
        num_experts_total: experts,
        experts_active_per_token: 1,
        bytes_per_expert: 1 << 20,
        attention_shard_bytes: 1 << 20,
        kv_bytes_per_token: 1,
        kv_tokens_per_device: 1 << 10,
        pages_per_expert: 1,
    }
}

/// Plans every transition with at most `max_experts` experts and `max_ep`
/// devices on each side and compares the move count with [`min_moves`].
pub fn expert_move_minimality(max_experts: u32, max_ep: u32) -> Check {
    let cluster = ClusterSpec::with_devices(max_ep);
    let mut bad = Vec::new();
    let mut n = 0;
    for experts in 1..=max_experts {
        let model = tiny_model(experts);
        for tp in 1..=max_ep {
            let max_dp = max_ep / tp;
            for from_dp in 1..=max_dp {
                for to_dp in 1..=max_dp {
                    let from = ParallelConfig::on_first(from_dp, tp, &cluster.devices);
                    let to = ParallelConfig::on_first(to_dp, tp, &cluster.devices);
                    let mut hmm = Hmm::new(model.clone(), cluster.clone());
                    if let Err(e) = hmm.initialize(&from, 0.0) {
                        bad.push(format!("E{experts} {from}: {e}"));
                        continue;
                    }
                    let plan = match hmm.compute_plan(&to) {
                        Ok(p) => p,
                        Err(e) => {
                            bad.push(format!("E{experts} {from}->{to}: {e}"));
                            continue;
                        }
                    };
                    n += 1;
                    let current = &hmm.current().expect("initialized").placement.assignment;
                    let want = min_moves(current, &to);
                    let placed = plan.target_placement(experts);
                    if plan.expert_moves.len() as u32 != want || !placed.is_balanced_for(&to) {
                        bad.push(format!(
                            "E{experts} {from}->{to}: {} moves, minimum {want}",
                            plan.expert_moves.len()
                        ));
                    }
                }
            }
        }
    }
    Check::new(
        5,
        "expert move minimality",
        bad,
        format!("{n} transitions exhaustive"),
    )
}

fn zero_copy(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut n = 0;
    for c in cs {
        for (s, log) in c.runs().filter(|(s, _)| is_full_elastic(*s)) {
            for t in &log.transfers {
                if t.kind == TransferKind::ZeroCopy && t.ledger_delta != 0 {
                    bad.push(format!(
                        "{} {s}: zero-copy {} moved ledger by {}",
                        c.name(),
                        t.tensor_tag,
                        t.ledger_delta
                    ));
                }
            }
            for r in &log.scalings {
                n += 1;
                let moved: u64 = log
                    .transfers
                    .iter()
                    .filter(|t| t.start >= r.cmd_time && t.start <= r.ready_time)
                    .filter(|t| r.shared_devices.contains(&t.dst))
                    .filter(|t| t.tensor_tag.starts_with("attn/") || t.tensor_tag.ends_with("/kv"))
                    .filter(|t| t.kind != TransferKind::ZeroCopy)
                    .map(|t| t.bytes)
                    .sum();
                if moved != 0 {
                    bad.push(format!(
                        "{} {}: {moved} bytes of attention/KV moved on shared devices",
                        c.name(),
                        r.event
                    ));
                }
            }
        }
    }
    Check::new(
        6,
        "zero-copy correctness",
        bad,
        format!("{n} elastic transitions"),
    )
}

fn disk_uniqueness(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut n = 0;
    for c in cs {
        for (_, log) in c.runs().filter(|(s, _)| is_full_elastic(*s)) {
            n += 1;
            let flagged = log.transfers.iter().filter(|t| t.duplicate).count();
            if log.duplicate_disk_loads != 0 || flagged != 0 {
                bad.push(format!(
                    "{}: {} duplicate disk loads",
                    c.name(),
                    log.duplicate_disk_loads.max(flagged as u32)
                ));
            }
        }
    }
    Check::new(7, "disk-copy uniqueness", bad, format!("{n} elastic runs"))
}

/// Randomized map/unmap/remap sequences checked against a shadow model.
pub fn vmem_soundness(sequences: u64, ops: usize) -> Check {
    let mut bad = Vec::new();
    for seq in 0..sequences {
        if let Err(e) = vmem_sequence(seq, ops) {
            bad.push(format!("sequence {seq}: {e}"));
        }
    }
    if let Err(e) = remap_cost_is_constant(4) {
        bad.push(e);
    }
    Check::new(8, "vmem soundness", bad, format!("{sequences} x {ops} ops"))
}

fn vmem_sequence(seed: u64, ops: usize) -> Result<(), String> {
    const DEVS: [DeviceId; 2] = [DeviceId(0), DeviceId(1)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = PageStore::new(1 << 20);
    let mut ledger = MemoryLedger::new(&DEVS, 1 << 30);
    // Shadow state: page -> device, range -> (device, slots).
    let mut pages: BTreeMap<PageId, DeviceId> = BTreeMap::new();
    let mut ranges: BTreeMap<RangeId, (DeviceId, Vec<Option<PageId>>)> = BTreeMap::new();
    let mut retired: Vec<PageId> = Vec::new();
    let mapped = |ranges: &BTreeMap<RangeId, (DeviceId, Vec<Option<PageId>>)>, p: PageId| {
        ranges.values().any(|(_, s)| s.contains(&Some(p)))
    };
    let pick = |rng: &mut ChaCha8Rng, n: usize| rng.random_range(0..n.max(1));
    for step in 0..ops {
        let range_ids: Vec<RangeId> = ranges.keys().copied().collect();
        let page_ids: Vec<PageId> = pages.keys().copied().collect();
        match rng.random_range(0..6) {
            0 => {
                let d = DEVS[pick(&mut rng, 2)];
                let n = rng.random_range(0..4);
                let ids = store
                    .alloc_pages(&mut ledger, d, n)
                    .map_err(|e| e.to_string())?;
                for p in ids {
                    store
                        .set_content(p, PageContent::Expert(p.0 as u32))
                        .map_err(|e| e.to_string())?;
                    pages.insert(p, d);
                }
            }
            1 => {
                let d = DEVS[pick(&mut rng, 2)];
                let n = rng.random_range(0..6);
                let r = store.reserve_range(d, n);
                ranges.insert(r, (d, vec![None; n]));
            }
            2 if !range_ids.is_empty() && !page_ids.is_empty() => {
                let r = range_ids[pick(&mut rng, range_ids.len())];
                let p = page_ids[pick(&mut rng, page_ids.len())];
                let slot = rng.random_range(0..6);
                let (dev, slots) = &ranges[&r];
                let expect = slot < slots.len()
                    && slots[slot].is_none()
                    && pages[&p] == *dev
                    && !mapped(&ranges, p)
                    && !retired.contains(&p);
                let got = store.map_slot(r, slot, p).is_ok();
                if got != expect {
                    return Err(format!(
                        "step {step}: map {r:?}[{slot}] <- {p:?} returned {got}, expected {expect}"
                    ));
                }
                if got {
                    ranges.get_mut(&r).expect("present").1[slot] = Some(p);
                }
            }
            3 | 4 if !range_ids.is_empty() => {
                let r = range_ids[pick(&mut rng, range_ids.len())];
                let slot = rng.random_range(0..6);
                let held = ranges[&r].1.get(slot).copied().flatten();
                let deferred = rng.random_bool(0.5);
                let res = if deferred {
                    store.unmap_deferred(r, slot)
                } else {
                    store.unmap_and_free(&mut ledger, r, slot)
                };
                match (res, held) {
                    (Ok(p), Some(q)) if p == q => {
                        ranges.get_mut(&r).expect("present").1[slot] = None;
                        if deferred {
                            retired.push(p);
                        } else {
                            pages.remove(&p);
                        }
                    }
                    (Err(_), None) => {}
                    (res, held) => {
                        return Err(format!(
                            "step {step}: unmap {r:?}[{slot}] gave {res:?}, shadow {held:?}"
                        ))
                    }
                }
            }
            5 => {
                let n = store
                    .flush_retired(&mut ledger)
                    .map_err(|e| e.to_string())?;
                if n != retired.len() {
                    return Err(format!(
                        "step {step}: flushed {n}, shadow {}",
                        retired.len()
                    ));
                }
                for p in retired.drain(..) {
                    pages.remove(&p);
                }
            }
            _ => {}
        }
        store
            .check_invariants()
            .map_err(|e| format!("step {step}: {e}"))?;
        for (r, (_, slots)) in &ranges {
            let view = store.contiguous_view(*r).map_err(|e| e.to_string())?;
            let want: Vec<Option<u32>> = slots.iter().map(|s| s.map(|p| p.0 as u32)).collect();
            if view != want {
                return Err(format!(
                    "step {step}: view of {r:?} is {view:?}, history says {want:?}"
                ));
            }
        }
        for d in DEVS {
            let want = pages.values().filter(|x| **x == d).count() as u64 * store.page_size();
            if ledger.used(d) != want || store.live_bytes_on(d) != want {
                return Err(format!(
                    "step {step}: {d} ledger {} store {} shadow {want}",
                    ledger.used(d),
                    store.live_bytes_on(d)
                ));
            }
        }
    }
    // Tear everything down: nothing may leak.
    for (r, (_, slots)) in &ranges {
        for (i, s) in slots.iter().enumerate() {
            if s.is_some() {
                store
                    .unmap_and_free(&mut ledger, *r, i)
                    .map_err(|e| e.to_string())?;
            }
        }
    }
    store
        .flush_retired(&mut ledger)
        .map_err(|e| e.to_string())?;
    for p in store_pages(&pages, &store) {
        store.free_page(&mut ledger, p).map_err(|e| e.to_string())?;
    }
    for d in DEVS {
        if ledger.used(d) != 0 {
            return Err(format!("{} bytes leaked on {d}", ledger.used(d)));
        }
    }
    Ok(())
}

fn store_pages(shadow: &BTreeMap<PageId, DeviceId>, store: &PageStore) -> Vec<PageId> {
    shadow
        .keys()
        .filter(|p| store.page(**p).is_some())
        .copied()
        .collect()
}

/// Moving one expert costs `pages_per_expert` map operations whatever the
/// number of experts in the store.
fn remap_cost_is_constant(pages_per_expert: usize) -> Result<(), String> {
    let d = DeviceId(0);
    let mut costs = Vec::new();
    for experts in [4usize, 64, 512] {
        let mut store = PageStore::new(1 << 10);
        let mut ledger = MemoryLedger::new(&[d], 1 << 40);
        let n = experts * pages_per_expert;
        let src = store.reserve_range(d, n);
        let pages = store
            .alloc_pages(&mut ledger, d, n)
            .map_err(|e| e.to_string())?;
        for (i, p) in pages.iter().enumerate() {
            store.map_slot(src, i, *p).map_err(|e| e.to_string())?;
        }
        let dst = store.reserve_range(d, pages_per_expert);
        let before = store.count_ops(VmemOpKind::Map);
        for k in 0..pages_per_expert {
            let p = store
                .unmap_slot(src, n - pages_per_expert + k)
                .map_err(|e| e.to_string())?;
            store.map_slot(dst, k, p).map_err(|e| e.to_string())?;
        }
        costs.push(store.count_ops(VmemOpKind::Map) - before);
    }
    if costs.iter().all(|c| *c == pages_per_expert) {
        Ok(())
    } else {
        Err(format!("map ops per expert move by store size: {costs:?}"))
    }
}

fn throughput_windows(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let Some(c) = cs.iter().find(|c| c.name() == "throughput-offline") else {
        return Check::new(
            9,
            "throughput windows",
            vec!["throughput-offline missing".into()],
            String::new(),
        );
    };
    let w: BTreeMap<Strategy, _> = c
        .throughput()
        .into_iter()
        .map(|(s, w)| (s.strategy, w))
        .collect();
    let (Some(e), Some(cold), Some(col)) = (
        w.get(&Strategy::Elastic),
        w.get(&Strategy::ColdRestart),
        w.get(&Strategy::Colocated),
    ) else {
        return Check::new(
            9,
            "throughput windows",
            vec!["missing a strategy".into()],
            String::new(),
        );
    };
    if e.during.requests_per_s <= cold.during.requests_per_s {
        bad.push(format!(
            "during elastic {:.3} <= cold {:.3}",
            e.during.requests_per_s, cold.during.requests_per_s
        ));
    }
    for (name, ce, cc, cx) in [
        ("before", e.before, cold.before, col.before),
        ("during", e.during, cold.during, col.during),
        ("after", e.after, cold.after, col.after),
    ] {
        let others = ce.requests_per_s.min(cc.requests_per_s);
        if cx.requests_per_s >= others {
            bad.push(format!(
                "{name} colocated {:.3} not lowest ({:.3})",
                cx.requests_per_s, others
            ));
        }
        if name != "during" {
            let rel = (ce.requests_per_s - cc.requests_per_s).abs()
                / cc.requests_per_s.max(f64::MIN_POSITIVE);
            if rel > EQUAL_WINDOW_TOLERANCE {
                bad.push(format!(
                    "{name} elastic {:.3} vs cold {:.3}",
                    ce.requests_per_s, cc.requests_per_s
                ));
            }
        }
    }
    let ok = format!(
        "req/s during elastic {:.3} cold {:.3} colocated {:.3}",
        e.during.requests_per_s, cold.during.requests_per_s, col.during.requests_per_s
    );
    Check::new(9, "throughput windows", bad, ok)
}

fn slo_dynamics(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut notes = Vec::new();
    match cs.iter().find(|c| c.name() == "slo-dynamics-scaleup") {
        Some(c) => {
            let rec = c.recovery();
            let key = |r: Option<f64>| r.unwrap_or(f64::INFINITY);
            let e = rec
                .iter()
                .find(|(s, _)| is_full_elastic(*s))
                .map(|(_, r)| key(*r));
            for (s, r) in rec.iter().filter(|(s, _)| !is_full_elastic(*s)) {
                if e.is_none_or(|e| !(e < key(*r))) {
                    bad.push(format!("{s} recovers in {r:?}, elastic in {e:?}"));
                }
            }
            let shown: Vec<String> = rec
                .iter()
                .map(|(s, r)| format!("{s} {}", r.map_or("never".to_string(), |r| format!("{r}s"))))
                .collect();
            notes.push(format!("recovery {}", shown.join(", ")));
        }
        None => bad.push("slo-dynamics-scaleup missing".into()),
    }
    match cs.iter().find(|c| c.name() == "slo-dynamics-scaledown") {
        Some(c) => {
            let per = c.slo_per_device();
            let e = per
                .iter()
                .find(|(s, _)| is_full_elastic(*s))
                .and_then(|(_, v)| *v);
            for (s, v) in per.iter().filter(|(s, _)| !is_full_elastic(*s)) {
                if e.is_none_or(|e| v.is_some_and(|v| v >= e)) {
                    bad.push(format!("{s} SLO/device {v:?} vs elastic {e:?}"));
                }
            }
            notes.push(format!(
                "elastic SLO/device {}",
                e.map_or("-".to_string(), |e| format!("{e:.4}"))
            ));
        }
        None => bad.push("slo-dynamics-scaledown missing".into()),
    }
    Check::new(10, "SLO dynamics", bad, notes.join(", "))
}

fn slo_vs_rps(cs: &[Comparison]) -> Check {
    let mut bad = Vec::new();
    let mut by_rate: Vec<(f64, &Comparison)> = Vec::new();
    for c in with_prefix(cs, "slo-vs-rps-") {
        if let ArrivalPattern::FixedRps { rps } = c.scenario.workload.arrivals {
            by_rate.push((rps, c));
        }
    }
    by_rate.sort_by(|a, b| a.0.total_cmp(&b.0));
    if by_rate.is_empty() {
        return Check::new(
            11,
            "SLO vs RPS",
            vec!["no slo-vs-rps scenarios".into()],
            String::new(),
        );
    }
    let sustained = |spec: StrategySpec| -> Option<f64> {
        by_rate
            .iter()
            .filter(|(_, c)| {
                c.attainment()
                    .iter()
                    .any(|(s, a)| *s == spec && a.is_some_and(|a| a >= SUSTAINED_ATTAINMENT))
            })
            .map(|(r, _)| *r)
            .reduce(f64::max)
    };
    let e = sustained(StrategySpec::plain(Strategy::Elastic));
    let cold = sustained(StrategySpec::plain(Strategy::ColdRestart));
    let col = sustained(StrategySpec::plain(Strategy::Colocated));
    let rank = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
    if e.is_none() || rank(e) <= rank(cold) || rank(e) <= rank(col) {
        bad.push(format!(
            "sustained rps elastic {e:?} cold {cold:?} colocated {col:?}"
        ));
    }
    let (lowest, c) = by_rate[0];
    let col_low = c
        .attainment()
        .into_iter()
        .find(|(s, _)| s.strategy == Strategy::Colocated)
        .and_then(|(_, a)| a);
    if col_low.is_none_or(|a| a >= COLOCATED_FLOOR) {
        bad.push(format!("colocated at {lowest} rps attains {col_low:?}"));
    }
    let show = |v: Option<f64>| v.map_or("none".to_string(), |v| format!("{v} rps"));
    let ok = format!(
        "sustained elastic {} cold {} colocated {}; colocated attains {:.3} at {lowest} rps",
        show(e),
        show(cold),
        show(col),
        col_low.unwrap_or(f64::NAN)
    );
    Check::new(11, "SLO vs RPS", bad, ok)
}

fn determinism(cs: &[Comparison], again: &[runner::Outcome]) -> Check {
    let mut bad = Vec::new();
    let first = cs.iter().flat_map(|c| c.outcomes.iter());
    let mut n = 0;
    for (a, b) in first.zip(again) {
        n += 1;
        let same = match (&a.result, &b.result) {
            (Ok(x), Ok(y)) => serde_json::to_string(x).ok() == serde_json::to_string(y).ok(),
            (Err(x), Err(y)) => x == y,
            _ => false,
        };
        if !same || a.scenario != b.scenario || a.strategy != b.strategy {
            bad.push(format!(
                "{} {} differs between execution modes",
                a.scenario, a.strategy
            ));
        }
    }
    if n != again.len() {
        bad.push(format!("{n} runs vs {}", again.len()));
    }
    Check::new(
        12,
        "determinism",
        bad,
        format!("{n} runs identical across execution modes"),
    )
}

/// Checks one run's lifecycle trace and routing: only legal edges, at most
/// one active instance at a time, no admission to a retired instance, and
/// every arrival completed.
pub fn check_run(log: &RunLog) -> Result<(), String> {
    let mut state: BTreeMap<InstanceId, InstanceState> = BTreeMap::new();
    let mut retired_at: BTreeMap<InstanceId, f64> = BTreeMap::new();
    let mut last_time = f64::NEG_INFINITY;
    for ev in &log.lifecycle {
        if ev.time < last_time {
            return Err(format!("lifecycle goes back in time at {}", ev.time));
        }
        last_time = ev.time;
        let cur = state
            .get(&ev.instance)
            .copied()
            .unwrap_or(InstanceState::Cold);
        if cur != ev.old_state || !ev.old_state.can_become(ev.new_state) {
            return Err(format!(
                "{:?}: {:?} -> {:?} (was {cur:?})",
                ev.instance, ev.old_state, ev.new_state
            ));
        }
        state.insert(ev.instance, ev.new_state);
        let active = state
            .values()
            .filter(|s| **s == InstanceState::Active)
            .count();
        if active > 1 {
            return Err(format!("{active} active instances at {}", ev.time));
        }
        if ev.new_state == InstanceState::Retired {
            retired_at.insert(ev.instance, ev.time);
        }
    }
    for a in &log.admissions {
        if let Some(id) = a.instance {
            if retired_at.get(&id).is_some_and(|t| a.time >= *t) {
                return Err(format!("request {:?} routed to retired {id:?}", a.request));
            }
        }
    }
    let open = log
        .requests
        .iter()
        .filter(|r| r.completion.is_none())
        .count();
    if open != 0 {
        return Err(format!(
            "{open} of {} requests never completed",
            log.requests.len()
        ));
    }
    Ok(())
}

/// Random commands, rates and strategies on a small cluster.
pub fn fuzz_scenarios(seed: u64, count: usize) -> Vec<Resolved> {
    let cal = presets::calibration();
    let base = presets::scenario("ablation-scaleup").expect("shipped preset");
    let specs: Vec<StrategySpec> = Strategy::ALL
        .into_iter()
        .map(StrategySpec::plain)
        .chain(StrategySpec::ladder().into_iter().skip(1))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let mut sc: Scenario = base.clone();
            sc.name = format!("fuzz-{seed}-{i}");
            sc.seed = rng.random();
            sc.initial.dp = rng.random_range(1..=4);
            sc.commands = (0..rng.random_range(1..=4))
                .map(|_| CommandSpec {
                    at: rng.random_range(0.0..150.0),
                    dp: rng.random_range(1..=4),
                })
                .collect();
            sc.autoscale = rng.random_bool(0.3);
            sc.pause_intake_during_scaling = rng.random_bool(0.7);
            sc.preseed_standby = rng.random_bool(0.5);
            sc.workload.arrivals = ArrivalPattern::FixedRps {
                rps: rng.random_range(0.2..4.0),
            };
            sc.workload.duration = rng.random_range(60.0..240.0);
            sc.strategies = vec![specs[rng.random_range(0..specs.len())]];
            sc.resolve(&cal).expect("fuzz scenario is valid")
        })
        .collect()
}

fn lifecycle_safety(cs: &[Comparison], seed: u64) -> Check {
    let mut bad = Vec::new();
    let mut events = 0u64;
    for c in cs {
        for (s, log) in c.runs() {
            events += log.events_processed;
            if let Err(e) = check_run(log) {
                bad.push(format!("{} {s}: {e}", c.name()));
            }
        }
        for (s, e) in c.failures() {
            bad.push(format!("{} {s}: {e}", c.name()));
        }
    }
    let fuzz = fuzz_scenarios(seed, 64);
    let mut fuzz_events = 0;
    for o in runner::run_all(&fuzz, Execution::Parallel) {
        match o.result {
            Ok(log) => {
                fuzz_events += log.events_processed;
                if let Err(e) = check_run(&log) {
                    bad.push(format!("{} {}: {e}", o.scenario, o.strategy));
                }
            }
            Err(e) if e.is_infeasible() => {}
            Err(e) => bad.push(format!("{} {}: {e}", o.scenario, o.strategy)),
        }
    }
    if fuzz_events < FUZZ_MIN_EVENTS {
        bad.push(format!("fuzz processed only {fuzz_events} events"));
    }
    Check::new(
        13,
        "lifecycle safety",
        bad,
        format!("{events} preset events, {fuzz_events} fuzz events"),
    )
}
