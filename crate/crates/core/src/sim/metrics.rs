//! Metrics derived from a [`RunLog`]. Every function here is pure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::coordinator::SloPolicy;
use crate::fabric::LedgerSample;
use crate::sim::log::{RequestRecord, RunLog};

/// Lead and trail added around the slowest transition for the `during`
/// throughput window.
pub const DURING_MARGIN: f64 = 5.0;

pub fn meets(r: &RequestRecord, slo: &SloPolicy) -> Option<bool> {
    Some(slo.meets(r.ttft()?, r.tpot()?))
}

/// Fraction of requests arriving in `[from, to)` that met the SLO. `None`
/// when no request arrived in the range.
pub fn attainment(requests: &[RequestRecord], slo: &SloPolicy, from: f64, to: f64) -> Option<f64> {
    let (mut met, mut n) = (0u64, 0u64);
    for r in requests
        .iter()
        .filter(|r| r.arrival >= from && r.arrival < to)
    {
        n += 1;
        met += meets(r, slo).unwrap_or(false) as u64;
    }
    (n > 0).then(|| met as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub start: f64,
    pub end: f64,
    pub arrivals: u64,
    pub attainment: Option<f64>,
}

/// Attainment per arrival window of length `window` over `[0, until)`.
pub fn windowed_attainment(
    requests: &[RequestRecord],
    slo: &SloPolicy,
    window: f64,
    until: f64,
) -> Vec<WindowPoint> {
    let n = (until / window).ceil().max(0.0) as usize;
    let mut counts = vec![(0u64, 0u64); n];
    for r in requests {
        let k = (r.arrival / window).floor();
        if k >= 0.0 && (k as usize) < n {
            let c = &mut counts[k as usize];
            c.1 += 1;
            c.0 += meets(r, slo).unwrap_or(false) as u64;
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, (met, total))| WindowPoint {
            start: k as f64 * window,
            end: (k + 1) as f64 * window,
            arrivals: total,
            attainment: (total > 0).then(|| met as f64 / total as f64),
        })
        .collect()
}

/// Time from `cmd` to the start of the first window after which every
/// judged window meets `target`. Windows starting before `cmd` are ignored.
pub fn recovery_time(points: &[WindowPoint], cmd: f64, target: f64) -> Option<f64> {
    let after: Vec<&WindowPoint> = points.iter().filter(|p| p.start >= cmd).collect();
    let mut recovered = None;
    for p in after.iter().rev() {
        match p.attainment {
            Some(a) if a < target => break,
            _ => recovered = Some(p.start),
        }
    }
    // A tail with no judged windows is no evidence of recovery.
    let judged = after
        .iter()
        .any(|p| recovered.is_some_and(|s| p.start >= s) && p.attainment.is_some());
    if judged {
        recovered.map(|s| s - cmd)
    } else {
        None
    }
}

/// Time-averaged number of devices holding any memory over `[from, to]`.
pub fn mean_devices_in_use(trace: &[LedgerSample], from: f64, to: f64) -> f64 {
    if to <= from {
        return 0.0;
    }
    let mut samples: Vec<&LedgerSample> = trace.iter().collect();
    samples.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut used: BTreeMap<_, u64> = BTreeMap::new();
    let in_use = |m: &BTreeMap<_, u64>| m.values().filter(|u| **u > 0).count() as f64;
    let mut area = 0.0;
    let mut t = from;
    for s in samples {
        if s.time > from {
            let until = s.time.min(to);
            if until > t {
                area += in_use(&used) * (until - t);
                t = until;
            }
        }
        if s.time >= to {
            break;
        }
        used.insert(s.device, s.used);
    }
    if to > t {
        area += in_use(&used) * (to - t);
    }
    area / (to - from)
}

/// Attainment of requests arriving after `from`, per device in use over
/// the rest of the run.
pub fn slo_per_device(log: &RunLog, slo: &SloPolicy, from: f64) -> Option<f64> {
    let a = attainment(&log.requests, slo, from, f64::INFINITY)?;
    let devices = mean_devices_in_use(&log.ledger, from, log.end_time);
    (devices > 0.0).then(|| a / devices)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub start: f64,
    pub end: f64,
    pub tokens_per_s: f64,
    pub requests_per_s: f64,
}

/// Generated tokens and completed requests per second in `[from, to)`.
pub fn throughput(log: &RunLog, from: f64, to: f64) -> Throughput {
    let len = to - from;
    let tokens: u64 = log
        .tokens
        .iter()
        .filter(|s| s.time >= from && s.time < to)
        .map(|s| s.tokens as u64)
        .sum();
    let done = log
        .requests
        .iter()
        .filter(|r| r.completion.is_some_and(|c| c >= from && c < to))
        .count();
    let rate = |x: f64| if len > 0.0 { x / len } else { 0.0 };
    Throughput {
        start: from,
        end: to,
        tokens_per_s: rate(tokens as f64),
        requests_per_s: rate(done as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputWindows {
    pub before: Throughput,
    pub during: Throughput,
    pub after: Throughput,
}

/// Before, during and after windows around a command at `cmd`. `during`
/// spans the slowest transition of the comparison set plus a margin on
/// both sides; the other two have length `window`.
pub fn throughput_windows(log: &RunLog, cmd: f64, slowest: f64, window: f64) -> ThroughputWindows {
    let d0 = cmd - DURING_MARGIN;
    let d1 = cmd + slowest + DURING_MARGIN;
    ThroughputWindows {
        before: throughput(log, (d0 - window).max(0.0), d0),
        during: throughput(log, d0, d1),
        after: throughput(log, d1, d1 + window),
    }
}

/// One summary row per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub strategy: String,
    pub requests: usize,
    pub attainment: Option<f64>,
    pub mean_ttft: Option<f64>,
    pub mean_tpot: Option<f64>,
    pub scale_latency: Option<f64>,
    pub downtime: Option<f64>,
    pub peak_mem_gb: Option<f64>,
    pub duplicate_disk_loads: u32,
    pub end_time: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0u64), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(log: &RunLog, slo: &SloPolicy) -> RunSummary {
    let first = log.scalings.first();
    RunSummary {
        scenario: log.scenario.clone(),
        strategy: log.strategy.clone(),
        requests: log.requests.len(),
        attainment: attainment(&log.requests, slo, f64::NEG_INFINITY, f64::INFINITY),
        mean_ttft: mean(log.requests.iter().filter_map(|r| r.ttft())),
        mean_tpot: mean(log.requests.iter().filter_map(|r| r.tpot())),
        scale_latency: first.map(|s| s.latency),
        downtime: first.map(|s| s.downtime),
        peak_mem_gb: first.map(|s| s.peak_mem as f64 / 1e9),
        duplicate_disk_loads: log.duplicate_disk_loads,
        end_time: log.end_time,
    }
}
