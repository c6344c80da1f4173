//! Writes a [`Comparison`] to a directory of CSV and JSONL files.
//!
//! File names depend only on the scenario and strategy names, and floats
//! are written with Rust's shortest round-trip formatting, so reruns with
//! the same inputs produce identical bytes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::sim::log::RunLog;
use crate::sim::metrics;
use crate::sim::report::Comparison;
use crate::sim::strategy::{Strategy, StrategySpec};

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn gb(bytes: u64) -> String {
    (bytes as f64 / 1e9).to_string()
}

struct Table {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl Table {
    fn create(path: PathBuf, header: &[&str]) -> Result<Table, ExportError> {
        let mut w = csv::Writer::from_path(&path).map_err(|source| ExportError::Csv {
            path: path.clone(),
            source,
        })?;
        w.write_record(header).map_err(|source| ExportError::Csv {
            path: path.clone(),
            source,
        })?;
        Ok(Table { path, w })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<(), ExportError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w
            .write_record(fields)
            .map_err(|source| ExportError::Csv {
                path: self.path.clone(),
                source,
            })
    }

    fn finish(mut self) -> Result<(), ExportError> {
        self.w.flush().map_err(|source| ExportError::Io {
            path: self.path,
            source,
        })
    }
}

fn jsonl<T: Serialize>(path: PathBuf, items: &[T]) -> Result<(), ExportError> {
    let io = |source| ExportError::Io {
        path: path.clone(),
        source,
    };
    let mut w = BufWriter::new(File::create(&path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|source| ExportError::Json {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn json<T: Serialize>(path: PathBuf, value: &T) -> Result<(), ExportError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| ExportError::Json {
        path: path.clone(),
        source,
    })?;
    bytes.push(b'\n');
    fs::write(&path, bytes).map_err(|source| ExportError::Io { path, source })
}

#[derive(Serialize)]
struct Skipped {
    strategy: String,
    reason: String,
}

/// Writes everything for one comparison into `dir/<scenario>/` and returns
/// that directory.
pub fn write_comparison(c: &Comparison, dir: &Path) -> Result<PathBuf, ExportError> {
    let out = dir.join(c.name());
    fs::create_dir_all(&out).map_err(|source| ExportError::Io {
        path: out.clone(),
        source,
    })?;
    write_summary(c, &out)?;
    write_scalings(c, &out)?;
    write_breakdown(c, &out)?;
    write_throughput(c, &out)?;
    write_attainment(c, &out)?;
    write_memory(c, &out)?;
    if c.runs()
        .filter(|(s, _)| s.strategy == Strategy::Elastic)
        .count()
        > 1
    {
        write_ablation(c, &out)?;
    }
    for (s, log) in c.runs() {
        write_requests(c, s, log, &out)?;
        jsonl(out.join(format!("lifecycle-{s}.jsonl")), &log.lifecycle)?;
        jsonl(out.join(format!("transfers-{s}.jsonl")), &log.transfers)?;
    }
    let skipped: Vec<Skipped> = c
        .skipped()
        .into_iter()
        .map(|(s, reason)| Skipped {
            strategy: s.to_string(),
            reason,
        })
        .collect();
    json(out.join("skipped.json"), &skipped)?;
    let summaries: Vec<_> = c
        .runs()
        .map(|(_, l)| metrics::summarize(l, &c.scenario.slo))
        .collect();
    json(out.join("summary.json"), &summaries)?;
    Ok(out)
}

fn write_summary(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join("summary.csv"),
        &[
            "strategy",
            "requests",
            "attainment",
            "mean_ttft",
            "mean_tpot",
            "scale_latency",
            "downtime",
            "peak_mem_gb",
            "duplicate_disk_loads",
            "end_time",
        ],
    )?;
    for (_, log) in c.runs() {
        let s = metrics::summarize(log, &c.scenario.slo);
        t.row([
            s.strategy,
            s.requests.to_string(),
            opt(s.attainment),
            opt(s.mean_ttft),
            opt(s.mean_tpot),
            opt(s.scale_latency),
            opt(s.downtime),
            opt(s.peak_mem_gb),
            s.duplicate_disk_loads.to_string(),
            s.end_time.to_string(),
        ])?;
    }
    t.finish()
}

fn write_scalings(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join("scalings.csv"),
        &[
            "strategy",
            "event",
            "cmd_time",
            "ready_time",
            "latency",
            "downtime",
            "peak_mem",
            "peak_device",
            "exec_duration",
            "commit_time",
        ],
    )?;
    for (_, log) in c.runs() {
        for r in &log.scalings {
            t.row([
                r.strategy.clone(),
                r.event.clone(),
                r.cmd_time.to_string(),
                r.ready_time.to_string(),
                r.latency.to_string(),
                r.downtime.to_string(),
                gb(r.peak_mem),
                gb(r.peak_device),
                r.exec_duration.to_string(),
                opt(r.commit_time),
            ])?;
        }
    }
    t.finish()
}

fn write_breakdown(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join("latency-breakdown.csv"),
        &["strategy", "event", "phase", "seconds"],
    )?;
    for (_, log) in c.runs() {
        for r in &log.scalings {
            let p = &r.phases;
            let phases = [
                ("group_init", p.group_init),
                ("weight_transfer", p.weight_transfer),
                ("page_remap", p.page_remap),
                ("kv_init", p.kv_init),
                ("instance_wait", p.instance_wait),
                ("attach", p.attach),
                ("warmup", p.warmup),
            ];
            for (name, secs) in phases {
                t.row([
                    r.strategy.as_str(),
                    r.event.as_str(),
                    name,
                    &secs.to_string(),
                ])?;
            }
        }
    }
    t.finish()
}

fn write_throughput(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join("throughput.csv"),
        &[
            "strategy",
            "window",
            "start",
            "end",
            "tokens_per_s",
            "requests_per_s",
        ],
    )?;
    for (s, w) in c.throughput() {
        for (name, x) in [
            ("before", w.before),
            ("during", w.during),
            ("after", w.after),
        ] {
            t.row([
                s.to_string(),
                name.to_string(),
                x.start.to_string(),
                x.end.to_string(),
                x.tokens_per_s.to_string(),
                x.requests_per_s.to_string(),
            ])?;
        }
    }
    t.finish()
}

/// Long-format `series,x,y`: windowed attainment by window start.
fn write_attainment(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(out.join("attainment.csv"), &["series", "x", "y"])?;
    for (s, log) in c.runs() {
        for p in c.attainment_series(log) {
            if let Some(a) = p.attainment {
                t.row([s.to_string(), p.start.to_string(), a.to_string()])?;
            }
        }
    }
    t.finish()
}

/// Long-format `series,x,y`: summed device memory in GB over time.
fn write_memory(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(out.join("memory.csv"), &["series", "x", "y"])?;
    for (s, log) in c.runs() {
        for sample in &log.ledger {
            t.row([s.to_string(), sample.time.to_string(), gb(sample.total)])?;
        }
    }
    t.finish()
}

fn write_ablation(c: &Comparison, out: &Path) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join("ablation.csv"),
        &["variant", "scale_time", "downtime", "peak_mem"],
    )?;
    for (s, log) in c.runs().filter(|(s, _)| s.strategy == Strategy::Elastic) {
        if let Some(r) = log.scalings.first() {
            t.row([
                s.ablation_label(),
                r.latency.to_string(),
                r.downtime.to_string(),
                gb(r.peak_mem),
            ])?;
        }
    }
    t.finish()
}

fn write_requests(
    c: &Comparison,
    s: StrategySpec,
    log: &RunLog,
    out: &Path,
) -> Result<(), ExportError> {
    let mut t = Table::create(
        out.join(format!("requests-{s}.csv")),
        &[
            "request_id",
            "arrival",
            "ttft",
            "tpot",
            "slo_met",
            "requeued",
        ],
    )?;
    for r in &log.requests {
        let met = metrics::meets(r, &c.scenario.slo).unwrap_or(false);
        t.row([
            r.id.0.to_string(),
            r.arrival.to_string(),
            opt(r.ttft()),
            opt(r.tpot()),
            met.to_string(),
            r.requeued.to_string(),
        ])?;
    }
    t.finish()
}
