//! The event loop: one scenario, one strategy, one trace.
//!
//! Events are ordered by `(time, seq)`. Everything the loop owns (HMM, IMM,
//! routing, servers) is mutated only from event handlers, so a run is a pure
//! function of its inputs.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use crate::coordinator::{
    step_config, AdmissionRecord, DowntimeTracker, Estimator, RoutingState, WindowSignal,
};
use crate::fabric::{FabricError, RegionId, RegionKind};
use crate::hmm::{ExecOptions, Hmm};
use crate::imm::{Fetch, Imm, InstanceId};
use crate::sim::log::{
    hmm_error, Phases, RequestRecord, RunLog, ScalingRecord, SimError, TokenSample,
};
use crate::sim::scenario::Resolved;
use crate::sim::strategy::{Strategy, StrategySpec};
use crate::sim::workload::Request;
use crate::topology::{DeviceId, ExpertPlacement, ParallelConfig};

/// Hard stop for runaway scenarios.
const MAX_EVENTS: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    Arrival(usize),
    StepDone { instance: InstanceId, epoch: u64 },
    Tick,
    Command(usize),
    PreinitDone(InstanceId),
    ExecDone,
    LoadDone,
    AttachDone(InstanceId),
    Ready(InstanceId),
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: the heap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Default)]
struct Queue {
    heap: BinaryHeap<Event>,
    seq: u64,
}

impl Queue {
    fn push(&mut self, time: f64, kind: EventKind) {
        self.heap.push(Event {
            time,
            seq: self.seq,
            kind,
        });
        self.seq += 1;
    }
}

/// A running instance and its continuous batch.
#[derive(Debug, Clone)]
struct Server {
    cfg: ParallelConfig,
    capacity: usize,
    running: Vec<usize>,
    /// Admitted this iteration, with the time their prefill emits a token.
    fresh: Vec<(usize, f64)>,
    busy: bool,
    epoch: u64,
    draining: bool,
}

/// What backs the serving instance in device memory.
#[derive(Debug, Clone)]
struct Backing {
    /// The HMM layout is part of the instance.
    hmm: bool,
    /// Regions allocated outside the HMM (baseline dense loads).
    dense: Vec<RegionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    /// Plan execution next to the serving instance, zero-copy attach.
    Live,
    /// Tear down, then start from disk.
    Restart,
    Extravagant,
    Colocated,
    Horizontal,
}

#[derive(Debug, Clone)]
struct Transition {
    flow: Flow,
    event: String,
    cmd_time: f64,
    from: ParallelConfig,
    /// Configuration of the instance being brought up.
    to: ParallelConfig,
    instance: Option<InstanceId>,
    standby: bool,
    weights_ready: bool,
    attaching: bool,
    exec_duration: f64,
    /// Devices that get dense weights and, if listed in `kv_on`, a KV cache.
    load_on: Option<ParallelConfig>,
    kv_on: BTreeSet<DeviceId>,
    new_dense: Vec<RegionId>,
    /// Regions the new instance attaches besides `new_dense`.
    inherited: Vec<RegionId>,
    /// Old regions handed to the new instance instead of freed.
    handoff: BTreeSet<RegionId>,
    old: Option<InstanceId>,
    ready_time: Option<f64>,
    /// Old and new instance share devices; both run slower.
    overlap: bool,
    trace_start: usize,
    device_peak_at_start: u64,
    phases: Phases,
    weights_done: f64,
    attach_start: f64,
    warm_start: f64,
}

pub struct Engine<'a> {
    sc: &'a Resolved,
    spec: StrategySpec,
    name: String,
    hmm: Hmm,
    imm: Imm,
    routing: RoutingState,
    downtime: DowntimeTracker,
    estimator: Estimator,
    queue: Queue,
    now: f64,
    reqs: Vec<RequestRecord>,
    generated: Vec<u32>,
    servers: BTreeMap<InstanceId, Server>,
    backing: Backing,
    transition: Option<Transition>,
    deferred: VecDeque<ParallelConfig>,
    scalings: Vec<ScalingRecord>,
    admissions: Vec<AdmissionRecord>,
    tokens: Vec<TokenSample>,
    outstanding: usize,
    events: u64,
    pool: Vec<DeviceId>,
    window_met: (u64, u64),
    window_util: (f64, u64),
}

/// Runs one strategy over a pre-generated trace.
pub fn run(sc: &Resolved, spec: StrategySpec, trace: &[Request]) -> Result<RunLog, SimError> {
    let mut e = Engine::new(sc, spec, trace)?;
    e.start()?;
    e.event_loop()?;
    e.finish()
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Resolved, spec: StrategySpec, trace: &[Request]) -> Result<Self, SimError> {
        let mut cluster = sc.cluster.clone();
        cluster.devices = sc.initial.device_set.clone();
        let reqs = trace
            .iter()
            .map(|r| RequestRecord {
                id: r.id,
                arrival: r.arrival,
                prefill_tokens: r.prefill_tokens,
                decode_tokens: r.decode_tokens,
                first_token: None,
                completion: None,
                instance: None,
                requeued: 0,
            })
            .collect();
        Ok(Engine {
            sc,
            spec,
            name: spec.to_string(),
            hmm: Hmm::new(sc.model.clone(), cluster),
            imm: Imm::new(sc.imm),
            routing: RoutingState::default(),
            downtime: DowntimeTracker::default(),
            estimator: Estimator::new(sc.slo),
            queue: Queue::default(),
            now: 0.0,
            reqs,
            generated: vec![0; trace.len()],
            servers: BTreeMap::new(),
            backing: Backing {
                hmm: true,
                dense: Vec::new(),
            },
            transition: None,
            deferred: VecDeque::new(),
            scalings: Vec::new(),
            admissions: Vec::new(),
            tokens: Vec::new(),
            outstanding: trace.len(),
            events: 0,
            pool: sc.cluster.devices.clone(),
            window_met: (0, 0),
            window_util: (0.0, 0),
        })
    }

    fn strategy(&self) -> Strategy {
        self.spec.strategy
    }

    fn uses_standby_pool(&self) -> bool {
        self.strategy() == Strategy::Elastic && !self.spec.flags.disable_preinit
    }

    fn reduced_kv(&self) -> bool {
        self.strategy() == Strategy::Colocated
    }

    /// Loads the initial layout so that it is complete at time zero, brings
    /// up the first instance and schedules the trace.
    fn start(&mut self) -> Result<(), SimError> {
        let initial = self.sc.initial.clone();
        let mut scratch = self.hmm.clone();
        let load = scratch
            .initialize(&initial, 0.0)
            .map_err(|e| hmm_error(&self.name, e))?;
        let t0 = -(load.end - load.start);
        self.hmm
            .initialize(&initial, t0)
            .map_err(|e| hmm_error(&self.name, e))?;

        let (id, _) = self.imm.preinit_uncached(&initial, 0.0);
        self.imm.finish_preinit(id, 0.0)?;
        let regions = self.hmm.current().expect("initialized").attach_regions();
        self.imm
            .begin_attach(id, &regions, self.hmm.fabric_mut(), 0.0)?;
        self.imm.begin_warmup(id, 0.0)?;
        self.imm.switch_active(id, 0.0)?;
        self.routing.switch_to(id);
        self.downtime.set_serving(true, 0.0);
        self.add_server(id, initial.clone());

        if self.uses_standby_pool() && self.sc.preseed_standby {
            let mut seed: Vec<ParallelConfig> = self.neighbours(&initial);
            seed.extend(self.sc.commands.iter().map(|c| c.1.clone()));
            for cfg in seed {
                if cfg != initial && !self.imm.is_cached(&cfg) {
                    let (sid, _) = self.imm.preinit(&cfg, 0.0);
                    self.imm.finish_preinit(sid, 0.0)?;
                }
            }
        }

        for (i, r) in self.reqs.iter().enumerate() {
            self.queue.push(r.arrival, EventKind::Arrival(i));
        }
        for (i, c) in self.sc.commands.iter().enumerate() {
            self.queue.push(c.0, EventKind::Command(i));
        }
        if self.sc.autoscale {
            self.queue.push(self.sc.slo.window, EventKind::Tick);
        }
        Ok(())
    }

    fn neighbours(&self, cfg: &ParallelConfig) -> Vec<ParallelConfig> {
        use crate::coordinator::ScaleDirection::{Down, Up};
        [Up, Down]
            .into_iter()
            .filter_map(|d| step_config(cfg, d, &self.pool))
            .collect()
    }

    fn add_server(&mut self, id: InstanceId, cfg: ParallelConfig) {
        let capacity = self.sc.perf.capacity(cfg.num_devices(), self.reduced_kv());
        self.servers.insert(
            id,
            Server {
                cfg,
                capacity,
                running: Vec::new(),
                fresh: Vec::new(),
                busy: false,
                epoch: 0,
                draining: false,
            },
        );
    }

    fn event_loop(&mut self) -> Result<(), SimError> {
        while let Some(ev) = self.queue.heap.pop() {
            if ev.time < self.now {
                return Err(SimError::Invariant(format!(
                    "event at {} processed after {}",
                    ev.time, self.now
                )));
            }
            self.now = ev.time;
            self.events += 1;
            if self.events > MAX_EVENTS {
                return Err(SimError::Invariant("event budget exhausted".into()));
            }
            match ev.kind {
                EventKind::Arrival(i) => self.on_arrival(i)?,
                EventKind::StepDone { instance, epoch } => self.on_step_done(instance, epoch)?,
                EventKind::Tick => self.on_tick()?,
                EventKind::Command(i) => {
                    let to = self.sc.commands[i].1.clone();
                    self.command(to)?;
                }
                EventKind::PreinitDone(id) => self.on_preinit_done(id)?,
                EventKind::ExecDone | EventKind::LoadDone => {
                    if let Some(t) = self.transition.as_mut() {
                        t.weights_ready = true;
                        t.weights_done = self.now;
                    }
                    self.try_attach()?;
                }
                EventKind::AttachDone(id) => {
                    if let Some(t) = self.transition.as_mut() {
                        t.warm_start = self.now;
                    }
                    let ready = self.imm.begin_warmup(id, self.now)?;
                    self.queue.push(ready, EventKind::Ready(id));
                }
                EventKind::Ready(id) => self.on_ready(id)?,
            }
        }
        Ok(())
    }

    fn interference(&self) -> f64 {
        match &self.transition {
            Some(t) if t.overlap => self.sc.perf.colocated_interference,
            _ => 1.0,
        }
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SimError> {
        let rec = self.routing.route(self.reqs[i].id, self.now);
        if let Some(target) = rec.instance {
            self.try_start(target)?;
        }
        Ok(())
    }

    /// Starts the next iteration on `id` if it is idle: pulls queued
    /// requests when it is the routing target, prefills them and runs one
    /// decode step for the running batch.
    fn try_start(&mut self, id: InstanceId) -> Result<(), SimError> {
        let interference = self.interference();
        let pulling = self.routing.target() == Some(id);
        let Some(s) = self.servers.get_mut(&id) else {
            return Ok(());
        };
        if s.busy {
            return Ok(());
        }
        let perf = &self.sc.perf;
        let mut admitted = Vec::new();
        if pulling {
            while s.running.len() + admitted.len() < s.capacity {
                let Some(r) = self.routing.pending.pop_front() else {
                    break;
                };
                self.imm.admit(id)?;
                self.admissions.push(AdmissionRecord {
                    request: r,
                    time: self.now,
                    instance: Some(id),
                });
                admitted.push(r.0 as usize);
            }
        }
        if admitted.is_empty() && s.running.is_empty() {
            return Ok(());
        }
        let dp = s.cfg.dp;
        let devices = s.cfg.num_devices();
        let mut prompt = 0u64;
        for r in admitted {
            // A requeued request recomputes its prompt and generated tokens.
            prompt += self.reqs[r].prefill_tokens as u64 + self.generated[r] as u64;
            let t = self.now + perf.prefill_time(prompt, dp) * interference;
            s.fresh.push((r, t));
        }
        let step = perf.prefill_time(prompt, dp) + perf.decode_step(s.running.len(), devices);
        let batch = s.running.len() + s.fresh.len();
        self.window_util.0 += batch as f64 / s.capacity as f64;
        self.window_util.1 += 1;
        s.busy = true;
        s.epoch += 1;
        let epoch = s.epoch;
        self.queue.push(
            self.now + step * interference,
            EventKind::StepDone {
                instance: id,
                epoch,
            },
        );
        Ok(())
    }

    fn on_step_done(&mut self, id: InstanceId, epoch: u64) -> Result<(), SimError> {
        let Some(s) = self.servers.get_mut(&id) else {
            return Ok(());
        };
        if s.epoch != epoch || !s.busy {
            return Ok(());
        }
        s.busy = false;
        let mut emitted = 0u32;
        let mut done = Vec::new();
        let mut still = Vec::with_capacity(s.running.len() + s.fresh.len());
        for r in std::mem::take(&mut s.running) {
            self.generated[r] += 1;
            emitted += 1;
            if self.generated[r] >= self.reqs[r].decode_tokens {
                done.push((r, self.now));
            } else {
                still.push(r);
            }
        }
        for (r, first) in std::mem::take(&mut s.fresh) {
            self.generated[r] += 1;
            emitted += 1;
            let rec = &mut self.reqs[r];
            if rec.first_token.is_none() {
                rec.first_token = Some(first);
            }
            if self.generated[r] >= rec.decode_tokens {
                // The prompt pass emitted the last token.
                done.push((r, first));
            } else {
                still.push(r);
            }
        }
        s.running = still;
        let draining_idle = s.draining && s.running.is_empty();
        self.tokens.push(TokenSample {
            time: self.now,
            tokens: emitted,
        });
        for (r, at) in done {
            let rec = &mut self.reqs[r];
            rec.completion = Some(at);
            rec.instance = Some(id);
            self.imm.complete(id)?;
            self.outstanding -= 1;
            let met = self.sc.slo.meets(
                rec.ttft().expect("has first token"),
                rec.tpot().expect("completed"),
            );
            self.window_met.0 += met as u64;
            self.window_met.1 += 1;
        }
        if draining_idle {
            self.retire_old(id)
        } else {
            self.try_start(id)
        }
    }

    fn on_tick(&mut self) -> Result<(), SimError> {
        let (met, total) = std::mem::take(&mut self.window_met);
        let (util, n) = std::mem::take(&mut self.window_util);
        let signal = WindowSignal {
            attainment: (total > 0).then(|| met as f64 / total as f64),
            utilization: if n > 0 { util / n as f64 } else { 0.0 },
        };
        let in_flight = self.transition.is_some() || !self.deferred.is_empty();
        if let Some(dir) = self.estimator.observe(signal, in_flight) {
            let current = self.active_cfg()?;
            if let Some(to) = step_config(&current, dir, &self.pool) {
                self.command(to)?;
            }
        }
        if self.now < self.sc.workload.duration || self.outstanding > 0 || self.transition.is_some()
        {
            self.queue
                .push(self.now + self.sc.slo.window, EventKind::Tick);
        }
        Ok(())
    }

    fn active_cfg(&self) -> Result<ParallelConfig, SimError> {
        let id = self
            .routing
            .active
            .ok_or_else(|| SimError::Invariant("no active instance".into()))?;
        Ok(self.servers[&id].cfg.clone())
    }

    fn command(&mut self, to: ParallelConfig) -> Result<(), SimError> {
        if self.transition.is_some() {
            self.deferred.push_back(to);
            return Ok(());
        }
        let from = self.active_cfg()?;
        if to == from {
            return Ok(());
        }
        let flow = match self.strategy() {
            Strategy::Elastic if self.spec.flags.disable_zero_copy => Flow::Restart,
            Strategy::Elastic => Flow::Live,
            Strategy::ColdRestart => Flow::Restart,
            Strategy::Extravagant => Flow::Extravagant,
            Strategy::Colocated => Flow::Colocated,
            Strategy::Horizontal => Flow::Horizontal,
        };
        let fresh: Vec<DeviceId> = self
            .pool
            .iter()
            .filter(|d| !from.contains(**d))
            .copied()
            .collect();
        let infeasible = |reason: String| SimError::Infeasible {
            strategy: self.name.clone(),
            reason,
        };
        let target = match flow {
            Flow::Extravagant => {
                if fresh.len() < to.num_devices() {
                    return Err(infeasible(format!(
                        "needs {} devices, cluster has {}",
                        from.num_devices() + to.num_devices(),
                        self.pool.len()
                    )));
                }
                ParallelConfig::on_first(to.dp, to.tp, &fresh)
            }
            Flow::Horizontal => {
                if to.num_devices() != 2 * from.num_devices() || fresh.len() < from.num_devices() {
                    return Err(infeasible(format!(
                        "replicas only double resources; {} -> {} devices",
                        from.num_devices(),
                        to.num_devices()
                    )));
                }
                let replica = ParallelConfig::on_first(from.dp, from.tp, &fresh);
                let mut devices = from.device_set.clone();
                devices.extend(replica.device_set.iter().copied());
                ParallelConfig::new(2 * from.dp, from.tp, devices)
            }
            _ => to.clone(),
        };
        let ledger = self.hmm.fabric_mut().ledger_mut();
        ledger.set_time(self.now);
        ledger.begin_window();
        let trace_start = ledger.trace().len();
        let device_peak_at_start = self
            .pool
            .iter()
            .map(|d| self.hmm.fabric().ledger().used(*d))
            .max()
            .unwrap_or(0);
        let old = self.routing.active;
        self.transition = Some(Transition {
            flow,
            event: format!("{}->{}", from.num_devices(), to.num_devices()),
            cmd_time: self.now,
            from: from.clone(),
            to: target.clone(),
            instance: None,
            standby: false,
            weights_ready: false,
            attaching: false,
            exec_duration: 0.0,
            load_on: None,
            kv_on: BTreeSet::new(),
            new_dense: Vec::new(),
            inherited: Vec::new(),
            handoff: BTreeSet::new(),
            old,
            ready_time: None,
            overlap: false,
            trace_start,
            device_peak_at_start,
            phases: Phases::default(),
            weights_done: self.now,
            attach_start: self.now,
            warm_start: self.now,
        });
        match flow {
            Flow::Live => self.start_live(&target),
            Flow::Restart => self.start_restart(&target),
            Flow::Extravagant | Flow::Colocated | Flow::Horizontal => {
                self.start_dense(flow, &from, &target)
            }
        }
    }

    fn register_devices(&mut self, cfg: &ParallelConfig) -> Result<(), SimError> {
        let unknown: Vec<DeviceId> = cfg
            .device_set
            .iter()
            .filter(|d| !self.hmm.fabric().cluster().contains(**d))
            .copied()
            .collect();
        if unknown.is_empty() {
            return Ok(());
        }
        self.hmm
            .add_nodes(&unknown)
            .map_err(|e| hmm_error(&self.name, e))
    }

    fn start_live(&mut self, to: &ParallelConfig) -> Result<(), SimError> {
        self.register_devices(to)?;
        let plan = self
            .hmm
            .compute_plan(to)
            .map_err(|e| hmm_error(&self.name, e))?;
        if self.sc.pause_intake {
            self.routing.paused = true;
        }
        let opts = ExecOptions {
            p2p: !self.spec.flags.disable_p2p,
            ipc_alloc: !self.spec.flags.disable_ipc_alloc,
        };
        let rec = self
            .hmm
            .execute_plan(&plan, self.now, opts)
            .map_err(|e| hmm_error(&self.name, e))?;
        self.queue.push(rec.end, EventKind::ExecDone);
        let (instance, standby) = if self.spec.flags.disable_preinit {
            let (id, ready) = self.imm.preinit_uncached(to, self.now);
            self.queue.push(ready, EventKind::PreinitDone(id));
            (id, false)
        } else {
            match self.imm.fetch(to) {
                Fetch::Hit(id) => (id, true),
                // Its completion event is already queued.
                Fetch::Pending(id, _) => (id, false),
                Fetch::Miss => {
                    let (id, ready) = self.imm.preinit_uncached(to, self.now);
                    self.queue.push(ready, EventKind::PreinitDone(id));
                    (id, false)
                }
            }
        };
        let t = self.transition.as_mut().expect("started");
        t.exec_duration = rec.duration();
        t.phases.group_init = rec.group_init_end - rec.start;
        t.phases.weight_transfer = rec.transfer_end - rec.group_init_end;
        t.phases.page_remap = rec.map_end - rec.transfer_end;
        t.phases.kv_init = rec.end - rec.map_end;
        t.instance = Some(instance);
        t.standby = standby;
        self.try_attach()
    }

    /// Drops the serving instance, requeueing its work, frees its memory and
    /// starts a fresh process for `to`.
    fn start_restart(&mut self, to: &ParallelConfig) -> Result<(), SimError> {
        let old = self
            .routing
            .take_down()
            .ok_or_else(|| SimError::Invariant("restart without an active instance".into()))?;
        let server = self.servers.remove(&old).expect("active server");
        let mut work: Vec<usize> = server.running;
        work.extend(server.fresh.iter().map(|f| f.0));
        for r in work.iter().rev() {
            self.reqs[*r].requeued += 1;
            self.routing.pending.push_front(self.reqs[*r].id);
        }
        self.imm.abort_inflight(old)?;
        self.imm.drain(old, self.now)?;
        if !self.imm.try_retire(old, self.hmm.fabric_mut(), self.now)? {
            return Err(SimError::Invariant(format!(
                "{old} did not retire after abort"
            )));
        }
        self.downtime.set_serving(false, self.now);
        self.release_backing(&BTreeSet::new())?;
        self.register_devices(to)?;
        let (id, ready) = self.imm.preinit_uncached(to, self.now);
        self.queue.push(ready, EventKind::PreinitDone(id));
        let t = self.transition.as_mut().expect("started");
        t.instance = Some(id);
        t.old = None;
        Ok(())
    }

    fn start_dense(
        &mut self,
        flow: Flow,
        from: &ParallelConfig,
        target: &ParallelConfig,
    ) -> Result<(), SimError> {
        let old = self.routing.active.expect("checked by caller");
        let old_regions: Vec<RegionId> = self
            .imm
            .instance(old)
            .expect("active")
            .attach_records
            .iter()
            .map(|r| r.region)
            .collect();
        let (load_on, kv_on, inherited, handoff) = match flow {
            Flow::Extravagant => (
                target.clone(),
                target.device_set.iter().copied().collect(),
                Vec::new(),
                BTreeSet::new(),
            ),
            Flow::Colocated => {
                // Shared devices keep their KV cache; it moves to the new
                // instance with the device.
                let kv_on: BTreeSet<DeviceId> = target
                    .device_set
                    .iter()
                    .filter(|d| !from.contains(**d))
                    .copied()
                    .collect();
                let handoff: BTreeSet<RegionId> = old_regions
                    .iter()
                    .filter(|r| {
                        self.hmm
                            .fabric()
                            .region(**r)
                            .is_some_and(|h| h.kind == RegionKind::Kv && target.contains(h.device))
                    })
                    .copied()
                    .collect();
                self.routing.paused = true;
                (
                    target.clone(),
                    kv_on,
                    handoff.iter().copied().collect(),
                    handoff,
                )
            }
            Flow::Horizontal => {
                let replica_devices: Vec<DeviceId> = target
                    .device_set
                    .iter()
                    .filter(|d| !from.contains(**d))
                    .copied()
                    .collect();
                let replica = ParallelConfig::new(from.dp, from.tp, replica_devices);
                let kv = replica.device_set.iter().copied().collect();
                (replica, kv, old_regions, BTreeSet::new())
            }
            Flow::Live | Flow::Restart => unreachable!("not a dense flow"),
        };
        self.register_devices(&load_on)?;
        let (id, ready) = self.imm.preinit_uncached(target, self.now);
        self.queue.push(ready, EventKind::PreinitDone(id));
        let t = self.transition.as_mut().expect("started");
        t.instance = Some(id);
        t.load_on = Some(load_on);
        t.kv_on = kv_on;
        t.inherited = inherited;
        t.handoff = handoff;
        t.overlap = flow == Flow::Colocated;
        Ok(())
    }

    fn on_preinit_done(&mut self, id: InstanceId) -> Result<(), SimError> {
        self.imm.finish_preinit(id, self.now)?;
        let Some(t) = self.transition.as_ref() else {
            return Ok(());
        };
        if t.instance != Some(id) {
            return Ok(());
        }
        let flow = t.flow;
        self.transition.as_mut().expect("checked").standby = true;
        match flow {
            Flow::Live => self.try_attach(),
            Flow::Restart => {
                let to = self.transition.as_ref().expect("checked").to.clone();
                let rec = self
                    .hmm
                    .initialize_with(&to, self.now, false)
                    .map_err(|e| hmm_error(&self.name, e))?;
                let t = self.transition.as_mut().expect("checked");
                t.exec_duration = rec.end - rec.start;
                t.phases.weight_transfer = rec.end - rec.start;
                t.inherited = self.hmm.current().expect("initialized").attach_regions();
                self.queue.push(rec.end, EventKind::LoadDone);
                Ok(())
            }
            Flow::Extravagant | Flow::Colocated | Flow::Horizontal => {
                let (regions, end) = self.dense_load(id)?;
                let t = self.transition.as_mut().expect("checked");
                t.exec_duration = end - self.now;
                t.phases.weight_transfer = end - self.now;
                t.new_dense = regions;
                self.queue.push(end, EventKind::LoadDone);
                Ok(())
            }
        }
    }

    /// Loads a full private copy of the weights for a baseline instance from
    /// disk. Returns the new regions and when the last load finishes.
    fn dense_load(&mut self, id: InstanceId) -> Result<(Vec<RegionId>, f64), SimError> {
        let t = self.transition.as_ref().expect("in flight");
        let cfg = t.load_on.clone().expect("dense flow");
        let kv_on = t.kv_on.clone();
        let model = self.sc.model.clone();
        let placement = ExpertPlacement::contiguous(model.num_experts_total, &cfg);
        let family = format!("inst{}", id.0);
        let at = self.now;
        let oom = |e: FabricError| match e {
            FabricError::OutOfMemory { .. } => SimError::Infeasible {
                strategy: self.name.clone(),
                reason: e.to_string(),
            },
            other => SimError::invariant(other),
        };
        let fabric = self.hmm.fabric_mut();
        let mut regions = Vec::new();
        let mut end = at;
        for d in &cfg.device_set {
            let rank = cfg.tp_rank(*d).expect("member");
            let (r, ev) = fabric
                .disk_copy(
                    *d,
                    model.attention_shard_bytes,
                    &format!("attn/tp{rank}"),
                    RegionKind::Attention,
                    at,
                )
                .map_err(oom)?;
            regions.push(r);
            end = end.max(ev.end());
            let bytes = placement.count_on(*d) as u64 * model.bytes_per_expert;
            let (r, ev) = fabric
                .disk_copy(
                    *d,
                    bytes,
                    &format!("{family}/experts/{d}"),
                    RegionKind::ExpertBlock,
                    at,
                )
                .map_err(oom)?;
            regions.push(r);
            end = end.max(ev.end());
            if kv_on.contains(d) {
                let (r, ev) = fabric
                    .kv_init(*d, model.kv_bytes_per_device(), &family, at)
                    .map_err(oom)?;
                regions.push(r);
                end = end.max(ev.end());
            }
        }
        Ok((regions, end))
    }

    fn try_attach(&mut self) -> Result<(), SimError> {
        let Some(t) = self.transition.as_ref() else {
            return Ok(());
        };
        if !t.standby || !t.weights_ready || t.attaching {
            return Ok(());
        }
        let id = t.instance.expect("instance chosen");
        let regions: Vec<RegionId> = match t.flow {
            Flow::Live => self.hmm.prepared().expect("executed").attach_regions(),
            _ => t
                .inherited
                .iter()
                .chain(t.new_dense.iter())
                .copied()
                .collect(),
        };
        let t = self.transition.as_mut().expect("checked");
        t.attaching = true;
        t.attach_start = self.now;
        let warm = self
            .imm
            .begin_attach(id, &regions, self.hmm.fabric_mut(), self.now)?;
        self.queue.push(warm, EventKind::AttachDone(id));
        Ok(())
    }

    /// New instance can serve: switch traffic atomically and start draining
    /// the old one.
    fn on_ready(&mut self, id: InstanceId) -> Result<(), SimError> {
        let old = self.imm.switch_active(id, self.now)?;
        if self.imm.active_count() != 1 {
            return Err(SimError::Invariant("more than one active instance".into()));
        }
        self.routing.switch_to(id);
        self.routing.draining.retain(|d| Some(*d) == old);
        self.downtime.set_serving(true, self.now);
        let t = self.transition.as_mut().expect("in flight");
        t.ready_time = Some(self.now);
        let to = t.to.clone();
        let flow = t.flow;
        self.add_server(id, to);
        match old {
            None => {
                // Restart: nothing left to release.
                self.backing = Backing {
                    hmm: true,
                    dense: Vec::new(),
                };
                debug_assert_eq!(flow, Flow::Restart);
                self.complete_transition()?;
            }
            Some(o) => {
                let s = self.servers.get_mut(&o).expect("old server");
                s.draining = true;
                if !s.busy && s.running.is_empty() {
                    self.retire_old(o)?;
                }
            }
        }
        self.try_start(id)
    }

    /// The drained old instance goes away and its memory is released
    /// according to the flow.
    fn retire_old(&mut self, old: InstanceId) -> Result<(), SimError> {
        if !self.imm.try_retire(old, self.hmm.fabric_mut(), self.now)? {
            return Err(SimError::Invariant(format!(
                "{old} drained but cannot retire"
            )));
        }
        self.servers.remove(&old);
        self.routing.draining.retain(|d| *d != old);
        let t = self.transition.as_ref().expect("in flight").clone();
        match t.flow {
            Flow::Live => {
                self.hmm
                    .commit_switchover(self.now)
                    .map_err(SimError::invariant)?;
            }
            Flow::Extravagant | Flow::Colocated => {
                self.release_backing(&t.handoff)?;
                let mut dense = t.new_dense.clone();
                dense.extend(t.handoff.iter().copied());
                self.backing = Backing { hmm: false, dense };
            }
            Flow::Horizontal => {
                self.backing.dense.extend(t.new_dense.iter().copied());
            }
            Flow::Restart => unreachable!("restart has no draining instance"),
        }
        self.complete_transition()
    }

    /// Frees whatever backs the serving instance, except `keep`.
    fn release_backing(&mut self, keep: &BTreeSet<RegionId>) -> Result<(), SimError> {
        if self.backing.hmm && self.hmm.current().is_some() {
            self.hmm
                .release_all(self.now, keep)
                .map_err(SimError::invariant)?;
        }
        for r in std::mem::take(&mut self.backing.dense) {
            if keep.contains(&r) {
                continue;
            }
            let fabric = self.hmm.fabric_mut();
            fabric.clear_owners(r);
            fabric
                .free_region(r, self.now)
                .map_err(SimError::invariant)?;
        }
        Ok(())
    }

    fn complete_transition(&mut self) -> Result<(), SimError> {
        let t = self.transition.take().expect("in flight");
        let ready = t.ready_time.expect("ready before completion");
        let mut phases = t.phases;
        phases.attach = t.warm_start - t.attach_start;
        phases.warmup = ready - t.warm_start;
        phases.instance_wait = match t.flow {
            // Preinit runs first, then the weights load.
            Flow::Live => t.attach_start - t.weights_done,
            _ => t.attach_start - t.cmd_time - phases.weight_transfer,
        };
        let ledger = self.hmm.fabric().ledger();
        let peak_device = ledger.trace()[t.trace_start..]
            .iter()
            .map(|s| s.used)
            .fold(t.device_peak_at_start, u64::max);
        self.scalings.push(ScalingRecord {
            event: t.event.clone(),
            strategy: self.name.clone(),
            cmd_time: t.cmd_time,
            ready_time: ready,
            latency: ready - t.cmd_time,
            downtime: self.downtime.total_between(t.cmd_time, ready),
            peak_mem: ledger.window_peak(),
            peak_device,
            exec_duration: t.exec_duration,
            commit_time: Some(self.now),
            from_devices: t.from.num_devices(),
            to_devices: t.to.num_devices(),
            shared_devices: t
                .from
                .device_set
                .iter()
                .filter(|d| t.to.contains(**d))
                .copied()
                .collect(),
            phases,
        });
        if self.uses_standby_pool() {
            for cfg in self.neighbours(&t.to) {
                if !self.imm.is_cached(&cfg) && !self.imm.is_pending(&cfg) {
                    let (id, ready) = self.imm.preinit(&cfg, self.now);
                    self.queue.push(ready, EventKind::PreinitDone(id));
                }
            }
        }
        if let Some(next) = self.deferred.pop_front() {
            self.command(next)?;
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunLog, SimError> {
        if self.outstanding != 0 {
            return Err(SimError::Invariant(format!(
                "{} of {} requests never completed",
                self.outstanding,
                self.reqs.len()
            )));
        }
        if let Some(t) = self.transition.take() {
            return Err(SimError::Invariant(format!(
                "transition {} never completed",
                t.event
            )));
        }
        self.hmm.check_conservation().map_err(SimError::Invariant)?;
        if let Some(layout) = self.hmm.current() {
            self.hmm.check_layout(layout).map_err(SimError::Invariant)?;
        }
        let end_time = self
            .reqs
            .iter()
            .filter_map(|r| r.completion)
            .fold(self.now, f64::max);
        let fabric = self.hmm.fabric();
        Ok(RunLog {
            scenario: self.sc.name.clone(),
            strategy: self.name,
            requests: self.reqs,
            scalings: self.scalings,
            admissions: self.admissions,
            tokens: self.tokens,
            ledger: fabric.ledger().trace().to_vec(),
            transfers: fabric.transfers().to_vec(),
            lifecycle: self.imm.lifecycle().to_vec(),
            downtime: self.downtime.intervals().to_vec(),
            duplicate_disk_loads: fabric.duplicate_disk_loads(),
            events_processed: self.events,
            end_time,
        })
    }
}
