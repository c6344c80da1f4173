//! Instance lifecycle: standby pool, attachment, warmup, drain.
//!
//! Every state change goes through one checked transition function, so the
//! lifecycle trace only ever contains legal edges. Timed steps return the
//! time at which the caller should drive the next transition.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{AttachRecord, Fabric, FabricError, RegionId};
use crate::topology::ParallelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InstanceState {
    Cold,
    PreInitializing,
    Standby,
    Attaching,
    Warming,
    Active,
    Draining,
    Retired,
}

impl InstanceState {
    pub fn successor(self) -> Option<InstanceState> {
        use InstanceState::*;
        match self {
            Cold => Some(PreInitializing),
            PreInitializing => Some(Standby),
            Standby => Some(Attaching),
            Attaching => Some(Warming),
            Warming => Some(Active),
            Active => Some(Draining),
            Draining => Some(Retired),
            Retired => None,
        }
    }

    pub fn can_become(self, next: InstanceState) -> bool {
        self.successor() == Some(next)
    }

    /// Instances in these states hold no device memory.
    pub fn is_host_only(self) -> bool {
        matches!(
            self,
            InstanceState::Cold | InstanceState::PreInitializing | InstanceState::Standby
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u32);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "i{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImmError {
    #[error("illegal transition of {id} from {from:?} to {to:?}")]
    IllegalTransition {
        id: InstanceId,
        from: InstanceState,
        to: InstanceState,
    },
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("{new} cannot become active while {current} is active")]
    SecondActive {
        new: InstanceId,
        current: InstanceId,
    },
    #[error("instance {id} in state {state:?} does not accept requests")]
    NotAccepting {
        id: InstanceId,
        state: InstanceState,
    },
    #[error("instance {0} has no in-flight requests")]
    NothingInflight(InstanceId),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: InstanceId,
    pub cfg: ParallelConfig,
    pub state: InstanceState,
    pub attach_records: Vec<AttachRecord>,
    pub inflight: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifecycleEvent {
    pub time: f64,
    pub instance: InstanceId,
    pub old_state: InstanceState,
    pub new_state: InstanceState,
}

/// LRU map from configuration to a standby instance.
#[derive(Debug, Clone, PartialEq)]
pub struct StandbyCache {
    capacity: usize,
    /// Least recently used first.
    entries: VecDeque<(ParallelConfig, InstanceId)>,
}

impl StandbyCache {
    pub fn new(capacity: usize) -> Self {
        StandbyCache {
            capacity,
            entries: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, cfg: &ParallelConfig) -> bool {
        self.entries.iter().any(|(c, _)| c == cfg)
    }

    /// Configurations from least to most recently used.
    pub fn keys(&self) -> Vec<ParallelConfig> {
        self.entries.iter().map(|(c, _)| c.clone()).collect()
    }

    /// Inserts as most recently used and returns whatever got evicted,
    /// including a previous instance for the same configuration.
    pub fn insert(&mut self, cfg: ParallelConfig, id: InstanceId) -> Vec<InstanceId> {
        let mut evicted = Vec::new();
        if let Some(pos) = self.entries.iter().position(|(c, _)| *c == cfg) {
            evicted.push(self.entries.remove(pos).expect("present").1);
        }
        if self.capacity == 0 {
            evicted.push(id);
            return evicted;
        }
        while self.entries.len() >= self.capacity {
            evicted.push(self.entries.pop_front().expect("non-empty").1);
        }
        self.entries.push_back((cfg, id));
        evicted
    }

    /// Marks `cfg` as most recently used.
    pub fn touch(&mut self, cfg: &ParallelConfig) -> bool {
        match self.entries.iter().position(|(c, _)| c == cfg) {
            Some(pos) => {
                let e = self.entries.remove(pos).expect("present");
                self.entries.push_back(e);
                true
            }
            None => false,
        }
    }

    /// Removes and returns the standby instance for `cfg`.
    pub fn take(&mut self, cfg: &ParallelConfig) -> Option<InstanceId> {
        let pos = self.entries.iter().position(|(c, _)| c == cfg)?;
        self.entries.remove(pos).map(|(_, id)| id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImmCosts {
    #[serde(default = "default_preinit")]
    pub preinit_cost: f64,
    #[serde(default = "default_warmup")]
    pub warmup_cost: f64,
    #[serde(default = "default_standby_capacity")]
    pub standby_capacity: usize,
}

fn default_preinit() -> f64 {
    50.0
}
fn default_warmup() -> f64 {
    4.2
}
fn default_standby_capacity() -> usize {
    4
}

impl Default for ImmCosts {
    fn default() -> Self {
        ImmCosts {
            preinit_cost: default_preinit(),
            warmup_cost: default_warmup(),
            standby_capacity: default_standby_capacity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fetch {
    /// Standby instance ready now.
    Hit(InstanceId),
    /// Pre-initialization already running; ready at the given time.
    Pending(InstanceId, f64),
    Miss,
}

#[derive(Debug, Clone)]
pub struct Imm {
    costs: ImmCosts,
    instances: BTreeMap<InstanceId, Instance>,
    cache: StandbyCache,
    /// Pre-initializations in progress that will enter the cache.
    pending: BTreeMap<ParallelConfig, (InstanceId, f64)>,
    lifecycle: Vec<LifecycleEvent>,
    next_id: u32,
}

impl Imm {
    pub fn new(costs: ImmCosts) -> Self {
        Imm {
            cache: StandbyCache::new(costs.standby_capacity),
            costs,
            instances: BTreeMap::new(),
            pending: BTreeMap::new(),
            lifecycle: Vec::new(),
            next_id: 0,
        }
    }

    pub fn costs(&self) -> ImmCosts {
        self.costs
    }

    pub fn cache(&self) -> &StandbyCache {
        &self.cache
    }

    pub fn lifecycle(&self) -> &[LifecycleEvent] {
        &self.lifecycle
    }

    pub fn instance(&self, id: InstanceId) -> Option<&Instance> {
        self.instances.get(&id)
    }

    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn state(&self, id: InstanceId) -> Option<InstanceState> {
        self.instances.get(&id).map(|i| i.state)
    }

    pub fn active(&self) -> Option<InstanceId> {
        self.instances
            .values()
            .find(|i| i.state == InstanceState::Active)
            .map(|i| i.id)
    }

    pub fn active_count(&self) -> usize {
        self.instances
            .values()
            .filter(|i| i.state == InstanceState::Active)
            .count()
    }

    fn transition(&mut self, id: InstanceId, to: InstanceState, at: f64) -> Result<(), ImmError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ImmError::UnknownInstance(id))?;
        if !inst.state.can_become(to) {
            return Err(ImmError::IllegalTransition {
                id,
                from: inst.state,
                to,
            });
        }
        self.lifecycle.push(LifecycleEvent {
            time: at,
            instance: id,
            old_state: inst.state,
            new_state: to,
        });
        inst.state = to;
        Ok(())
    }

    fn create(&mut self, cfg: &ParallelConfig) -> InstanceId {
        let id = InstanceId(self.next_id);
        self.next_id += 1;
        self.instances.insert(
            id,
            Instance {
                id,
                cfg: cfg.clone(),
                state: InstanceState::Cold,
                attach_records: Vec::new(),
                inflight: 0,
            },
        );
        id
    }

    /// Starts pre-initializing a standby instance for `cfg` and returns it
    /// with the time it becomes ready. Idempotent while one is running.
    pub fn preinit(&mut self, cfg: &ParallelConfig, at: f64) -> (InstanceId, f64) {
        if let Some(p) = self.pending.get(cfg) {
            return *p;
        }
        let id = self.create(cfg);
        self.transition(id, InstanceState::PreInitializing, at)
            .expect("fresh instance is cold");
        let ready = at + self.costs.preinit_cost;
        self.pending.insert(cfg.clone(), (id, ready));
        (id, ready)
    }

    /// Pre-initializes an instance that is used directly instead of cached.
    pub fn preinit_uncached(&mut self, cfg: &ParallelConfig, at: f64) -> (InstanceId, f64) {
        let id = self.create(cfg);
        self.transition(id, InstanceState::PreInitializing, at)
            .expect("fresh instance is cold");
        (id, at + self.costs.preinit_cost)
    }

    /// Completes a pre-initialization. Cached instances enter the standby
    /// pool, which may evict older entries.
    pub fn finish_preinit(&mut self, id: InstanceId, at: f64) -> Result<Vec<InstanceId>, ImmError> {
        self.transition(id, InstanceState::Standby, at)?;
        let cfg = self.instances[&id].cfg.clone();
        if self.pending.get(&cfg).map(|p| p.0) == Some(id) {
            self.pending.remove(&cfg);
            let evicted = self.cache.insert(cfg, id);
            for e in &evicted {
                self.instances.remove(e);
            }
            return Ok(evicted);
        }
        Ok(Vec::new())
    }

    pub fn is_cached(&self, cfg: &ParallelConfig) -> bool {
        self.cache.contains(cfg)
    }

    pub fn is_pending(&self, cfg: &ParallelConfig) -> bool {
        self.pending.contains_key(cfg)
    }

    /// Looks up a standby instance for `cfg`. A hit removes it from the pool.
    pub fn fetch(&mut self, cfg: &ParallelConfig) -> Fetch {
        if let Some(id) = self.cache.take(cfg) {
            return Fetch::Hit(id);
        }
        if let Some((id, ready)) = self.pending.remove(cfg) {
            return Fetch::Pending(id, ready);
        }
        Fetch::Miss
    }

    /// Zero-copy attaches every region in order. Returns the time the
    /// instance starts warming.
    pub fn begin_attach(
        &mut self,
        id: InstanceId,
        regions: &[RegionId],
        fabric: &mut Fabric,
        at: f64,
    ) -> Result<f64, ImmError> {
        self.transition(id, InstanceState::Attaching, at)?;
        let mut t = at;
        let mut records = Vec::with_capacity(regions.len());
        for r in regions {
            let rec = fabric.zero_copy_attach(*r, id.0, t)?;
            t += rec.duration;
            records.push(rec);
        }
        self.instances
            .get_mut(&id)
            .expect("transitioned")
            .attach_records
            .extend(records);
        Ok(t)
    }

    /// Starts warmup. Returns the time the instance can serve.
    pub fn begin_warmup(&mut self, id: InstanceId, at: f64) -> Result<f64, ImmError> {
        self.transition(id, InstanceState::Warming, at)?;
        Ok(at + self.costs.warmup_cost)
    }

    /// Makes `new` the serving instance. If another instance is active it is
    /// moved to draining in the same step. Returns the instance that started
    /// draining, if any.
    pub fn switch_active(
        &mut self,
        new: InstanceId,
        at: f64,
    ) -> Result<Option<InstanceId>, ImmError> {
        let state = self.state(new).ok_or(ImmError::UnknownInstance(new))?;
        if state != InstanceState::Warming {
            return Err(ImmError::IllegalTransition {
                id: new,
                from: state,
                to: InstanceState::Active,
            });
        }
        let old = self.active();
        if let Some(o) = old {
            self.transition(o, InstanceState::Draining, at)?;
        }
        self.transition(new, InstanceState::Active, at)?;
        Ok(old)
    }

    /// Stops intake on the active instance without a successor.
    pub fn drain(&mut self, id: InstanceId, at: f64) -> Result<(), ImmError> {
        if self.state(id) == Some(InstanceState::Draining) {
            return Ok(());
        }
        self.transition(id, InstanceState::Draining, at)
    }

    /// Retires a draining instance once it has nothing in flight, releasing
    /// its attachments. Returns whether it retired.
    pub fn try_retire(
        &mut self,
        id: InstanceId,
        fabric: &mut Fabric,
        at: f64,
    ) -> Result<bool, ImmError> {
        let inst = self
            .instances
            .get(&id)
            .ok_or(ImmError::UnknownInstance(id))?;
        if inst.state != InstanceState::Draining || inst.inflight > 0 {
            return Ok(false);
        }
        self.transition(id, InstanceState::Retired, at)?;
        let inst = self.instances.get_mut(&id).expect("present");
        for rec in inst.attach_records.drain(..) {
            // The region may already be gone if a restart freed it.
            let _ = fabric.detach(rec.region, id.0);
        }
        Ok(true)
    }

    /// Drops all in-flight work, as a restart does.
    pub fn abort_inflight(&mut self, id: InstanceId) -> Result<u32, ImmError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ImmError::UnknownInstance(id))?;
        Ok(std::mem::take(&mut inst.inflight))
    }

    /// Accepts a request; only the active instance does.
    pub fn admit(&mut self, id: InstanceId) -> Result<(), ImmError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ImmError::UnknownInstance(id))?;
        if inst.state != InstanceState::Active {
            return Err(ImmError::NotAccepting {
                id,
                state: inst.state,
            });
        }
        inst.inflight += 1;
        Ok(())
    }

    pub fn complete(&mut self, id: InstanceId) -> Result<(), ImmError> {
        let inst = self
            .instances
            .get_mut(&id)
            .ok_or(ImmError::UnknownInstance(id))?;
        if inst.inflight == 0 {
            return Err(ImmError::NothingInflight(id));
        }
        inst.inflight -= 1;
        Ok(())
    }

    pub fn lifecycle_jsonl(&self) -> String {
        let mut events = self.lifecycle.clone();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let mut out = String::new();
        for e in events {
            out.push_str(&serde_json::to_string(&e).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::RegionKind;
    use crate::topology::{ClusterSpec, DeviceId, GB};
    use proptest::prelude::*;

    fn cfg(dp: u32) -> ParallelConfig {
        ParallelConfig::new(dp, 2, (0..dp * 2).map(DeviceId).collect())
    }

    fn ready_standby(imm: &mut Imm, c: &ParallelConfig) -> InstanceId {
        let (id, t) = imm.preinit(c, 0.0);
        imm.finish_preinit(id, t).unwrap();
        id
    }

    #[test]
    fn preinit_then_fetch_hits() {
        let mut imm = Imm::new(ImmCosts::default());
        let c = cfg(3);
        let (id, ready) = imm.preinit(&c, 0.0);
        assert_eq!(ready, 50.0);
        assert_eq!(imm.preinit(&c, 1.0), (id, ready));
        imm.finish_preinit(id, ready).unwrap();
        assert_eq!(imm.fetch(&c), Fetch::Hit(id));
        assert_eq!(imm.fetch(&c), Fetch::Miss);
    }

    #[test]
    fn fetch_while_pending() {
        let mut imm = Imm::new(ImmCosts::default());
        let (id, ready) = imm.preinit(&cfg(2), 10.0);
        assert_eq!(imm.fetch(&cfg(2)), Fetch::Pending(id, ready));
        // A fetched pending instance no longer enters the pool.
        imm.finish_preinit(id, ready).unwrap();
        assert!(imm.cache().is_empty());
        assert_eq!(imm.state(id), Some(InstanceState::Standby));
    }

    #[test]
    fn capacity_one_evicts_first() {
        let mut imm = Imm::new(ImmCosts {
            standby_capacity: 1,
            ..ImmCosts::default()
        });
        let a = ready_standby(&mut imm, &cfg(2));
        let b = ready_standby(&mut imm, &cfg(3));
        assert!(imm.instance(a).is_none());
        assert_eq!(imm.fetch(&cfg(2)), Fetch::Miss);
        assert_eq!(imm.fetch(&cfg(3)), Fetch::Hit(b));
    }

    #[test]
    fn attach_time_is_regions_times_cost_plus_warmup() {
        let mut fabric = Fabric::new(ClusterSpec::with_devices(2));
        let regions: Vec<RegionId> = (0..6)
            .map(|i| {
                fabric
                    .disk_copy(
                        DeviceId(i % 2),
                        GB,
                        &format!("t{i}"),
                        RegionKind::Attention,
                        0.0,
                    )
                    .unwrap()
                    .0
            })
            .collect();
        let used = fabric.ledger().total_used();
        let mut imm = Imm::new(ImmCosts::default());
        let id = ready_standby(&mut imm, &cfg(1));
        imm.fetch(&cfg(1));
        let warm_at = imm.begin_attach(id, &regions, &mut fabric, 100.0).unwrap();
        let ready = imm.begin_warmup(id, warm_at).unwrap();
        assert!((ready - (100.0 + 6.0 * 0.01 + 4.2)).abs() < 1e-12);
        assert_eq!(fabric.ledger().total_used(), used);
        imm.switch_active(id, ready).unwrap();
        assert_eq!(imm.active(), Some(id));
    }

    #[test]
    fn attach_from_cold_is_rejected() {
        let mut fabric = Fabric::new(ClusterSpec::with_devices(1));
        let mut imm = Imm::new(ImmCosts::default());
        let (id, _) = imm.preinit_uncached(&cfg(1), 0.0);
        assert!(matches!(
            imm.begin_attach(id, &[], &mut fabric, 0.0),
            Err(ImmError::IllegalTransition { .. })
        ));
    }

    fn activate(imm: &mut Imm, fabric: &mut Fabric, c: &ParallelConfig, at: f64) -> InstanceId {
        let (id, t) = imm.preinit_uncached(c, at);
        imm.finish_preinit(id, t).unwrap();
        let t = imm.begin_attach(id, &[], fabric, t).unwrap();
        let t = imm.begin_warmup(id, t).unwrap();
        imm.switch_active(id, t).unwrap();
        id
    }

    #[test]
    fn drain_waits_for_inflight() {
        let mut fabric = Fabric::new(ClusterSpec::with_devices(1));
        let mut imm = Imm::new(ImmCosts::default());
        let a = activate(&mut imm, &mut fabric, &cfg(1), 0.0);
        for _ in 0..3 {
            imm.admit(a).unwrap();
        }
        let b = activate(&mut imm, &mut fabric, &cfg(2), 0.0);
        assert_eq!(imm.state(a), Some(InstanceState::Draining));
        assert!(matches!(imm.admit(a), Err(ImmError::NotAccepting { .. })));
        for _ in 0..3 {
            assert!(!imm.try_retire(a, &mut fabric, 1.0).unwrap());
            imm.complete(a).unwrap();
        }
        assert!(imm.try_retire(a, &mut fabric, 2.0).unwrap());
        assert_eq!(imm.active(), Some(b));
        imm.drain(b, 3.0).unwrap();
        assert!(imm.try_retire(b, &mut fabric, 3.0).unwrap());
    }

    #[test]
    fn standby_holds_no_device_memory() {
        let fabric = Fabric::new(ClusterSpec::with_devices(4));
        let mut imm = Imm::new(ImmCosts::default());
        for dp in 1..=4 {
            ready_standby(&mut imm, &cfg(dp));
        }
        assert_eq!(fabric.ledger().total_used(), 0);
        assert!(imm.instances().all(|i| i.state.is_host_only()));
    }

    /// Reference LRU: a plain vector, most recent last.
    fn reference(ops: &[(bool, u8)], cap: usize) -> Vec<u8> {
        let mut v: Vec<u8> = Vec::new();
        for (insert, k) in ops {
            if *insert {
                v.retain(|x| x != k);
                v.push(*k);
                if v.len() > cap {
                    v.remove(0);
                }
            } else if let Some(p) = v.iter().position(|x| x == k) {
                let x = v.remove(p);
                v.push(x);
            }
        }
        v
    }

    proptest! {
        #[test]
        fn lru_matches_reference(ops in prop::collection::vec((any::<bool>(), 0u8..6), 0..200), cap in 1usize..5) {
            let mut cache = StandbyCache::new(cap);
            for (i, (insert, k)) in ops.iter().enumerate() {
                let c = cfg(*k as u32 + 1);
                if *insert {
                    cache.insert(c, InstanceId(i as u32));
                } else {
                    cache.touch(&c);
                }
            }
            let got: Vec<u8> = cache.keys().iter().map(|c| (c.dp - 1) as u8).collect();
            prop_assert_eq!(got, reference(&ops, cap));
        }
    }
}
