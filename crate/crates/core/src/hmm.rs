//! HBM manager: owns weight and KV regions plus the expert page store,
//! computes move-minimal scaling plans and executes them over the fabric.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{Fabric, FabricError, RegionId, RegionKind};
use crate::topology::{
    balanced_quota, validate_config, ClusterSpec, ConfigError, DeviceId, ExpertPlacement,
    ModelSpec, ParallelConfig,
};
use crate::vmem::{PageContent, PageId, PageStore, RangeId, VmemError};

const KV_FAMILY: &str = "serving";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HmmError {
    #[error("tensor parallel degree cannot change during scaling ({from} -> {to})")]
    TpChangeRejected { from: u32, to: u32 },
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("device {device} changes tp rank from {from} to {to}")]
    TpRankMismatch {
        device: DeviceId,
        from: u32,
        to: u32,
    },
    #[error("no device in the current layout holds tp rank {0}")]
    NoAttentionSource(u32),
    #[error("no current layout")]
    NoLayout,
    #[error("a prepared layout already exists")]
    AlreadyPrepared,
    #[error("commit without a prepared layout")]
    NothingPrepared,
    #[error("plan does not start from the current configuration")]
    StalePlan,
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Vmem(#[from] VmemError),
}

impl HmmError {
    pub fn is_out_of_memory(&self) -> bool {
        matches!(
            self,
            HmmError::Fabric(FabricError::OutOfMemory { .. })
                | HmmError::Vmem(VmemError::Fabric(FabricError::OutOfMemory { .. }))
        )
    }
}

/// Regions and expert range held on one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceLayout {
    pub device: DeviceId,
    pub attention: RegionId,
    pub expert_range: RangeId,
    /// Uncharged handle over the expert range; instances attach to this.
    pub expert_handle: RegionId,
    pub kv: RegionId,
    /// Experts in slot order, `pages_per_expert` slots each.
    pub experts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightLayout {
    pub cfg: ParallelConfig,
    pub placement: ExpertPlacement,
    pub devices: BTreeMap<DeviceId, DeviceLayout>,
}

impl WeightLayout {
    /// Regions an instance serving this layout attaches to, in device order.
    pub fn attach_regions(&self) -> Vec<RegionId> {
        self.cfg
            .device_set
            .iter()
            .flat_map(|d| {
                let l = &self.devices[d];
                [l.attention, l.expert_handle, l.kv]
            })
            .collect()
    }

    fn region_set(&self) -> BTreeSet<RegionId> {
        self.attach_regions().into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertMove {
    pub expert: u32,
    pub src: DeviceId,
    pub dst: DeviceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCost {
    pub p2p_bytes: u64,
    pub disk_bytes: u64,
    pub map_ops: u64,
    pub est_duration: f64,
    pub est_peak_delta: BTreeMap<DeviceId, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPlan {
    pub from_cfg: ParallelConfig,
    pub to_cfg: ParallelConfig,
    pub attention_reuse: BTreeSet<DeviceId>,
    pub attention_p2p: Vec<(DeviceId, DeviceId)>,
    pub kv_reuse: BTreeSet<DeviceId>,
    pub kv_init: BTreeSet<DeviceId>,
    pub expert_moves: Vec<ExpertMove>,
    pub expert_keeps: BTreeMap<DeviceId, Vec<u32>>,
    /// (device, expert) pairs whose pages are unmapped now and freed at commit.
    pub retire_pages: Vec<(DeviceId, u32)>,
    pub retiring_devices: BTreeSet<DeviceId>,
    pub cost: PlanCost,
}

impl ScalingPlan {
    pub fn shared_devices(&self) -> BTreeSet<DeviceId> {
        self.from_cfg
            .device_set
            .iter()
            .filter(|d| self.to_cfg.contains(**d))
            .copied()
            .collect()
    }

    pub fn new_devices(&self) -> Vec<DeviceId> {
        self.to_cfg
            .device_set
            .iter()
            .filter(|d| !self.from_cfg.contains(**d))
            .copied()
            .collect()
    }

    /// Placement after the plan is applied.
    pub fn target_placement(&self, experts: u32) -> ExpertPlacement {
        let mut assignment = vec![DeviceId(u32::MAX); experts as usize];
        for (d, keep) in &self.expert_keeps {
            for e in keep {
                assignment[*e as usize] = *d;
            }
        }
        for m in &self.expert_moves {
            assignment[m.expert as usize] = m.dst;
        }
        ExpertPlacement { assignment }
    }
}

/// Execution switches used by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOptions {
    /// Move weights device to device; when off, everything comes from disk.
    pub p2p: bool,
    /// Share attention regions across instances; when off, shared devices
    /// get a private same-device copy.
    pub ipc_alloc: bool,
}

impl Default for ExecOptions {
    fn default() -> Self {
        ExecOptions {
            p2p: true,
            ipc_alloc: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub start: f64,
    pub group_init_end: f64,
    pub transfer_end: f64,
    pub map_end: f64,
    pub end: f64,
    pub map_ops: u64,
    pub p2p_bytes: u64,
    pub disk_bytes: u64,
    pub local_copy_bytes: u64,
}

impl ExecutionRecord {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub start: f64,
    pub end: f64,
    pub disk_bytes: u64,
    pub p2p_bytes: u64,
}

/// Pure plan computation.
///
/// Every shared device keeps its lowest `min(held, quota)` expert ids; the
/// rest of the experts (shed ones and those on retiring devices) are handed
/// out in id order to target devices with a deficit, in device order.
pub fn compute_plan(
    layout: &WeightLayout,
    to_cfg: &ParallelConfig,
    model: &ModelSpec,
    cluster: &ClusterSpec,
) -> Result<ScalingPlan, HmmError> {
    let from = &layout.cfg;
    if from.tp != to_cfg.tp {
        return Err(HmmError::TpChangeRejected {
            from: from.tp,
            to: to_cfg.tp,
        });
    }
    validate_config(to_cfg, cluster, model)?;
    for d in &to_cfg.device_set {
        if let (Some(a), Some(b)) = (from.tp_rank(*d), to_cfg.tp_rank(*d)) {
            if a != b {
                return Err(HmmError::TpRankMismatch {
                    device: *d,
                    from: a,
                    to: b,
                });
            }
        }
    }

    let shared: BTreeSet<DeviceId> = from
        .device_set
        .iter()
        .filter(|d| to_cfg.contains(**d))
        .copied()
        .collect();
    let new_devices: Vec<DeviceId> = to_cfg
        .device_set
        .iter()
        .filter(|d| !from.contains(**d))
        .copied()
        .collect();
    let retiring: BTreeSet<DeviceId> = from
        .device_set
        .iter()
        .filter(|d| !to_cfg.contains(**d))
        .copied()
        .collect();

    let mut attention_p2p = Vec::new();
    let mut cursor: BTreeMap<u32, usize> = BTreeMap::new();
    for d in &new_devices {
        let rank = to_cfg.tp_rank(*d).expect("member");
        let sources: Vec<DeviceId> = from
            .device_set
            .iter()
            .filter(|s| from.tp_rank(**s) == Some(rank))
            .copied()
            .collect();
        if sources.is_empty() {
            return Err(HmmError::NoAttentionSource(rank));
        }
        let c = cursor.entry(rank).or_insert(0);
        attention_p2p.push((sources[*c % sources.len()], *d));
        *c += 1;
    }

    let experts = model.num_experts_total;
    let quota = balanced_quota(experts, to_cfg.ep);
    let mut expert_keeps = BTreeMap::new();
    let mut pool: Vec<u32> = Vec::new();
    let mut retire_pages = Vec::new();
    for d in &from.device_set {
        let held = layout.placement.experts_on(*d);
        match to_cfg.position(*d) {
            Some(p) => {
                let q = quota[p] as usize;
                let keep = held.len().min(q);
                for e in &held[keep..] {
                    retire_pages.push((*d, *e));
                }
                pool.extend_from_slice(&held[keep..]);
                expert_keeps.insert(*d, held[..keep].to_vec());
            }
            None => {
                for e in &held {
                    retire_pages.push((*d, *e));
                }
                pool.extend(held);
            }
        }
    }
    pool.sort_unstable();
    let mut pool = pool.into_iter();
    let mut expert_moves = Vec::new();
    for (p, d) in to_cfg.device_set.iter().enumerate() {
        let kept = expert_keeps.entry(*d).or_insert_with(Vec::new).len() as u32;
        for _ in kept..quota[p] {
            let e = pool.next().expect("quota sums to expert count");
            expert_moves.push(ExpertMove {
                expert: e,
                src: layout.placement.device_of(e),
                dst: *d,
            });
        }
    }

    let mut plan = ScalingPlan {
        from_cfg: from.clone(),
        to_cfg: to_cfg.clone(),
        attention_reuse: shared.clone(),
        attention_p2p,
        kv_reuse: shared,
        kv_init: new_devices.iter().copied().collect(),
        expert_moves,
        expert_keeps,
        retire_pages,
        retiring_devices: retiring,
        cost: PlanCost {
            p2p_bytes: 0,
            disk_bytes: 0,
            map_ops: 0,
            est_duration: 0.0,
            est_peak_delta: BTreeMap::new(),
        },
    };
    plan.cost = estimate_cost(&plan, layout, model, cluster, ExecOptions::default(), false);
    Ok(plan)
}

/// Slot relocations needed on a shared device when the kept experts are
/// compacted to the front of its range.
fn relocations(old_order: &[u32], keep: &[u32]) -> u64 {
    let kept: BTreeSet<u32> = keep.iter().copied().collect();
    old_order
        .iter()
        .filter(|e| kept.contains(e))
        .enumerate()
        .filter(|(new_idx, e)| old_order.iter().position(|x| x == *e) != Some(*new_idx))
        .count() as u64
}

/// Timing and byte estimate of a plan under the fabric's timing model.
pub fn estimate_cost(
    plan: &ScalingPlan,
    layout: &WeightLayout,
    model: &ModelSpec,
    cluster: &ClusterSpec,
    opts: ExecOptions,
    group_init: bool,
) -> PlanCost {
    let ppe = model.pages_per_expert as u64;
    let mut per_dst: BTreeMap<DeviceId, f64> = BTreeMap::new();
    let mut peak: BTreeMap<DeviceId, u64> = BTreeMap::new();
    let (mut p2p_bytes, mut disk_bytes) = (0u64, 0u64);
    let mut transfer = |dst: DeviceId, bytes: u64, per_dst: &mut BTreeMap<DeviceId, f64>| {
        let t = if opts.p2p {
            p2p_bytes += bytes;
            cluster.p2p_latency + bytes as f64 / cluster.p2p_bandwidth
        } else {
            disk_bytes += bytes;
            bytes as f64 / cluster.disk_bandwidth
        };
        *per_dst.entry(dst).or_insert(0.0) += t;
    };
    if !opts.ipc_alloc {
        for d in &plan.attention_reuse {
            *per_dst.entry(*d).or_insert(0.0) +=
                model.attention_shard_bytes as f64 / cluster.local_copy_bandwidth;
            *peak.entry(*d).or_insert(0) += model.attention_shard_bytes;
        }
    }
    for (_, dst) in &plan.attention_p2p {
        transfer(*dst, model.attention_shard_bytes, &mut per_dst);
        *peak.entry(*dst).or_insert(0) += model.attention_shard_bytes;
    }
    for m in &plan.expert_moves {
        transfer(m.dst, model.bytes_per_expert, &mut per_dst);
        *peak.entry(m.dst).or_insert(0) += model.bytes_per_expert;
    }
    let mut map_ops = plan.expert_moves.len() as u64 * ppe;
    for (d, keep) in &plan.expert_keeps {
        if let Some(l) = layout.devices.get(d) {
            map_ops += relocations(&l.experts, keep) * ppe;
        }
    }
    let kv_bytes = model.kv_bytes_per_device();
    let kv_time = kv_bytes as f64 / crate::topology::GB as f64 * cluster.kv_init_seconds_per_gb;
    for d in &plan.kv_init {
        *peak.entry(*d).or_insert(0) += kv_bytes;
    }
    let transfer_time = per_dst.values().copied().fold(0.0, f64::max);
    let kv_phase = if plan.kv_init.is_empty() {
        0.0
    } else {
        kv_time
    };
    let gi = if group_init {
        cluster.group_init_cost
    } else {
        0.0
    };
    PlanCost {
        p2p_bytes,
        disk_bytes,
        map_ops,
        est_duration: gi + transfer_time + map_ops as f64 * cluster.page_map_cost + kv_phase,
        est_peak_delta: peak,
    }
}

#[derive(Debug, Clone)]
struct Prepared {
    layout: WeightLayout,
    retiring: BTreeSet<DeviceId>,
}

/// The HBM manager for one model on one cluster.
#[derive(Debug, Clone)]
pub struct Hmm {
    model: ModelSpec,
    fabric: Fabric,
    store: PageStore,
    current: Option<WeightLayout>,
    prepared: Option<Prepared>,
    owned: BTreeSet<RegionId>,
    pending_group_init: bool,
}

impl Hmm {
    pub fn new(model: ModelSpec, cluster: ClusterSpec) -> Self {
        let store = PageStore::new(model.page_size());
        Hmm {
            model,
            fabric: Fabric::new(cluster),
            store,
            current: None,
            prepared: None,
            owned: BTreeSet::new(),
            pending_group_init: false,
        }
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    pub fn store(&self) -> &PageStore {
        &self.store
    }

    pub fn current(&self) -> Option<&WeightLayout> {
        self.current.as_ref()
    }

    pub fn prepared(&self) -> Option<&WeightLayout> {
        self.prepared.as_ref().map(|p| &p.layout)
    }

    /// Loads the initial configuration. Each attention shard and each expert
    /// is read from disk exactly once; attention replicas are filled by p2p.
    pub fn initialize(&mut self, cfg: &ParallelConfig, at: f64) -> Result<InitRecord, HmmError> {
        self.initialize_with(cfg, at, true)
    }

    /// Like [`Hmm::initialize`]; with `p2p` off every device reads its own
    /// attention shard from disk.
    pub fn initialize_with(
        &mut self,
        cfg: &ParallelConfig,
        at: f64,
        p2p: bool,
    ) -> Result<InitRecord, HmmError> {
        if self.current.is_some() {
            return Err(HmmError::AlreadyPrepared);
        }
        validate_config(cfg, self.fabric.cluster(), &self.model)?;
        let ppe = self.model.pages_per_expert as usize;
        let placement = ExpertPlacement::contiguous(self.model.num_experts_total, cfg);
        let mut devices = BTreeMap::new();
        let mut end = at;
        let (mut disk_bytes, mut p2p_bytes) = (0, 0);
        let mut rank_source: BTreeMap<u32, (DeviceId, f64)> = BTreeMap::new();
        for d in &cfg.device_set {
            let rank = cfg.tp_rank(*d).expect("member");
            let tag = format!("attn/tp{rank}");
            let bytes = self.model.attention_shard_bytes;
            let source = if p2p { rank_source.get(&rank) } else { None };
            let (attention, ev) = match source {
                None => {
                    let (r, ev) =
                        self.fabric
                            .disk_copy(*d, bytes, &tag, RegionKind::Attention, at)?;
                    rank_source.insert(rank, (*d, ev.end()));
                    disk_bytes += bytes;
                    (r, ev)
                }
                Some((src, ready)) => {
                    p2p_bytes += bytes;
                    self.fabric
                        .p2p_copy(*src, *d, bytes, &tag, RegionKind::Attention, *ready)?
                }
            };
            end = end.max(ev.end());
            self.owned.insert(attention);

            let experts = placement.experts_on(*d);
            let range = self.store.reserve_range(*d, experts.len() * ppe);
            for (i, e) in experts.iter().enumerate() {
                let start = at.max(self.fabric.busy_until(*d));
                self.store.set_time(start);
                let pages = self.store.alloc_pages(self.fabric.ledger_mut(), *d, ppe)?;
                let ev = self.fabric.disk_fill(
                    *d,
                    self.model.bytes_per_expert,
                    &format!("expert/{e}"),
                    at,
                )?;
                disk_bytes += self.model.bytes_per_expert;
                end = end.max(ev.end());
                for (k, p) in pages.into_iter().enumerate() {
                    self.store.set_content(p, PageContent::Expert(*e))?;
                    self.store.map_slot(range, i * ppe + k, p)?;
                }
            }
            let handle = self.fabric.register_handle(
                *d,
                (experts.len() * ppe) as u64 * self.model.page_size(),
                RegionKind::ExpertPages,
                &format!("experts/{d}"),
            );
            self.owned.insert(handle);
            let (kv, ev) =
                self.fabric
                    .kv_init(*d, self.model.kv_bytes_per_device(), KV_FAMILY, at)?;
            end = end.max(ev.end());
            self.owned.insert(kv);
            devices.insert(
                *d,
                DeviceLayout {
                    device: *d,
                    attention,
                    expert_range: range,
                    expert_handle: handle,
                    kv,
                    experts,
                },
            );
        }
        self.current = Some(WeightLayout {
            cfg: cfg.clone(),
            placement,
            devices,
        });
        Ok(InitRecord {
            start: at,
            end,
            disk_bytes,
            p2p_bytes,
        })
    }

    pub fn compute_plan(&self, to_cfg: &ParallelConfig) -> Result<ScalingPlan, HmmError> {
        let layout = self.current.as_ref().ok_or(HmmError::NoLayout)?;
        let mut plan = compute_plan(layout, to_cfg, &self.model, self.fabric.cluster())?;
        if self.pending_group_init {
            plan.cost = estimate_cost(
                &plan,
                layout,
                &self.model,
                self.fabric.cluster(),
                ExecOptions::default(),
                true,
            );
        }
        Ok(plan)
    }

    /// Registers fresh devices. The next plan execution pays a one-time
    /// communication group rebuild.
    pub fn add_nodes(&mut self, devices: &[DeviceId]) -> Result<(), HmmError> {
        let fresh: BTreeSet<_> = devices.iter().collect();
        if fresh.len() != devices.len() {
            return Err(FabricError::DuplicateDevice(devices[0]).into());
        }
        for d in devices {
            if self.fabric.cluster().contains(*d) {
                return Err(FabricError::DuplicateDevice(*d).into());
            }
        }
        for d in devices {
            self.fabric.add_device(*d)?;
        }
        self.pending_group_init = true;
        Ok(())
    }

    /// Runs a plan: group rebuild if pending, then attention and expert
    /// transfers, then page remapping, then KV init on new devices. The
    /// result is a prepared layout; the current one stays in service.
    pub fn execute_plan(
        &mut self,
        plan: &ScalingPlan,
        at: f64,
        opts: ExecOptions,
    ) -> Result<ExecutionRecord, HmmError> {
        if self.prepared.is_some() {
            return Err(HmmError::AlreadyPrepared);
        }
        let current = self.current.clone().ok_or(HmmError::NoLayout)?;
        if current.cfg != plan.from_cfg {
            return Err(HmmError::StalePlan);
        }
        let cluster = self.fabric.cluster().clone();
        let ppe = self.model.pages_per_expert as usize;
        let mut rec = ExecutionRecord {
            start: at,
            group_init_end: at,
            transfer_end: at,
            map_end: at,
            end: at,
            map_ops: 0,
            p2p_bytes: 0,
            disk_bytes: 0,
            local_copy_bytes: 0,
        };
        if self.pending_group_init {
            rec.group_init_end = at + cluster.group_init_cost;
            self.pending_group_init = false;
        }
        let t0 = rec.group_init_end;
        let mut transfer_end = t0;

        let mut attention: BTreeMap<DeviceId, RegionId> = BTreeMap::new();
        for d in &plan.attention_reuse {
            let region = current.devices[d].attention;
            if opts.ipc_alloc {
                attention.insert(*d, region);
            } else {
                let (copy, ev) = self.fabric.local_copy(region, t0)?;
                self.owned.insert(copy);
                rec.local_copy_bytes += ev.bytes;
                transfer_end = transfer_end.max(ev.end());
                attention.insert(*d, copy);
            }
        }
        for (src, dst) in &plan.attention_p2p {
            let rank = plan.to_cfg.tp_rank(*dst).expect("member");
            let tag = format!("attn/tp{rank}");
            let bytes = self.model.attention_shard_bytes;
            let (region, ev) = if opts.p2p {
                rec.p2p_bytes += bytes;
                self.fabric
                    .p2p_copy(*src, *dst, bytes, &tag, RegionKind::Attention, t0)?
            } else {
                rec.disk_bytes += bytes;
                self.fabric
                    .disk_copy(*dst, bytes, &tag, RegionKind::Attention, t0)?
            };
            self.owned.insert(region);
            transfer_end = transfer_end.max(ev.end());
            attention.insert(*dst, region);
        }

        let mut incoming: BTreeMap<DeviceId, Vec<(u32, Vec<PageId>)>> = BTreeMap::new();
        for m in &plan.expert_moves {
            let start = t0.max(self.fabric.busy_until(m.dst));
            self.store.set_time(start);
            let pages = self
                .store
                .alloc_pages(self.fabric.ledger_mut(), m.dst, ppe)?;
            let tag = format!("expert/{}", m.expert);
            let ev = if opts.p2p {
                rec.p2p_bytes += self.model.bytes_per_expert;
                self.fabric
                    .p2p_fill(m.src, m.dst, self.model.bytes_per_expert, &tag, t0)?
            } else {
                rec.disk_bytes += self.model.bytes_per_expert;
                self.fabric
                    .disk_fill(m.dst, self.model.bytes_per_expert, &tag, t0)?
            };
            transfer_end = transfer_end.max(ev.end());
            for p in &pages {
                self.store.set_content(*p, PageContent::Expert(m.expert))?;
            }
            incoming.entry(m.dst).or_default().push((m.expert, pages));
        }
        rec.transfer_end = transfer_end;
        self.store.set_time(transfer_end);

        // Retire pages first so kept experts can be compacted.
        for (d, e) in &plan.retire_pages {
            let l = &current.devices[d];
            let idx = l.experts.iter().position(|x| x == e).expect("held expert");
            for k in 0..ppe {
                self.store.unmap_deferred(l.expert_range, idx * ppe + k)?;
            }
        }

        let mut map_ops = 0u64;
        let mut devices = BTreeMap::new();
        let mut kv_end = transfer_end;
        let mut new_kv: Vec<DeviceId> = Vec::new();
        for d in &plan.to_cfg.device_set {
            let keep = plan.expert_keeps.get(d).cloned().unwrap_or_default();
            let inc = incoming.remove(d).unwrap_or_default();
            let range = match current.devices.get(d) {
                Some(l) => {
                    // Lift kept experts that are not already in place.
                    let mut lifted: BTreeMap<u32, Vec<PageId>> = BTreeMap::new();
                    for (new_idx, e) in keep.iter().enumerate() {
                        let old_idx = l.experts.iter().position(|x| x == e).expect("kept");
                        if old_idx != new_idx {
                            let mut pages = Vec::with_capacity(ppe);
                            for k in 0..ppe {
                                pages.push(
                                    self.store.unmap_slot(l.expert_range, old_idx * ppe + k)?,
                                );
                            }
                            lifted.insert(*e, pages);
                        }
                    }
                    self.store
                        .resize_range(l.expert_range, (keep.len() + inc.len()) * ppe)?;
                    for (new_idx, e) in keep.iter().enumerate() {
                        if let Some(pages) = lifted.remove(e) {
                            for (k, p) in pages.into_iter().enumerate() {
                                self.store.map_slot(l.expert_range, new_idx * ppe + k, p)?;
                                map_ops += 1;
                            }
                        }
                    }
                    l.expert_range
                }
                None => self.store.reserve_range(*d, inc.len() * ppe),
            };
            for (i, (_, pages)) in inc.iter().enumerate() {
                for (k, p) in pages.iter().enumerate() {
                    self.store.map_slot(range, (keep.len() + i) * ppe + k, *p)?;
                    map_ops += 1;
                }
            }
            let experts: Vec<u32> = keep
                .iter()
                .copied()
                .chain(inc.iter().map(|(e, _)| *e))
                .collect();
            let handle = self.fabric.register_handle(
                *d,
                (experts.len() * ppe) as u64 * self.model.page_size(),
                RegionKind::ExpertPages,
                &format!("experts/{d}"),
            );
            self.owned.insert(handle);
            let kv = match current.devices.get(d) {
                Some(l) => l.kv,
                None => {
                    new_kv.push(*d);
                    // Replaced below once the cache is formatted.
                    handle
                }
            };
            devices.insert(
                *d,
                DeviceLayout {
                    device: *d,
                    attention: attention[d],
                    expert_range: range,
                    expert_handle: handle,
                    kv,
                    experts,
                },
            );
        }
        rec.map_ops = map_ops;
        rec.map_end = transfer_end + map_ops as f64 * cluster.page_map_cost;

        for d in new_kv {
            let (kv, ev) =
                self.fabric
                    .kv_init(d, self.model.kv_bytes_per_device(), KV_FAMILY, rec.map_end)?;
            self.owned.insert(kv);
            kv_end = kv_end.max(ev.end());
            devices.get_mut(&d).expect("inserted").kv = kv;
        }
        rec.end = rec.map_end.max(kv_end);

        let layout = WeightLayout {
            cfg: plan.to_cfg.clone(),
            placement: plan.target_placement(self.model.num_experts_total),
            devices,
        };
        self.prepared = Some(Prepared {
            layout,
            retiring: plan.retiring_devices.clone(),
        });
        Ok(rec)
    }

    /// Makes the prepared layout current, frees retired pages, and frees
    /// every region the new layout does not use. Fails if an old-only region
    /// is still attached.
    pub fn commit_switchover(&mut self, at: f64) -> Result<(), HmmError> {
        let prepared = self.prepared.take().ok_or(HmmError::NothingPrepared)?;
        let old = self.current.take().ok_or(HmmError::NoLayout)?;
        let keep = prepared.layout.region_set();
        let stale: Vec<RegionId> = self
            .owned
            .iter()
            .filter(|r| !keep.contains(r))
            .copied()
            .collect();
        for r in &stale {
            if let Some(h) = self.fabric.region(*r) {
                if h.owner_count() > 0 {
                    self.prepared = Some(prepared);
                    self.current = Some(old);
                    return Err(FabricError::RegionOwned {
                        region: *r,
                        owners: h.owner_count(),
                    }
                    .into());
                }
            }
        }
        self.store.set_time(at);
        self.store.flush_retired(self.fabric.ledger_mut())?;
        for d in &prepared.retiring {
            self.store.release_range(old.devices[d].expert_range)?;
        }
        for r in stale {
            self.fabric.free_region(r, at)?;
            self.owned.remove(&r);
        }
        self.current = Some(prepared.layout);
        Ok(())
    }

    /// Drops every layout and frees all pages and regions, detaching any
    /// remaining owners. Regions in `keep` are handed over to the caller
    /// instead of freed.
    pub fn release_all(&mut self, at: f64, keep: &BTreeSet<RegionId>) -> Result<(), HmmError> {
        self.prepared = None;
        self.current = None;
        self.store.set_time(at);
        for r in self.store.range_ids() {
            let len = self.store.range(r).map_or(0, |x| x.slots.len());
            for s in 0..len {
                if self.store.range(r).expect("live").slots[s].is_some() {
                    self.store.unmap_and_free(self.fabric.ledger_mut(), r, s)?;
                }
            }
            self.store.release_range(r)?;
        }
        self.store.flush_retired(self.fabric.ledger_mut())?;
        for r in std::mem::take(&mut self.owned) {
            if keep.contains(&r) {
                continue;
            }
            self.fabric.clear_owners(r);
            self.fabric.free_region(r, at)?;
        }
        Ok(())
    }

    /// Used bytes on every device equal live region bytes plus live page
    /// bytes.
    pub fn check_conservation(&self) -> Result<(), String> {
        for d in &self.fabric.cluster().devices {
            let used = self.fabric.ledger().used(*d);
            let accounted = self.fabric.region_bytes_on(*d) + self.store.live_bytes_on(*d);
            if used != accounted {
                return Err(format!("{d}: ledger {used} != regions+pages {accounted}"));
            }
        }
        Ok(())
    }

    /// Placement agrees with the slot contents of every device range.
    pub fn check_layout(&self, layout: &WeightLayout) -> Result<(), String> {
        let ppe = self.model.pages_per_expert as usize;
        for (d, l) in &layout.devices {
            let view = self
                .store
                .contiguous_view(l.expert_range)
                .map_err(|e| e.to_string())?;
            if view.len() != l.experts.len() * ppe {
                return Err(format!("{d}: range has {} slots", view.len()));
            }
            for (i, e) in l.experts.iter().enumerate() {
                for k in 0..ppe {
                    if view[i * ppe + k] != Some(*e) {
                        return Err(format!(
                            "{d}: slot {} holds {:?}, want {e}",
                            i * ppe + k,
                            view[i * ppe + k]
                        ));
                    }
                }
                if layout.placement.device_of(*e) != *d {
                    return Err(format!(
                        "expert {e} placed on {} but mapped on {d}",
                        layout.placement.device_of(*e)
                    ));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::TransferKind;
    use crate::topology::GB;

    fn model(experts: u32) -> ModelSpec {
        ModelSpec {
            name: "test".into(),
            num_experts_total: experts,
            experts_active_per_token: 1,
            bytes_per_expert: GB,
            attention_shard_bytes: 2 * GB,
            kv_bytes_per_token: 1_000,
            kv_tokens_per_device: 4_000_000,
            pages_per_expert: 1,
        }
    }

    fn devs(r: std::ops::Range<u32>) -> Vec<DeviceId> {
        r.map(DeviceId).collect()
    }

    fn hmm(experts: u32, cfg: &ParallelConfig) -> Hmm {
        let mut h = Hmm::new(model(experts), ClusterSpec::with_devices(8));
        h.initialize(cfg, 0.0).unwrap();
        h.fabric_mut().reset_timing();
        h
    }

    #[test]
    fn initialize_dp2_tp2() {
        let cfg = ParallelConfig::new(2, 2, devs(0..4));
        let h = Hmm::new(model(64), ClusterSpec::with_devices(4));
        let mut h = h;
        h.initialize(&cfg, 0.0).unwrap();
        let layout = h.current().unwrap();
        for d in &cfg.device_set {
            assert_eq!(layout.devices[d].experts.len(), 16);
            assert_eq!(h.fabric().ledger().used(*d), 2 * GB + 16 * GB + 4 * GB);
        }
        assert_eq!(h.fabric().duplicate_disk_loads(), 0);
        h.check_layout(layout).unwrap();
        h.check_conservation().unwrap();
        // Replicas of a tp rank get attention over p2p.
        let p2p = h
            .fabric()
            .transfers()
            .iter()
            .filter(|t| t.kind == TransferKind::P2p)
            .count();
        assert_eq!(p2p, 2);
    }

    #[test]
    fn initialize_one_expert_per_device() {
        let cfg = ParallelConfig::new(4, 1, devs(0..4));
        let h = hmm(4, &cfg);
        for d in &cfg.device_set {
            assert_eq!(h.current().unwrap().devices[d].experts.len(), 1);
        }
    }

    #[test]
    fn plan_scale_up_4_to_6() {
        let from = ParallelConfig::new(4, 1, devs(0..4));
        let h = hmm(12, &from);
        let plan = h
            .compute_plan(&ParallelConfig::new(6, 1, devs(0..6)))
            .unwrap();
        assert_eq!(plan.expert_moves.len(), 4);
        for d in devs(0..4) {
            assert_eq!(plan.expert_keeps[&d].len(), 2);
        }
        let srcs: BTreeSet<_> = plan.expert_moves.iter().map(|m| m.src).collect();
        assert_eq!(srcs.len(), 4);
        assert!(plan.expert_moves.iter().all(|m| m.dst.0 >= 4));
        assert_eq!(plan.kv_init, devs(4..6).into_iter().collect());
        assert_eq!(plan.attention_reuse, devs(0..4).into_iter().collect());
        assert_eq!(
            plan.attention_p2p,
            vec![(DeviceId(0), DeviceId(4)), (DeviceId(1), DeviceId(5))]
        );
        assert!(plan.target_placement(12).is_balanced_for(&plan.to_cfg));
    }

    #[test]
    fn plan_scale_down_6_to_4() {
        let from = ParallelConfig::new(6, 1, devs(0..6));
        let h = hmm(12, &from);
        let plan = h
            .compute_plan(&ParallelConfig::new(4, 1, devs(0..4)))
            .unwrap();
        let moved: BTreeSet<u32> = plan.expert_moves.iter().map(|m| m.expert).collect();
        assert_eq!(moved, [8, 9, 10, 11].into_iter().collect());
        assert!(plan.kv_init.is_empty());
        assert_eq!(plan.retiring_devices, devs(4..6).into_iter().collect());
    }

    #[test]
    fn plan_rejects_tp_change() {
        let from = ParallelConfig::new(2, 2, devs(0..4));
        let h = hmm(12, &from);
        let err = h
            .compute_plan(&ParallelConfig::new(3, 1, devs(0..3)))
            .unwrap_err();
        assert_eq!(err, HmmError::TpChangeRejected { from: 2, to: 1 });
    }

    #[test]
    fn plan_rejects_unknown_device() {
        let from = ParallelConfig::new(2, 1, devs(0..2));
        let h = hmm(12, &from);
        assert!(matches!(
            h.compute_plan(&ParallelConfig::new(
                3,
                1,
                vec![DeviceId(0), DeviceId(1), DeviceId(42)]
            )),
            Err(HmmError::InvalidConfig(_))
        ));
    }

    #[test]
    fn plans_are_deterministic() {
        let from = ParallelConfig::new(3, 2, devs(0..6));
        let to = ParallelConfig::new(4, 2, devs(0..8));
        let a = serde_json::to_string(&hmm(64, &from).compute_plan(&to).unwrap()).unwrap();
        let b = serde_json::to_string(&hmm(64, &from).compute_plan(&to).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn execute_scale_up_structure() {
        let from = ParallelConfig::new(4, 1, devs(0..4));
        let to = ParallelConfig::new(6, 1, devs(0..6));
        let mut h = hmm(12, &from);
        let before: Vec<u64> = devs(0..4)
            .iter()
            .map(|d| h.fabric().ledger().used(*d))
            .collect();
        let n_before = h.fabric().transfers().len();
        let plan = h.compute_plan(&to).unwrap();
        let rec = h.execute_plan(&plan, 10.0, ExecOptions::default()).unwrap();
        assert!(
            rec.transfer_end >= rec.start
                && rec.map_end >= rec.transfer_end
                && rec.end >= rec.map_end
        );
        assert_eq!(rec.map_ops, 4);
        assert!((rec.duration() - plan.cost.est_duration).abs() < 1e-9);
        // Shared devices shed pages but keep them until commit.
        for (i, d) in devs(0..4).iter().enumerate() {
            assert_eq!(h.fabric().ledger().used(*d), before[i]);
        }
        for t in &h.fabric().transfers()[n_before..] {
            assert!(t.dst.0 >= 4, "transfer into shared device: {t:?}");
        }
        assert_eq!(h.store().retired().len(), 4);
        h.check_layout(h.prepared().unwrap()).unwrap();
        h.check_conservation().unwrap();
        let peak = h.fabric().ledger().total_peak();
        h.commit_switchover(20.0).unwrap();
        assert_eq!(h.fabric().ledger().total_peak(), peak);
        for d in devs(0..4) {
            assert_eq!(h.fabric().ledger().used(d), 2 * GB + 2 * GB + 4 * GB);
        }
        h.check_layout(h.current().unwrap()).unwrap();
        h.check_conservation().unwrap();
        assert_eq!(h.fabric().duplicate_disk_loads(), 0);
    }

    #[test]
    fn execute_scale_down_frees_retiring_at_commit() {
        let from = ParallelConfig::new(6, 1, devs(0..6));
        let to = ParallelConfig::new(4, 1, devs(0..4));
        let mut h = hmm(12, &from);
        let plan = h.compute_plan(&to).unwrap();
        h.execute_plan(&plan, 0.0, ExecOptions::default()).unwrap();
        assert!(h.fabric().ledger().used(DeviceId(5)) > 0);
        h.commit_switchover(5.0).unwrap();
        assert_eq!(h.fabric().ledger().used(DeviceId(4)), 0);
        assert_eq!(h.fabric().ledger().used(DeviceId(5)), 0);
        for d in devs(0..4) {
            assert_eq!(h.current().unwrap().devices[&d].experts.len(), 3);
        }
        h.check_layout(h.current().unwrap()).unwrap();
        h.check_conservation().unwrap();
    }

    #[test]
    fn repeated_scaling_keeps_layout_consistent() {
        let mut h = hmm(12, &ParallelConfig::new(2, 1, devs(0..2)));
        for n in [5u32, 3, 7, 4, 8, 1, 6] {
            let to = ParallelConfig::new(n, 1, devs(0..n));
            let plan = h.compute_plan(&to).unwrap();
            h.execute_plan(&plan, 0.0, ExecOptions::default()).unwrap();
            h.check_layout(h.prepared().unwrap()).unwrap();
            h.commit_switchover(1.0).unwrap();
            h.check_layout(h.current().unwrap()).unwrap();
            h.check_conservation().unwrap();
        }
    }

    #[test]
    fn commit_refuses_while_old_regions_attached() {
        let from = ParallelConfig::new(6, 1, devs(0..6));
        let mut h = hmm(12, &from);
        let old = h.current().unwrap().attach_regions();
        for r in &old {
            h.fabric_mut().zero_copy_attach(*r, 1, 0.0).unwrap();
        }
        let plan = h
            .compute_plan(&ParallelConfig::new(4, 1, devs(0..4)))
            .unwrap();
        h.execute_plan(&plan, 0.0, ExecOptions::default()).unwrap();
        assert!(h.commit_switchover(1.0).is_err());
        h.fabric_mut().detach_all(1);
        h.commit_switchover(1.0).unwrap();
    }

    #[test]
    fn commit_without_prepared_layout() {
        let mut h = hmm(12, &ParallelConfig::new(2, 1, devs(0..2)));
        assert_eq!(h.commit_switchover(0.0), Err(HmmError::NothingPrepared));
    }

    #[test]
    fn ablated_execution_uses_copies_and_disk() {
        let from = ParallelConfig::new(4, 1, devs(0..4));
        let to = ParallelConfig::new(6, 1, devs(0..6));
        let mut full = hmm(12, &from);
        let plan = full.compute_plan(&to).unwrap();
        let a = full
            .execute_plan(&plan, 0.0, ExecOptions::default())
            .unwrap();
        let mut no_ipc = hmm(12, &from);
        let b = no_ipc
            .execute_plan(
                &plan,
                0.0,
                ExecOptions {
                    p2p: true,
                    ipc_alloc: false,
                },
            )
            .unwrap();
        let mut no_p2p = hmm(12, &from);
        let c = no_p2p
            .execute_plan(
                &plan,
                0.0,
                ExecOptions {
                    p2p: false,
                    ipc_alloc: false,
                },
            )
            .unwrap();
        assert!(a.duration() < b.duration() && b.duration() < c.duration());
        assert_eq!(b.local_copy_bytes, 4 * 2 * GB);
        assert!(no_ipc.fabric().ledger().total_peak() > full.fabric().ledger().total_peak());
        assert_eq!(c.p2p_bytes, 0);
    }

    #[test]
    fn add_nodes_charges_group_init_once() {
        let mut h = hmm(12, &ParallelConfig::new(2, 1, devs(0..2)));
        assert!(h.add_nodes(&[DeviceId(3)]).is_err());
        h.add_nodes(&[DeviceId(8), DeviceId(9)]).unwrap();
        let to = ParallelConfig::new(
            4,
            1,
            vec![DeviceId(0), DeviceId(1), DeviceId(8), DeviceId(9)],
        );
        let plan = h.compute_plan(&to).unwrap();
        let rec = h.execute_plan(&plan, 0.0, ExecOptions::default()).unwrap();
        assert_eq!(rec.group_init_end, 1.0);
        assert!((rec.duration() - plan.cost.est_duration).abs() < 1e-9);
        h.commit_switchover(5.0).unwrap();
        let plan = h
            .compute_plan(&ParallelConfig::new(2, 1, devs(0..2)))
            .unwrap();
        let rec = h.execute_plan(&plan, 10.0, ExecOptions::default()).unwrap();
        assert_eq!(rec.group_init_end, 10.0);
    }

    #[test]
    fn multi_page_experts() {
        let mut m = model(8);
        m.pages_per_expert = 4;
        let mut h = Hmm::new(m, ClusterSpec::with_devices(4));
        h.initialize(&ParallelConfig::new(2, 1, devs(0..2)), 0.0)
            .unwrap();
        let plan = h
            .compute_plan(&ParallelConfig::new(4, 1, devs(0..4)))
            .unwrap();
        let rec = h.execute_plan(&plan, 0.0, ExecOptions::default()).unwrap();
        assert_eq!(rec.map_ops, plan.expert_moves.len() as u64 * 4);
        h.commit_switchover(1.0).unwrap();
        h.check_layout(h.current().unwrap()).unwrap();
        h.check_conservation().unwrap();
    }

    #[test]
    fn release_all_returns_to_zero() {
        let mut h = hmm(12, &ParallelConfig::new(3, 1, devs(0..3)));
        h.release_all(1.0, &BTreeSet::new()).unwrap();
        assert_eq!(h.fabric().ledger().total_used(), 0);
        h.initialize(&ParallelConfig::new(4, 1, devs(0..4)), 2.0)
            .unwrap();
        h.check_conservation().unwrap();
    }
}
