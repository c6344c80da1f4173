//! Simulated device memory and data movement.
//!
//! [`MemoryLedger`] does per-device byte accounting with running peaks.
//! [`Fabric`] owns the ledger, the live regions, and the transfer log, and
//! times the disk, p2p, zero-copy, kv-init and local-copy primitives.
//!
//! Timing model: every primitive that writes to a device is queued on that
//! device, so transfers sharing a destination serialize while transfers to
//! distinct destinations overlap fully. Zero-copy attach does not occupy the
//! destination queue. Allocation is charged when a transfer starts and is
//! only released by an explicit free.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{ClusterSpec, DeviceId, GB};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FabricError {
    #[error(
        "out of memory on {device}: requested {requested} bytes with {used} of {capacity} in use"
    )]
    OutOfMemory {
        device: DeviceId,
        requested: u64,
        used: u64,
        capacity: u64,
    },
    #[error("unknown device {0}")]
    UnknownDevice(DeviceId),
    #[error("region {0} does not exist or was freed")]
    UnknownRegion(RegionId),
    #[error("region {region} still has {owners} owner(s)")]
    RegionOwned { region: RegionId, owners: u32 },
    #[error("instance {instance} is not attached to region {region}")]
    NotAttached { region: RegionId, instance: u32 },
    #[error("kv cache for {family} already initialized on {device}")]
    KvAlreadyInitialized { device: DeviceId, family: String },
    #[error("device {0} already exists")]
    DuplicateDevice(DeviceId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceUsage {
    pub used: u64,
    pub peak: u64,
    pub reserved_kv: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSample {
    pub time: f64,
    pub device: DeviceId,
    pub used: u64,
    pub peak: u64,
    /// Sum of `used` over all devices after this change.
    pub total: u64,
}

/// Per-device used/peak accounting.
///
/// Besides the per-device peaks the ledger tracks the peak of the summed
/// usage, and a resettable window peak of that sum used to measure the peak
/// memory of a single scaling event.
#[derive(Debug, Clone)]
pub struct MemoryLedger {
    capacity: u64,
    devices: BTreeMap<DeviceId, DeviceUsage>,
    total_used: u64,
    total_peak: u64,
    window_peak: u64,
    now: f64,
    trace: Vec<LedgerSample>,
}

impl MemoryLedger {
    pub fn new(devices: &[DeviceId], capacity: u64) -> Self {
        MemoryLedger {
            capacity,
            devices: devices
                .iter()
                .map(|d| (*d, DeviceUsage::default()))
                .collect(),
            total_used: 0,
            total_peak: 0,
            window_peak: 0,
            now: 0.0,
            trace: Vec::new(),
        }
    }

    pub fn add_device(&mut self, d: DeviceId) -> Result<(), FabricError> {
        if self.devices.contains_key(&d) {
            return Err(FabricError::DuplicateDevice(d));
        }
        self.devices.insert(d, DeviceUsage::default());
        Ok(())
    }

    pub fn set_time(&mut self, t: f64) {
        self.now = t;
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn usage(&self, d: DeviceId) -> Option<DeviceUsage> {
        self.devices.get(&d).copied()
    }

    pub fn used(&self, d: DeviceId) -> u64 {
        self.devices.get(&d).map_or(0, |u| u.used)
    }

    pub fn headroom(&self, d: DeviceId) -> u64 {
        self.capacity.saturating_sub(self.used(d))
    }

    pub fn total_used(&self) -> u64 {
        self.total_used
    }

    /// Peak of the summed usage over the ledger's lifetime.
    pub fn total_peak(&self) -> u64 {
        self.total_peak
    }

    /// Largest single-device peak.
    pub fn device_peak(&self) -> u64 {
        self.devices.values().map(|u| u.peak).max().unwrap_or(0)
    }

    pub fn begin_window(&mut self) {
        self.window_peak = self.total_used;
    }

    pub fn window_peak(&self) -> u64 {
        self.window_peak
    }

    pub fn trace(&self) -> &[LedgerSample] {
        &self.trace
    }

    pub fn charge(&mut self, d: DeviceId, bytes: u64) -> Result<(), FabricError> {
        let capacity = self.capacity;
        let u = self
            .devices
            .get_mut(&d)
            .ok_or(FabricError::UnknownDevice(d))?;
        if bytes == 0 {
            return Ok(());
        }
        if u.used + bytes > capacity {
            return Err(FabricError::OutOfMemory {
                device: d,
                requested: bytes,
                used: u.used,
                capacity,
            });
        }
        u.used += bytes;
        u.peak = u.peak.max(u.used);
        self.total_used += bytes;
        self.total_peak = self.total_peak.max(self.total_used);
        self.window_peak = self.window_peak.max(self.total_used);
        self.record(d);
        Ok(())
    }

    pub fn release(&mut self, d: DeviceId, bytes: u64) {
        let Some(u) = self.devices.get_mut(&d) else {
            return;
        };
        if bytes == 0 {
            return;
        }
        assert!(u.used >= bytes, "ledger underflow on {d}");
        u.used -= bytes;
        self.total_used -= bytes;
        self.record(d);
    }

    fn record(&mut self, d: DeviceId) {
        let u = self.devices[&d];
        self.trace.push(LedgerSample {
            time: self.now,
            device: d,
            used: u.used,
            peak: u.peak,
            total: self.total_used,
        });
    }

    /// Replays a trace and returns the per-device peaks it implies.
    pub fn replay_peaks(trace: &[LedgerSample]) -> BTreeMap<DeviceId, u64> {
        let mut peaks = BTreeMap::new();
        for s in trace {
            let p = peaks.entry(s.device).or_insert(0u64);
            *p = (*p).max(s.used);
        }
        peaks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RegionId(pub u64);

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionKind {
    Attention,
    /// Handle on a device's expert virtual range. The pages behind it are
    /// charged by the page store, not by the handle.
    ExpertPages,
    /// Dense expert block, used by instances that load their own weights.
    ExpertBlock,
    Kv,
}

/// A live device allocation that instances can reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionHandle {
    pub region_id: RegionId,
    pub device: DeviceId,
    pub bytes: u64,
    pub kind: RegionKind,
    pub tag: String,
    pub owners: BTreeSet<u32>,
    /// Whether `bytes` were charged to the ledger by this handle.
    pub charged: bool,
}

impl RegionHandle {
    pub fn owner_count(&self) -> u32 {
        self.owners.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferKind {
    Disk,
    P2p,
    ZeroCopy,
    KvInit,
    LocalCopy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Disk,
    Device(DeviceId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferEvent {
    pub seq: u64,
    pub kind: TransferKind,
    pub src: Endpoint,
    pub dst: DeviceId,
    pub bytes: u64,
    pub start: f64,
    pub duration: f64,
    pub tensor_tag: String,
    /// Net ledger change caused on `dst`.
    pub ledger_delta: i64,
    /// Disk loads of a tag that was already loaded from disk once.
    pub duplicate: bool,
}

impl TransferEvent {
    pub fn end(&self) -> f64 {
        self.start + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttachRecord {
    pub region: RegionId,
    pub instance: u32,
    pub start: f64,
    pub duration: f64,
}

/// Device memory, regions and the transfer log for one scenario.
#[derive(Debug, Clone)]
pub struct Fabric {
    cluster: ClusterSpec,
    ledger: MemoryLedger,
    regions: BTreeMap<RegionId, RegionHandle>,
    transfers: Vec<TransferEvent>,
    disk_loaded: BTreeSet<String>,
    duplicate_disk_loads: u32,
    kv_families: BTreeSet<(DeviceId, String)>,
    busy_until: BTreeMap<DeviceId, f64>,
    next_region: u64,
    next_seq: u64,
}

impl Fabric {
    pub fn new(cluster: ClusterSpec) -> Self {
        let ledger = MemoryLedger::new(&cluster.devices, cluster.hbm_bytes_per_device);
        Fabric {
            cluster,
            ledger,
            regions: BTreeMap::new(),
            transfers: Vec::new(),
            disk_loaded: BTreeSet::new(),
            duplicate_disk_loads: 0,
            kv_families: BTreeSet::new(),
            busy_until: BTreeMap::new(),
            next_region: 0,
            next_seq: 0,
        }
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    pub fn ledger(&self) -> &MemoryLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut MemoryLedger {
        &mut self.ledger
    }

    pub fn transfers(&self) -> &[TransferEvent] {
        &self.transfers
    }

    pub fn duplicate_disk_loads(&self) -> u32 {
        self.duplicate_disk_loads
    }

    pub fn region(&self, id: RegionId) -> Option<&RegionHandle> {
        self.regions.get(&id)
    }

    pub fn regions(&self) -> impl Iterator<Item = &RegionHandle> {
        self.regions.values()
    }

    /// Bytes charged by live regions on `d`.
    pub fn region_bytes_on(&self, d: DeviceId) -> u64 {
        self.regions
            .values()
            .filter(|r| r.device == d && r.charged)
            .map(|r| r.bytes)
            .sum()
    }

    pub fn add_device(&mut self, d: DeviceId) -> Result<(), FabricError> {
        if self.cluster.devices.contains(&d) {
            return Err(FabricError::DuplicateDevice(d));
        }
        self.ledger.add_device(d)?;
        self.cluster.devices.push(d);
        Ok(())
    }

    /// Forgets device queue state, so the next transfer on any device starts
    /// no earlier than the time it is issued at.
    pub fn reset_timing(&mut self) {
        self.busy_until.clear();
    }

    fn slot(&mut self, dst: DeviceId, at: f64, duration: f64) -> f64 {
        let start = at.max(
            self.busy_until
                .get(&dst)
                .copied()
                .unwrap_or(f64::NEG_INFINITY),
        );
        self.busy_until.insert(dst, start + duration);
        start
    }

    fn new_region(
        &mut self,
        device: DeviceId,
        bytes: u64,
        kind: RegionKind,
        tag: &str,
        charged: bool,
    ) -> RegionId {
        let id = RegionId(self.next_region);
        self.next_region += 1;
        self.regions.insert(
            id,
            RegionHandle {
                region_id: id,
                device,
                bytes,
                kind,
                tag: tag.to_string(),
                owners: BTreeSet::new(),
                charged,
            },
        );
        id
    }

    #[allow(clippy::too_many_arguments)]
    fn log(
        &mut self,
        kind: TransferKind,
        src: Endpoint,
        dst: DeviceId,
        bytes: u64,
        start: f64,
        duration: f64,
        tag: &str,
        ledger_delta: i64,
        duplicate: bool,
    ) -> TransferEvent {
        let ev = TransferEvent {
            seq: self.next_seq,
            kind,
            src,
            dst,
            bytes,
            start,
            duration,
            tensor_tag: tag.to_string(),
            ledger_delta,
            duplicate,
        };
        self.next_seq += 1;
        self.transfers.push(ev.clone());
        ev
    }

    fn ensure_device(&self, d: DeviceId) -> Result<(), FabricError> {
        if self.ledger.usage(d).is_none() {
            return Err(FabricError::UnknownDevice(d));
        }
        Ok(())
    }

    fn check_headroom(&self, d: DeviceId, bytes: u64) -> Result<(), FabricError> {
        self.ensure_device(d)?;
        let used = self.ledger.used(d);
        if used + bytes > self.ledger.capacity() {
            return Err(FabricError::OutOfMemory {
                device: d,
                requested: bytes,
                used,
                capacity: self.ledger.capacity(),
            });
        }
        Ok(())
    }

    fn disk_transfer(
        &mut self,
        dst: DeviceId,
        bytes: u64,
        tag: &str,
        at: f64,
        alloc: Option<RegionKind>,
    ) -> Result<(Option<RegionId>, TransferEvent), FabricError> {
        if alloc.is_some() {
            self.check_headroom(dst, bytes)?;
        } else {
            self.ensure_device(dst)?;
        }
        let duration = bytes as f64 / self.cluster.disk_bandwidth;
        let start = self.slot(dst, at, duration);
        let duplicate = bytes > 0 && !self.disk_loaded.insert(tag.to_string());
        if duplicate {
            self.duplicate_disk_loads += 1;
        }
        let region = match alloc {
            Some(kind) if bytes > 0 => {
                self.ledger.set_time(start);
                self.ledger.charge(dst, bytes)?;
                Some(self.new_region(dst, bytes, kind, tag, true))
            }
            Some(kind) => Some(self.new_region(dst, 0, kind, tag, true)),
            None => None,
        };
        let delta = if region.is_some() { bytes as i64 } else { 0 };
        let ev = self.log(
            TransferKind::Disk,
            Endpoint::Disk,
            dst,
            bytes,
            start,
            duration,
            tag,
            delta,
            duplicate,
        );
        Ok((region, ev))
    }

    /// Loads `bytes` from disk into a fresh region on `dst`.
    pub fn disk_copy(
        &mut self,
        dst: DeviceId,
        bytes: u64,
        tensor_tag: &str,
        kind: RegionKind,
        at: f64,
    ) -> Result<(RegionId, TransferEvent), FabricError> {
        let (r, ev) = self.disk_transfer(dst, bytes, tensor_tag, at, Some(kind))?;
        Ok((r.expect("allocating transfer"), ev))
    }

    /// Loads from disk into memory that is already allocated (expert pages).
    pub fn disk_fill(
        &mut self,
        dst: DeviceId,
        bytes: u64,
        tensor_tag: &str,
        at: f64,
    ) -> Result<TransferEvent, FabricError> {
        Ok(self.disk_transfer(dst, bytes, tensor_tag, at, None)?.1)
    }

    fn p2p_transfer(
        &mut self,
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
        tag: &str,
        at: f64,
        alloc: Option<RegionKind>,
    ) -> Result<(Option<RegionId>, TransferEvent), FabricError> {
        self.ensure_device(src)?;
        if alloc.is_some() {
            self.check_headroom(dst, bytes)?;
        } else {
            self.ensure_device(dst)?;
        }
        let duration = self.cluster.p2p_latency + bytes as f64 / self.cluster.p2p_bandwidth;
        let start = self.slot(dst, at, duration);
        let region = match alloc {
            Some(kind) => {
                self.ledger.set_time(start);
                self.ledger.charge(dst, bytes)?;
                Some(self.new_region(dst, bytes, kind, tag, true))
            }
            None => None,
        };
        let delta = if region.is_some() { bytes as i64 } else { 0 };
        let ev = self.log(
            TransferKind::P2p,
            Endpoint::Device(src),
            dst,
            bytes,
            start,
            duration,
            tag,
            delta,
            false,
        );
        Ok((region, ev))
    }

    /// Device-to-device copy into a fresh region on `dst`. `src` is unchanged.
    pub fn p2p_copy(
        &mut self,
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
        tensor_tag: &str,
        kind: RegionKind,
        at: f64,
    ) -> Result<(RegionId, TransferEvent), FabricError> {
        let (r, ev) = self.p2p_transfer(src, dst, bytes, tensor_tag, at, Some(kind))?;
        Ok((r.expect("allocating transfer"), ev))
    }

    /// Device-to-device copy into already allocated pages on `dst`.
    pub fn p2p_fill(
        &mut self,
        src: DeviceId,
        dst: DeviceId,
        bytes: u64,
        tensor_tag: &str,
        at: f64,
    ) -> Result<TransferEvent, FabricError> {
        Ok(self.p2p_transfer(src, dst, bytes, tensor_tag, at, None)?.1)
    }

    /// Hands a reference to `region` to `instance`. No bytes move and the
    /// ledger is untouched.
    pub fn zero_copy_attach(
        &mut self,
        region: RegionId,
        instance: u32,
        at: f64,
    ) -> Result<AttachRecord, FabricError> {
        let cost = self.cluster.zero_copy_cost;
        let r = self
            .regions
            .get_mut(&region)
            .ok_or(FabricError::UnknownRegion(region))?;
        r.owners.insert(instance);
        let (dst, tag) = (r.device, r.tag.clone());
        self.log(
            TransferKind::ZeroCopy,
            Endpoint::Device(dst),
            dst,
            0,
            at,
            cost,
            &tag,
            0,
            false,
        );
        Ok(AttachRecord {
            region,
            instance,
            start: at,
            duration: cost,
        })
    }

    pub fn detach(&mut self, region: RegionId, instance: u32) -> Result<(), FabricError> {
        let r = self
            .regions
            .get_mut(&region)
            .ok_or(FabricError::UnknownRegion(region))?;
        if !r.owners.remove(&instance) {
            return Err(FabricError::NotAttached { region, instance });
        }
        Ok(())
    }

    /// Drops every owner of `region`, if it exists.
    pub fn clear_owners(&mut self, region: RegionId) {
        if let Some(r) = self.regions.get_mut(&region) {
            r.owners.clear();
        }
    }

    /// Detaches `instance` from every region it references.
    pub fn detach_all(&mut self, instance: u32) {
        for r in self.regions.values_mut() {
            r.owners.remove(&instance);
        }
    }

    /// Allocates and formats a KV cache region. `family` identifies the
    /// instance lineage the cache belongs to; one per device.
    pub fn kv_init(
        &mut self,
        dst: DeviceId,
        bytes: u64,
        family: &str,
        at: f64,
    ) -> Result<(RegionId, TransferEvent), FabricError> {
        self.check_headroom(dst, bytes)?;
        if self.kv_families.contains(&(dst, family.to_string())) {
            return Err(FabricError::KvAlreadyInitialized {
                device: dst,
                family: family.to_string(),
            });
        }
        let duration = bytes as f64 / GB as f64 * self.cluster.kv_init_seconds_per_gb;
        let start = self.slot(dst, at, duration);
        self.ledger.set_time(start);
        self.ledger.charge(dst, bytes)?;
        if let Some(u) = self.ledger.devices.get_mut(&dst) {
            u.reserved_kv += bytes;
        }
        self.kv_families.insert((dst, family.to_string()));
        let tag = format!("{family}/kv");
        let id = self.new_region(dst, bytes, RegionKind::Kv, &tag, true);
        let ev = self.log(
            TransferKind::KvInit,
            Endpoint::Device(dst),
            dst,
            bytes,
            start,
            duration,
            &tag,
            bytes as i64,
            false,
        );
        Ok((id, ev))
    }

    /// Same-device duplicate of `region`, used where handles cannot be shared.
    pub fn local_copy(
        &mut self,
        region: RegionId,
        at: f64,
    ) -> Result<(RegionId, TransferEvent), FabricError> {
        let r = self
            .regions
            .get(&region)
            .ok_or(FabricError::UnknownRegion(region))?
            .clone();
        self.check_headroom(r.device, r.bytes)?;
        let duration = r.bytes as f64 / self.cluster.local_copy_bandwidth;
        let start = self.slot(r.device, at, duration);
        self.ledger.set_time(start);
        self.ledger.charge(r.device, r.bytes)?;
        let tag = format!("{}/copy", r.tag);
        let id = self.new_region(r.device, r.bytes, r.kind, &tag, true);
        let ev = self.log(
            TransferKind::LocalCopy,
            Endpoint::Device(r.device),
            r.device,
            r.bytes,
            start,
            duration,
            &tag,
            r.bytes as i64,
            false,
        );
        Ok((id, ev))
    }

    /// Registers a handle without charging the ledger.
    pub fn register_handle(
        &mut self,
        device: DeviceId,
        bytes: u64,
        kind: RegionKind,
        tag: &str,
    ) -> RegionId {
        self.new_region(device, bytes, kind, tag, false)
    }

    /// Frees a region with no owners. Peaks are unchanged.
    pub fn free_region(&mut self, id: RegionId, at: f64) -> Result<(), FabricError> {
        let r = self
            .regions
            .get(&id)
            .ok_or(FabricError::UnknownRegion(id))?;
        if !r.owners.is_empty() {
            return Err(FabricError::RegionOwned {
                region: id,
                owners: r.owner_count(),
            });
        }
        let r = self.regions.remove(&id).expect("checked above");
        if r.charged {
            self.ledger.set_time(at);
            self.ledger.release(r.device, r.bytes);
        }
        if r.kind == RegionKind::Kv {
            if let Some(u) = self.ledger.devices.get_mut(&r.device) {
                u.reserved_kv = u.reserved_kv.saturating_sub(r.bytes);
            }
            if let Some(family) = r.tag.strip_suffix("/kv") {
                self.kv_families.remove(&(r.device, family.to_string()));
            }
        }
        Ok(())
    }

    /// Time at which `d` has finished all queued work.
    pub fn busy_until(&self, d: DeviceId) -> f64 {
        self.busy_until
            .get(&d)
            .copied()
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fabric(n: u32) -> Fabric {
        Fabric::new(ClusterSpec::with_devices(n))
    }

    const D0: DeviceId = DeviceId(0);
    const D1: DeviceId = DeviceId(1);

    #[test]
    fn disk_copy_timing_and_charge() {
        let mut f = fabric(2);
        let (_, ev) = f
            .disk_copy(D0, 10 * GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        assert!((ev.duration - 10.0).abs() < 1e-12);
        assert_eq!(f.ledger().used(D0), 10 * GB);
        assert!(!ev.duplicate);
    }

    #[test]
    fn duplicate_disk_load_is_flagged() {
        let mut f = fabric(2);
        f.disk_copy(D0, GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        let (_, ev) = f
            .disk_copy(D1, GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        assert!(ev.duplicate);
        assert_eq!(f.duplicate_disk_loads(), 1);
    }

    #[test]
    fn zero_byte_disk_copy() {
        let mut f = fabric(1);
        let (_, ev) = f
            .disk_copy(D0, 0, "empty", RegionKind::Attention, 0.0)
            .unwrap();
        assert_eq!(ev.duration, 0.0);
        assert_eq!(f.ledger().used(D0), 0);
    }

    #[test]
    fn disk_copy_out_of_memory() {
        let mut f = fabric(1);
        let err = f
            .disk_copy(D0, 65 * GB, "big", RegionKind::Attention, 0.0)
            .unwrap_err();
        assert!(matches!(err, FabricError::OutOfMemory { .. }));
        assert_eq!(f.ledger().used(D0), 0);
    }

    #[test]
    fn p2p_timing() {
        let mut c = ClusterSpec::with_devices(2);
        c.p2p_bandwidth = 10.0e9;
        c.p2p_latency = 0.001;
        let mut f = Fabric::new(c);
        let (_, ev) = f
            .p2p_copy(D0, D1, 10 * GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        assert!((ev.duration - 1.001).abs() < 1e-12);
        assert_eq!(f.ledger().used(D1), 10 * GB);
        assert_eq!(f.ledger().used(D0), 0);
        let (_, zero) = f
            .p2p_copy(D0, D1, 0, "z", RegionKind::Attention, 0.0)
            .unwrap();
        assert!((zero.duration - 0.001).abs() < 1e-15);
    }

    #[test]
    fn p2p_is_an_order_of_magnitude_faster_than_disk() {
        let mut f = fabric(2);
        let (_, p) = f
            .p2p_copy(D0, D1, 10 * GB, "a", RegionKind::Attention, 0.0)
            .unwrap();
        let (_, d) = f
            .disk_copy(D0, 10 * GB, "b", RegionKind::Attention, 0.0)
            .unwrap();
        assert!(p.duration <= d.duration / 10.0);
    }

    #[test]
    fn transfers_to_same_device_serialize() {
        let mut f = fabric(3);
        let (_, a) = f
            .disk_copy(D0, GB, "a", RegionKind::Attention, 0.0)
            .unwrap();
        let (_, b) = f
            .disk_copy(D0, GB, "b", RegionKind::Attention, 0.0)
            .unwrap();
        let (_, c) = f
            .disk_copy(D1, GB, "c", RegionKind::Attention, 0.0)
            .unwrap();
        assert_eq!(b.start, a.end());
        assert_eq!(c.start, 0.0);
    }

    #[test]
    fn zero_copy_leaves_ledger_alone() {
        let mut f = fabric(1);
        let (r, _) = f
            .disk_copy(D0, GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        let before = f.ledger().used(D0);
        f.zero_copy_attach(r, 1, 1.0).unwrap();
        f.zero_copy_attach(r, 2, 1.0).unwrap();
        assert_eq!(f.region(r).unwrap().owner_count(), 2);
        assert_eq!(f.ledger().used(D0), before);
        assert!(f
            .transfers()
            .iter()
            .filter(|t| t.kind == TransferKind::ZeroCopy)
            .all(|t| t.ledger_delta == 0 && t.bytes == 0));
        assert!(matches!(
            f.free_region(r, 2.0),
            Err(FabricError::RegionOwned { owners: 2, .. })
        ));
        f.detach(r, 1).unwrap();
        f.detach(r, 2).unwrap();
        f.free_region(r, 2.0).unwrap();
        assert_eq!(f.ledger().used(D0), 0);
        assert!(f.zero_copy_attach(r, 3, 3.0).is_err());
    }

    #[test]
    fn kv_init_charges_and_guards() {
        let mut f = fabric(1);
        let (r, _) = f.kv_init(D0, 8 * GB, "main", 0.0).unwrap();
        assert_eq!(f.ledger().used(D0), 8 * GB);
        assert_eq!(f.ledger().usage(D0).unwrap().reserved_kv, 8 * GB);
        assert!(matches!(
            f.kv_init(D0, GB, "main", 0.0),
            Err(FabricError::KvAlreadyInitialized { .. })
        ));
        f.free_region(r, 1.0).unwrap();
        let (_, ev) = f.kv_init(D0, 0, "main", 1.0).unwrap();
        assert_eq!(ev.duration, 0.0);
    }

    #[test]
    fn peak_is_a_running_max_and_replays() {
        let mut f = fabric(2);
        let (a, _) = f
            .disk_copy(D0, 3 * GB, "a", RegionKind::Attention, 0.0)
            .unwrap();
        let (_b, _) = f
            .disk_copy(D1, 2 * GB, "b", RegionKind::Attention, 0.0)
            .unwrap();
        f.free_region(a, 5.0).unwrap();
        let (_c, _) = f
            .disk_copy(D0, GB, "c", RegionKind::Attention, 6.0)
            .unwrap();
        let ledger = f.ledger();
        assert_eq!(ledger.usage(D0).unwrap().peak, 3 * GB);
        assert_eq!(ledger.total_peak(), 5 * GB);
        assert_eq!(ledger.device_peak(), 3 * GB);
        let peaks = MemoryLedger::replay_peaks(ledger.trace());
        assert_eq!(peaks[&D0], 3 * GB);
        assert_eq!(peaks[&D1], 2 * GB);
    }

    #[test]
    fn window_peak_tracks_sum() {
        let mut l = MemoryLedger::new(&[D0, D1], 10 * GB);
        l.charge(D0, 4 * GB).unwrap();
        l.begin_window();
        l.charge(D1, 2 * GB).unwrap();
        l.release(D0, 4 * GB);
        assert_eq!(l.window_peak(), 6 * GB);
    }

    #[test]
    fn local_copy_double_charges() {
        let mut f = fabric(1);
        let (r, _) = f
            .disk_copy(D0, GB, "w", RegionKind::Attention, 0.0)
            .unwrap();
        let (_, ev) = f.local_copy(r, 0.0).unwrap();
        assert_eq!(f.ledger().used(D0), 2 * GB);
        assert_eq!(ev.kind, TransferKind::LocalCopy);
    }
}
