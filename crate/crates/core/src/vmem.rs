//! Expert page store.
//!
//! Physical pages are allocated per device and charged to the memory ledger.
//! Virtual ranges are contiguous slot arrays that reference pages; they cost
//! nothing. Moving an expert between slots or ranges is a handful of map
//! operations, never a byte copy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{FabricError, MemoryLedger};
use crate::topology::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RangeId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PageContent {
    Free,
    Expert(u32),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalPage {
    pub page_id: PageId,
    pub device: DeviceId,
    pub size: u64,
    pub content: PageContent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualRange {
    pub range_id: RangeId,
    pub device: DeviceId,
    pub slots: Vec<Option<PageId>>,
    pub slot_size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VmemOpKind {
    Alloc,
    Free,
    Reserve,
    Resize,
    Map,
    Unmap,
    Retire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmemOp {
    pub seq: u64,
    pub time: f64,
    pub op: VmemOpKind,
    pub device: DeviceId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub page: Option<PageId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub range: Option<RangeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VmemError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("unknown page {0:?}")]
    UnknownPage(PageId),
    #[error("unknown range {0:?}")]
    UnknownRange(RangeId),
    #[error("slot {slot} out of bounds for range {range:?} with {len} slots")]
    SlotOutOfBounds {
        range: RangeId,
        slot: usize,
        len: usize,
    },
    #[error("page {page:?} on {page_device} cannot be mapped into a range on {range_device}")]
    CrossDevice {
        page: PageId,
        page_device: DeviceId,
        range_device: DeviceId,
    },
    #[error("page {0:?} is already mapped")]
    AlreadyMapped(PageId),
    #[error("slot {slot} of range {range:?} is already mapped")]
    SlotOccupied { range: RangeId, slot: usize },
    #[error("slot {slot} of range {range:?} is not mapped")]
    SlotUnmapped { range: RangeId, slot: usize },
    #[error("page {0:?} is still mapped")]
    StillMapped(PageId),
    #[error("page {0:?} is waiting in the retire set")]
    Retired(PageId),
    #[error("range {0:?} still has mapped slots")]
    RangeInUse(RangeId),
}

#[derive(Debug, Clone)]
pub struct PageStore {
    page_size: u64,
    pages: BTreeMap<PageId, PhysicalPage>,
    ranges: BTreeMap<RangeId, VirtualRange>,
    mapped_at: BTreeMap<PageId, (RangeId, usize)>,
    retired: Vec<PageId>,
    op_log: Vec<VmemOp>,
    now: f64,
    next_page: u64,
    next_range: u64,
}

impl PageStore {
    pub fn new(page_size: u64) -> Self {
        PageStore {
            page_size,
            pages: BTreeMap::new(),
            ranges: BTreeMap::new(),
            mapped_at: BTreeMap::new(),
            retired: Vec::new(),
            op_log: Vec::new(),
            now: 0.0,
            next_page: 0,
            next_range: 0,
        }
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn set_time(&mut self, t: f64) {
        self.now = t;
    }

    pub fn op_log(&self) -> &[VmemOp] {
        &self.op_log
    }

    pub fn count_ops(&self, kind: VmemOpKind) -> usize {
        self.op_log.iter().filter(|o| o.op == kind).count()
    }

    pub fn page(&self, id: PageId) -> Option<&PhysicalPage> {
        self.pages.get(&id)
    }

    pub fn range(&self, id: RangeId) -> Option<&VirtualRange> {
        self.ranges.get(&id)
    }

    pub fn range_ids(&self) -> Vec<RangeId> {
        self.ranges.keys().copied().collect()
    }

    pub fn retired(&self) -> &[PageId] {
        &self.retired
    }

    pub fn live_pages_on(&self, d: DeviceId) -> usize {
        self.pages.values().filter(|p| p.device == d).count()
    }

    pub fn live_bytes_on(&self, d: DeviceId) -> u64 {
        self.live_pages_on(d) as u64 * self.page_size
    }

    pub fn live_bytes(&self) -> u64 {
        self.pages.len() as u64 * self.page_size
    }

    pub fn is_mapped(&self, page: PageId) -> bool {
        self.mapped_at.contains_key(&page)
    }

    fn log(
        &mut self,
        op: VmemOpKind,
        device: DeviceId,
        page: Option<PageId>,
        range: Option<RangeId>,
        slot: Option<usize>,
    ) {
        self.op_log.push(VmemOp {
            seq: self.op_log.len() as u64,
            time: self.now,
            op,
            device,
            page,
            range,
            slot,
        });
    }

    /// Allocates `n` free pages on `device`, charging the ledger up front.
    pub fn alloc_pages(
        &mut self,
        ledger: &mut MemoryLedger,
        device: DeviceId,
        n: usize,
    ) -> Result<Vec<PageId>, VmemError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        ledger.set_time(self.now);
        ledger.charge(device, n as u64 * self.page_size)?;
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let id = PageId(self.next_page);
            self.next_page += 1;
            self.pages.insert(
                id,
                PhysicalPage {
                    page_id: id,
                    device,
                    size: self.page_size,
                    content: PageContent::Free,
                },
            );
            self.log(VmemOpKind::Alloc, device, Some(id), None, None);
            ids.push(id);
        }
        Ok(ids)
    }

    /// Records what a page holds once it has been filled.
    pub fn set_content(&mut self, page: PageId, content: PageContent) -> Result<(), VmemError> {
        self.pages
            .get_mut(&page)
            .ok_or(VmemError::UnknownPage(page))?
            .content = content;
        Ok(())
    }

    pub fn reserve_range(&mut self, device: DeviceId, n_slots: usize) -> RangeId {
        let id = RangeId(self.next_range);
        self.next_range += 1;
        self.ranges.insert(
            id,
            VirtualRange {
                range_id: id,
                device,
                slots: vec![None; n_slots],
                slot_size: self.page_size,
            },
        );
        self.log(VmemOpKind::Reserve, device, None, Some(id), Some(n_slots));
        id
    }

    /// Grows or shrinks a range. Slots cut off by a shrink must be unmapped.
    pub fn resize_range(&mut self, range: RangeId, n_slots: usize) -> Result<(), VmemError> {
        let r = self
            .ranges
            .get_mut(&range)
            .ok_or(VmemError::UnknownRange(range))?;
        if r.slots.iter().skip(n_slots).any(Option::is_some) {
            return Err(VmemError::RangeInUse(range));
        }
        r.slots.resize(n_slots, None);
        let device = r.device;
        self.log(VmemOpKind::Resize, device, None, Some(range), Some(n_slots));
        Ok(())
    }

    /// Drops a range whose slots are all unmapped.
    pub fn release_range(&mut self, range: RangeId) -> Result<(), VmemError> {
        let r = self
            .ranges
            .get(&range)
            .ok_or(VmemError::UnknownRange(range))?;
        if r.slots.iter().any(Option::is_some) {
            return Err(VmemError::RangeInUse(range));
        }
        self.ranges.remove(&range);
        Ok(())
    }

    fn slot_ref(&self, range: RangeId, slot: usize) -> Result<&VirtualRange, VmemError> {
        let r = self
            .ranges
            .get(&range)
            .ok_or(VmemError::UnknownRange(range))?;
        if slot >= r.slots.len() {
            return Err(VmemError::SlotOutOfBounds {
                range,
                slot,
                len: r.slots.len(),
            });
        }
        Ok(r)
    }

    pub fn map_slot(&mut self, range: RangeId, slot: usize, page: PageId) -> Result<(), VmemError> {
        let r = self.slot_ref(range, slot)?;
        let range_device = r.device;
        if r.slots[slot].is_some() {
            return Err(VmemError::SlotOccupied { range, slot });
        }
        let p = self.pages.get(&page).ok_or(VmemError::UnknownPage(page))?;
        if p.device != range_device {
            return Err(VmemError::CrossDevice {
                page,
                page_device: p.device,
                range_device,
            });
        }
        if self.mapped_at.contains_key(&page) {
            return Err(VmemError::AlreadyMapped(page));
        }
        if self.retired.contains(&page) {
            return Err(VmemError::Retired(page));
        }
        self.ranges.get_mut(&range).expect("checked").slots[slot] = Some(page);
        self.mapped_at.insert(page, (range, slot));
        self.log(
            VmemOpKind::Map,
            range_device,
            Some(page),
            Some(range),
            Some(slot),
        );
        Ok(())
    }

    /// Unmaps a slot and returns its page, which stays live.
    pub fn unmap_slot(&mut self, range: RangeId, slot: usize) -> Result<PageId, VmemError> {
        let r = self.slot_ref(range, slot)?;
        let device = r.device;
        let page = r.slots[slot].ok_or(VmemError::SlotUnmapped { range, slot })?;
        self.ranges.get_mut(&range).expect("checked").slots[slot] = None;
        self.mapped_at.remove(&page);
        self.log(
            VmemOpKind::Unmap,
            device,
            Some(page),
            Some(range),
            Some(slot),
        );
        Ok(page)
    }

    pub fn unmap_and_free(
        &mut self,
        ledger: &mut MemoryLedger,
        range: RangeId,
        slot: usize,
    ) -> Result<PageId, VmemError> {
        let page = self.unmap_slot(range, slot)?;
        self.free_page(ledger, page)?;
        Ok(page)
    }

    /// Unmaps a slot and parks its page in the retire set. The page stays
    /// charged until [`PageStore::flush_retired`].
    pub fn unmap_deferred(&mut self, range: RangeId, slot: usize) -> Result<PageId, VmemError> {
        let page = self.unmap_slot(range, slot)?;
        self.retire(page)?;
        Ok(page)
    }

    /// Parks an unmapped page in the retire set.
    pub fn retire(&mut self, page: PageId) -> Result<(), VmemError> {
        let device = self
            .pages
            .get(&page)
            .ok_or(VmemError::UnknownPage(page))?
            .device;
        if self.mapped_at.contains_key(&page) {
            return Err(VmemError::StillMapped(page));
        }
        if self.retired.contains(&page) {
            return Err(VmemError::Retired(page));
        }
        self.retired.push(page);
        self.log(VmemOpKind::Retire, device, Some(page), None, None);
        Ok(())
    }

    /// Frees every retired page. Returns the number freed.
    pub fn flush_retired(&mut self, ledger: &mut MemoryLedger) -> Result<usize, VmemError> {
        let pages = std::mem::take(&mut self.retired);
        let n = pages.len();
        for p in pages {
            self.free_page(ledger, p)?;
        }
        Ok(n)
    }

    pub fn free_page(&mut self, ledger: &mut MemoryLedger, page: PageId) -> Result<(), VmemError> {
        if self.mapped_at.contains_key(&page) {
            return Err(VmemError::StillMapped(page));
        }
        let p = self
            .pages
            .remove(&page)
            .ok_or(VmemError::UnknownPage(page))?;
        self.retired.retain(|r| *r != page);
        ledger.set_time(self.now);
        ledger.release(p.device, p.size);
        self.log(VmemOpKind::Free, p.device, Some(page), None, None);
        Ok(())
    }

    /// Expert ids per slot in index order, `None` for gaps.
    ///
    /// A slot shows an expert once any of its pages carries that expert; with
    /// several pages per expert, callers read `pages_per_expert` consecutive
    /// slots as one expert.
    pub fn contiguous_view(&self, range: RangeId) -> Result<Vec<Option<u32>>, VmemError> {
        let r = self
            .ranges
            .get(&range)
            .ok_or(VmemError::UnknownRange(range))?;
        Ok(r.slots
            .iter()
            .map(|s| {
                s.and_then(|p| match self.pages[&p].content {
                    PageContent::Expert(e) => Some(e),
                    PageContent::Free => None,
                })
            })
            .collect())
    }

    /// Checks the structural invariants: every mapped slot references a live
    /// page on the range's device, each page is mapped at most once, and the
    /// reverse index agrees with the ranges.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = BTreeMap::new();
        for r in self.ranges.values() {
            for (i, s) in r.slots.iter().enumerate() {
                let Some(p) = s else { continue };
                let page = self.pages.get(p).ok_or_else(|| {
                    format!("range {:?} slot {i} maps dead page {p:?}", r.range_id)
                })?;
                if page.device != r.device {
                    return Err(format!("page {p:?} mapped across devices"));
                }
                if seen.insert(*p, (r.range_id, i)).is_some() {
                    return Err(format!("page {p:?} mapped twice"));
                }
            }
        }
        if seen != self.mapped_at {
            return Err("reverse map out of sync".to_string());
        }
        for p in &self.retired {
            if !self.pages.contains_key(p) || self.mapped_at.contains_key(p) {
                return Err(format!("retired page {p:?} is dead or mapped"));
            }
        }
        Ok(())
    }

    pub fn op_log_jsonl(&self) -> String {
        let mut out = String::new();
        for op in &self.op_log {
            out.push_str(&serde_json::to_string(op).expect("op serializes"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::GB;
    use proptest::prelude::*;

    const D0: DeviceId = DeviceId(0);
    const D1: DeviceId = DeviceId(1);

    fn setup() -> (PageStore, MemoryLedger) {
        (PageStore::new(GB), MemoryLedger::new(&[D0, D1], 64 * GB))
    }

    #[test]
    fn alloc_charges_ledger() {
        let (mut s, mut l) = setup();
        let ids = s.alloc_pages(&mut l, D0, 4).unwrap();
        assert_eq!(ids.len(), 4);
        assert_eq!(l.used(D0), 4 * GB);
        assert!(s.alloc_pages(&mut l, D0, 0).unwrap().is_empty());
        assert_eq!(l.used(D0), 4 * GB);
        assert!(matches!(
            s.alloc_pages(&mut l, D0, 61),
            Err(VmemError::Fabric(FabricError::OutOfMemory { .. }))
        ));
    }

    #[test]
    fn reserve_is_free() {
        let (mut s, l) = setup();
        let a = s.reserve_range(D0, 16);
        let b = s.reserve_range(D0, 0);
        assert_ne!(a, b);
        assert_eq!(s.contiguous_view(a).unwrap(), vec![None; 16]);
        assert!(s.contiguous_view(b).unwrap().is_empty());
        assert_eq!(l.used(D0), 0);
    }

    #[test]
    fn map_guards() {
        let (mut s, mut l) = setup();
        let p = s.alloc_pages(&mut l, D0, 1).unwrap()[0];
        let q = s.alloc_pages(&mut l, D1, 1).unwrap()[0];
        let a = s.reserve_range(D0, 2);
        let b = s.reserve_range(D0, 2);
        s.map_slot(a, 0, p).unwrap();
        assert_eq!(s.count_ops(VmemOpKind::Map), 1);
        assert_eq!(s.map_slot(b, 0, p), Err(VmemError::AlreadyMapped(p)));
        assert!(matches!(
            s.map_slot(a, 1, q),
            Err(VmemError::CrossDevice { .. })
        ));
        assert!(matches!(
            s.free_page(&mut l, p),
            Err(VmemError::StillMapped(_))
        ));
    }

    #[test]
    fn view_and_remap() {
        let (mut s, mut l) = setup();
        let pages = s.alloc_pages(&mut l, D0, 3).unwrap();
        for (p, e) in pages.iter().zip([3, 7, 9]) {
            s.set_content(*p, PageContent::Expert(e)).unwrap();
        }
        let r = s.reserve_range(D0, 2);
        s.map_slot(r, 0, pages[0]).unwrap();
        s.map_slot(r, 1, pages[1]).unwrap();
        assert_eq!(s.contiguous_view(r).unwrap(), vec![Some(3), Some(7)]);
        s.unmap_deferred(r, 1).unwrap();
        s.map_slot(r, 1, pages[2]).unwrap();
        assert_eq!(s.contiguous_view(r).unwrap(), vec![Some(3), Some(9)]);
    }

    #[test]
    fn unmap_and_free_round_trip() {
        let (mut s, mut l) = setup();
        let p = s.alloc_pages(&mut l, D0, 1).unwrap()[0];
        let r = s.reserve_range(D0, 1);
        s.map_slot(r, 0, p).unwrap();
        s.unmap_and_free(&mut l, r, 0).unwrap();
        assert_eq!(l.used(D0), 0);
        assert!(matches!(
            s.unmap_and_free(&mut l, r, 0),
            Err(VmemError::SlotUnmapped { .. })
        ));
    }

    #[test]
    fn deferred_free_holds_until_flush() {
        let (mut s, mut l) = setup();
        let p = s.alloc_pages(&mut l, D0, 2).unwrap();
        let r = s.reserve_range(D0, 2);
        s.map_slot(r, 0, p[0]).unwrap();
        s.map_slot(r, 1, p[1]).unwrap();
        s.unmap_deferred(r, 1).unwrap();
        assert_eq!(l.used(D0), 2 * GB);
        assert_eq!(s.retired(), &[p[1]]);
        assert_eq!(s.flush_retired(&mut l).unwrap(), 1);
        assert_eq!(l.used(D0), GB);
        assert_eq!(l.usage(D0).unwrap().peak, 2 * GB);
    }

    #[test]
    fn resize_rejects_cutting_mapped_slots() {
        let (mut s, mut l) = setup();
        let p = s.alloc_pages(&mut l, D0, 1).unwrap()[0];
        let r = s.reserve_range(D0, 3);
        s.map_slot(r, 2, p).unwrap();
        assert_eq!(s.resize_range(r, 2), Err(VmemError::RangeInUse(r)));
        s.resize_range(r, 5).unwrap();
        assert_eq!(s.range(r).unwrap().slots.len(), 5);
    }

    /// Moving k experts from one range to another costs k * pages_per_expert
    /// map operations whatever the store size.
    #[test]
    fn remap_cost_independent_of_store_size() {
        let k = 5;
        let pages_per_expert = 2;
        let mut counts = Vec::new();
        for size in [8usize, 64, 256] {
            let mut s = PageStore::new(GB / 64);
            let mut l = MemoryLedger::new(&[D0], 64 * GB);
            let src = s.reserve_range(D0, size * pages_per_expert);
            let pages = s.alloc_pages(&mut l, D0, size * pages_per_expert).unwrap();
            for (i, p) in pages.iter().enumerate() {
                s.map_slot(src, i, *p).unwrap();
            }
            let dst = s.reserve_range(D0, k * pages_per_expert);
            let before = s.count_ops(VmemOpKind::Map);
            for i in 0..k * pages_per_expert {
                let p = s.unmap_slot(src, i).unwrap();
                s.map_slot(dst, i, p).unwrap();
            }
            counts.push(s.count_ops(VmemOpKind::Map) - before);
        }
        assert_eq!(counts, vec![k * pages_per_expert; 3]);
    }

    #[derive(Debug, Clone)]
    enum Op {
        Alloc(u8, u8),
        Reserve(u8, u8),
        Map(u8, u8, u8),
        Unmap(u8, u8),
        Defer(u8, u8),
        Flush,
        FreeUnmapped(u8),
    }

    fn op() -> impl Strategy<Value = Op> {
        prop_oneof![
            (0u8..2, 0u8..4).prop_map(|(d, n)| Op::Alloc(d, n)),
            (0u8..2, 0u8..6).prop_map(|(d, n)| Op::Reserve(d, n)),
            (any::<u8>(), any::<u8>(), any::<u8>()).prop_map(|(r, s, p)| Op::Map(r, s, p)),
            (any::<u8>(), any::<u8>()).prop_map(|(r, s)| Op::Unmap(r, s)),
            (any::<u8>(), any::<u8>()).prop_map(|(r, s)| Op::Defer(r, s)),
            Just(Op::Flush),
            any::<u8>().prop_map(Op::FreeUnmapped),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn fuzz_conservation(ops in prop::collection::vec(op(), 1000)) {
            let (mut s, mut l) = setup();
            let devs = [D0, D1];
            let mut ranges: Vec<RangeId> = Vec::new();
            let mut pages: Vec<PageId> = Vec::new();
            for op in ops {
                match op {
                    Op::Alloc(d, n) => {
                        if let Ok(ids) = s.alloc_pages(&mut l, devs[d as usize], n as usize) {
                            pages.extend(ids);
                        }
                    }
                    Op::Reserve(d, n) => ranges.push(s.reserve_range(devs[d as usize], n as usize)),
                    Op::Map(r, slot, p) if !ranges.is_empty() && !pages.is_empty() => {
                        let r = ranges[r as usize % ranges.len()];
                        let p = pages[p as usize % pages.len()];
                        let _ = s.map_slot(r, slot as usize % 6, p);
                    }
                    Op::Unmap(r, slot) if !ranges.is_empty() => {
                        let r = ranges[r as usize % ranges.len()];
                        let _ = s.unmap_and_free(&mut l, r, slot as usize % 6);
                    }
                    Op::Defer(r, slot) if !ranges.is_empty() => {
                        let r = ranges[r as usize % ranges.len()];
                        let _ = s.unmap_deferred(r, slot as usize % 6);
                    }
                    Op::Flush => {
                        s.flush_retired(&mut l).unwrap();
                    }
                    Op::FreeUnmapped(p) if !pages.is_empty() => {
                        let p = pages[p as usize % pages.len()];
                        if !s.is_mapped(p) {
                            let _ = s.free_page(&mut l, p);
                        }
                    }
                    _ => {}
                }
                pages.retain(|p| s.page(*p).is_some());
                prop_assert!(s.check_invariants().is_ok(), "{:?}", s.check_invariants());
                for d in devs {
                    prop_assert_eq!(l.used(d), s.live_bytes_on(d));
                }
            }
        }
    }
}
