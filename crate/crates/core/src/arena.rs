//! Flat byte-addressable memory with page-granular dirty tracking.
//!
//! The arena stands in for the address space of a forked child: a
//! [`Snapshot`] is the parent image, [`Arena::restore`] is the next fork, and
//! the set of pages written since the last snapshot or restore is the
//! copy-on-write fault count for that execution.
//!
//! Region layout is fixed. With `P` pages, the top `ceil(P / 9)` pages are
//! shadow memory (enough for one shadow byte per 8 application bytes). The
//! remaining application pages are split into globals (1/8), stack (1/8) and
//! heap (the rest), in that order from address 0.

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_ARENA_SIZE: usize = 16 << 20;
pub const DEFAULT_PAGE_SIZE: usize = 4096;

static NEXT_SNAPSHOT_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArenaError {
    #[error("invalid arena geometry: size {size}, page size {page_size}")]
    Geometry { size: usize, page_size: usize },
    #[error("access fault at {addr:#x}+{len}")]
    Fault { addr: usize, len: usize },
    #[error("snapshot geometry does not match arena")]
    SnapshotMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadKind {
    Data,
    Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Global,
    Stack,
    Heap,
    Shadow,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMap {
    pub global: Range<usize>,
    pub stack: Range<usize>,
    pub heap: Range<usize>,
    pub shadow: Range<usize>,
}

impl RegionMap {
    fn layout(size: usize, page_size: usize) -> Self {
        let pages = size / page_size;
        let shadow_pages = pages.div_ceil(9);
        let app_pages = pages - shadow_pages;
        let global_pages = app_pages / 8;
        let stack_pages = app_pages / 8;
        let global_end = global_pages * page_size;
        let stack_end = global_end + stack_pages * page_size;
        let app_end = app_pages * page_size;
        Self {
            global: 0..global_end,
            stack: global_end..stack_end,
            heap: stack_end..app_end,
            shadow: app_end..size,
        }
    }

    /// End of application memory (globals, stack and heap).
    pub fn application_end(&self) -> usize {
        self.shadow.start
    }

    pub fn region_of(&self, addr: usize) -> Option<RegionKind> {
        [
            (RegionKind::Global, &self.global),
            (RegionKind::Stack, &self.stack),
            (RegionKind::Heap, &self.heap),
            (RegionKind::Shadow, &self.shadow),
        ]
        .into_iter()
        .find(|(_, r)| r.contains(&addr))
        .map(|(k, _)| k)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub token_loads: u64,
    pub data_reads: u64,
    pub data_writes: u64,
}

/// Per-execution deltas since the last snapshot, restore or checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExecutionMetrics {
    pub dirty_pages: u64,
    pub token_loads: u64,
    pub data_reads: u64,
    pub data_writes: u64,
    /// Dirty pages inside globals, stack or heap.
    pub application_pages: u64,
    /// Dirty pages inside the shadow region.
    pub metadata_pages: u64,
}

/// Full byte image of an arena plus its region map.
#[derive(Debug, Clone)]
pub struct Snapshot {
    id: u64,
    image: Vec<u8>,
    page_size: usize,
    regions: RegionMap,
}

impl Snapshot {
    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }
}

impl PartialEq for Snapshot {
    fn eq(&self, other: &Self) -> bool {
        self.page_size == other.page_size
            && self.regions == other.regions
            && self.image == other.image
    }
}

#[derive(Debug, Clone)]
pub struct Arena {
    bytes: Vec<u8>,
    page_size: usize,
    dirty_flags: Vec<bool>,
    dirty_list: Vec<usize>,
    counters: Counters,
    baseline: Counters,
    regions: RegionMap,
    // Snapshot whose image matches the arena modulo the current dirty pages.
    synced_with: Option<u64>,
}

impl Arena {
    pub fn new(size: usize, page_size: usize) -> Result<Self, ArenaError> {
        if page_size < 64 || !page_size.is_power_of_two() || size == 0 || size % page_size != 0 {
            return Err(ArenaError::Geometry { size, page_size });
        }
        let pages = size / page_size;
        Ok(Self {
            bytes: vec![0; size],
            page_size,
            dirty_flags: vec![false; pages],
            dirty_list: Vec::new(),
            counters: Counters::default(),
            baseline: Counters::default(),
            regions: RegionMap::layout(size, page_size),
            synced_with: None,
        })
    }

    pub fn with_defaults() -> Self {
        Self::new(DEFAULT_ARENA_SIZE, DEFAULT_PAGE_SIZE).expect("default geometry is valid")
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn page_size(&self) -> usize {
        self.page_size
    }

    pub fn page_count(&self) -> usize {
        self.dirty_flags.len()
    }

    pub fn regions(&self) -> &RegionMap {
        &self.regions
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    fn range(&self, addr: usize, len: usize) -> Result<Range<usize>, ArenaError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.bytes.len() => Ok(addr..end),
            _ => Err(ArenaError::Fault { addr, len }),
        }
    }

    pub fn contains(&self, addr: usize, len: usize) -> bool {
        self.range(addr, len).is_ok()
    }

    pub fn read_bytes(&mut self, addr: usize, len: usize, kind: LoadKind) -> Result<&[u8], ArenaError> {
        let r = self.range(addr, len)?;
        match kind {
            LoadKind::Data => self.counters.data_reads += 1,
            LoadKind::Token => self.counters.token_loads += 1,
        }
        Ok(&self.bytes[r])
    }

    /// Reads the aligned-or-not 64-bit little-endian word at `addr`.
    pub fn read_word(&mut self, addr: usize, kind: LoadKind) -> Result<u64, ArenaError> {
        let bytes = self.read_bytes(addr, 8, kind)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    /// Uncounted read, for harness code that must not perturb the metrics.
    pub fn peek(&self, addr: usize, len: usize) -> Result<&[u8], ArenaError> {
        let r = self.range(addr, len)?;
        Ok(&self.bytes[r])
    }

    pub fn peek_word(&self, addr: usize) -> Result<u64, ArenaError> {
        let bytes = self.peek(addr, 8)?;
        Ok(u64::from_le_bytes(bytes.try_into().expect("8 bytes")))
    }

    pub fn write_bytes(&mut self, addr: usize, data: &[u8]) -> Result<(), ArenaError> {
        let r = self.range(addr, data.len())?;
        if data.is_empty() {
            return Ok(());
        }
        self.counters.data_writes += 1;
        let first = r.start / self.page_size;
        let last = (r.end - 1) / self.page_size;
        for page in first..=last {
            if !self.dirty_flags[page] {
                self.dirty_flags[page] = true;
                self.dirty_list.push(page);
            }
        }
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }

    pub fn write_word(&mut self, addr: usize, word: u64) -> Result<(), ArenaError> {
        self.write_bytes(addr, &word.to_le_bytes())
    }

    pub fn zero(&mut self, addr: usize, len: usize) -> Result<(), ArenaError> {
        // One counted write regardless of length.
        let zeros = vec![0u8; len];
        self.write_bytes(addr, &zeros)
    }

    /// Sorted indices of pages written since the last sync point.
    pub fn dirty_pages(&self) -> Vec<usize> {
        let mut pages = self.dirty_list.clone();
        pages.sort_unstable();
        pages
    }

    pub fn is_application_page(&self, page: usize) -> bool {
        page * self.page_size < self.regions.application_end()
    }

    /// Ends the current measurement window without capturing an image.
    pub fn checkpoint(&mut self) {
        self.clear_dirty();
        self.baseline = self.counters;
        self.synced_with = None;
    }

    fn clear_dirty(&mut self) {
        for &page in &self.dirty_list {
            self.dirty_flags[page] = false;
        }
        self.dirty_list.clear();
    }

    pub fn snapshot(&mut self) -> Snapshot {
        let id = NEXT_SNAPSHOT_ID.fetch_add(1, Ordering::Relaxed);
        self.clear_dirty();
        self.baseline = self.counters;
        self.synced_with = Some(id);
        Snapshot {
            id,
            image: self.bytes.clone(),
            page_size: self.page_size,
            regions: self.regions.clone(),
        }
    }

    /// Makes the arena byte-identical to `snapshot`. Counters stay
    /// cumulative; the measurement window restarts.
    pub fn restore(&mut self, snapshot: &Snapshot) -> Result<(), ArenaError> {
        if snapshot.page_size != self.page_size || snapshot.image.len() != self.bytes.len() {
            return Err(ArenaError::SnapshotMismatch);
        }
        if self.synced_with == Some(snapshot.id) {
            for &page in &self.dirty_list {
                let r = page * self.page_size..(page + 1) * self.page_size;
                self.bytes[r.clone()].copy_from_slice(&snapshot.image[r]);
            }
        } else {
            self.bytes.copy_from_slice(&snapshot.image);
        }
        self.regions = snapshot.regions.clone();
        self.clear_dirty();
        self.baseline = self.counters;
        self.synced_with = Some(snapshot.id);
        Ok(())
    }

    pub fn execution_metrics(&self) -> ExecutionMetrics {
        let application = self
            .dirty_list
            .iter()
            .filter(|&&p| self.is_application_page(p))
            .count() as u64;
        let dirty = self.dirty_list.len() as u64;
        ExecutionMetrics {
            dirty_pages: dirty,
            token_loads: self.counters.token_loads - self.baseline.token_loads,
            data_reads: self.counters.data_reads - self.baseline.data_reads,
            data_writes: self.counters.data_writes - self.baseline.data_writes,
            application_pages: application,
            metadata_pages: dirty - application,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn geometry() {
        let a = Arena::new(16 << 20, 4096).unwrap();
        assert_eq!(a.page_count(), 4096);
        let one = Arena::new(4096, 4096).unwrap();
        assert_eq!(one.page_count(), 1);
        assert!(matches!(Arena::new(4097, 4096), Err(ArenaError::Geometry { .. })));
        assert!(Arena::new(4096, 32).is_err());
        assert!(Arena::new(4096 * 3, 3000).is_err());
    }

    #[test]
    fn default_layout_is_disjoint_and_page_aligned() {
        let a = Arena::with_defaults();
        let r = a.regions();
        assert_eq!(r.global.start, 0);
        assert_eq!(r.global.end, r.stack.start);
        assert_eq!(r.stack.end, r.heap.start);
        assert_eq!(r.heap.end, r.shadow.start);
        assert_eq!(r.shadow.end, a.len());
        for x in [r.stack.start, r.heap.start, r.shadow.start] {
            assert_eq!(x % a.page_size(), 0);
        }
        // One shadow byte per 8 application bytes fits.
        assert!(r.shadow.len() * 8 >= r.application_end());
        assert!(!r.heap.is_empty() && !r.stack.is_empty() && !r.global.is_empty());
    }

    #[test]
    fn reads() {
        let mut a = Arena::new(8192, 4096).unwrap();
        assert_eq!(a.read_bytes(0, 8, LoadKind::Data).unwrap(), &[0u8; 8]);
        assert!(matches!(a.read_bytes(8190, 8, LoadKind::Data), Err(ArenaError::Fault { .. })));
        a.read_word(0, LoadKind::Token).unwrap();
        a.read_word(8, LoadKind::Token).unwrap();
        assert_eq!(a.counters().token_loads, 2);
        assert_eq!(a.execution_metrics().dirty_pages, 0);
    }

    #[test]
    fn writes_dirty_pages() {
        let mut a = Arena::new(4 * 4096, 4096).unwrap();
        a.write_bytes(0, &[1]).unwrap();
        assert_eq!(a.dirty_pages(), vec![0]);
        a.write_bytes(4092, &[7; 8]).unwrap();
        assert_eq!(a.dirty_pages(), vec![0, 1]);
        assert_eq!(a.peek(4092, 8).unwrap(), &[7; 8]);
        assert!(a.write_bytes(4 * 4096 - 1, &[0, 0]).is_err());
        let m = a.execution_metrics();
        assert_eq!(m.dirty_pages, 2);
        assert_eq!(m.data_writes, 2);
    }

    #[test]
    fn snapshot_restore() {
        let mut a = Arena::new(4 * 4096, 4096).unwrap();
        let s0 = a.snapshot();
        a.restore(&s0).unwrap();
        assert_eq!(a.peek(0, a.len()).unwrap(), s0.image());

        a.write_bytes(100, &[9; 4]).unwrap();
        let s1 = a.snapshot();
        let s1b = a.snapshot();
        assert_eq!(s1, s1b);
        a.write_bytes(100, &[1; 4]).unwrap();
        a.write_bytes(5000, &[2; 4]).unwrap();
        a.restore(&s1).unwrap();
        assert_eq!(a.peek(100, 4).unwrap(), &[9; 4]);
        assert_eq!(a.peek(5000, 4).unwrap(), &[0; 4]);
        assert_eq!(a.execution_metrics().dirty_pages, 0);

        // Restoring an older snapshot copies the full image.
        a.restore(&s0).unwrap();
        assert_eq!(a.peek(100, 4).unwrap(), &[0; 4]);

        let mut other = Arena::new(4 * 4096, 1024).unwrap();
        assert_eq!(other.restore(&s0), Err(ArenaError::SnapshotMismatch));
    }

    #[test]
    fn counters_are_cumulative_with_deltas() {
        let mut a = Arena::new(4096 * 2, 4096).unwrap();
        let s = a.snapshot();
        a.read_word(0, LoadKind::Token).unwrap();
        a.restore(&s).unwrap();
        a.read_word(0, LoadKind::Token).unwrap();
        assert_eq!(a.counters().token_loads, 2);
        assert_eq!(a.execution_metrics().token_loads, 1);
    }

    #[test]
    fn dirty_count_matches_distinct_pages() {
        let mut a = Arena::new(64 * 4096, 4096).unwrap();
        a.snapshot();
        let addrs = [0usize, 10, 4096 * 3 + 5, 4096 * 3 + 100, 4096 * 40, 4096 * 63 + 4000];
        let mut oracle = BTreeSet::new();
        for &x in &addrs {
            a.write_bytes(x, &[1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
            oracle.insert(x / 4096);
            oracle.insert((x + 7) / 4096);
        }
        assert_eq!(a.execution_metrics().dirty_pages as usize, oracle.len());
        assert_eq!(a.dirty_pages(), oracle.into_iter().collect::<Vec<_>>());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn restore_is_identity(
                pre in proptest::collection::vec((0usize..16 * 1024, proptest::collection::vec(any::<u8>(), 1..64)), 0..8),
                post in proptest::collection::vec((0usize..16 * 1024, proptest::collection::vec(any::<u8>(), 1..64)), 0..32),
            ) {
                let mut a = Arena::new(16 * 1024 + 4096, 1024).unwrap();
                for (addr, data) in &pre {
                    a.write_bytes(*addr, data).unwrap();
                }
                let snap = a.snapshot();
                for (addr, data) in &post {
                    a.write_bytes(*addr, data).unwrap();
                }
                a.restore(&snap).unwrap();
                prop_assert_eq!(a.peek(0, a.len()).unwrap(), snap.image());
                prop_assert_eq!(a.execution_metrics().dirty_pages, 0);
            }
        }
    }
}
