//! Cacheable / non-cacheable regions, a single-level host cache and the
//! memory-controller boundary.
//!
//! Only requests that reach the memory controller are appended to the
//! command trace. Non-cacheable accesses always do; cacheable accesses do so
//! only on line fills and dirty write-backs.

use std::collections::HashMap;
use std::io::{self, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AgentId(pub u32);

impl AgentId {
    pub const HOST: AgentId = AgentId(0);
    /// Requests injected by the hardware prefetcher model.
    pub const PREFETCHER: AgentId = AgentId(u32::MAX);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attribute {
    Cacheable,
    NonCacheable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionKind {
    General,
    /// Physically contiguous pool with a global size cap (CMA analogue).
    ContiguousPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Service {
    Cache,
    Dram,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("zero-size region requested")]
    ZeroSize,
    #[error("contiguous pool exhausted: requested {requested} bytes, {available} of {cap} available")]
    PoolExhausted { requested: u64, available: u64, cap: u64 },
    #[error("address space exhausted: requested {requested} bytes at {base:#x}, limit {limit:#x}")]
    AddressSpaceExhausted { requested: u64, base: u64, limit: u64 },
    #[error("unmapped access at {addr:#x} (+{bytes})")]
    Unmapped { addr: u64, bytes: u64 },
    #[error("invalid cache geometry: {0}")]
    CacheGeometry(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemoryRegion {
    pub id: usize,
    pub base: u64,
    pub size: u64,
    pub attribute: Attribute,
    pub kind: RegionKind,
}

impl MemoryRegion {
    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn range(&self) -> Range<u64> {
        self.base..self.end()
    }

    pub fn contains(&self, addr: u64, bytes: u64) -> bool {
        addr >= self.base && addr.saturating_add(bytes) <= self.end()
    }
}

/// One request that reached the memory controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u64,
    pub agent: AgentId,
    pub op: Op,
    pub addr: u64,
    pub bytes: u64,
}

pub type CommandTrace = Vec<TraceRecord>;

/// Writes records as line-delimited JSON `{tick, agent, op, addr, bytes}`.
pub fn write_trace_ndjson<W: Write>(records: &[TraceRecord], mut out: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub capacity: u64,
    pub line_bytes: u64,
    pub ways: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { capacity: 8 << 20, line_bytes: 64, ways: 16 }
    }
}

impl CacheConfig {
    pub fn sets(&self) -> u64 {
        self.capacity / (self.ways * self.line_bytes)
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.line_bytes == 0 || !self.line_bytes.is_power_of_two() {
            return Err(MemoryError::CacheGeometry(format!("line_bytes {} must be a power of two", self.line_bytes)));
        }
        if self.ways == 0 || self.sets() == 0 || self.sets() * self.ways * self.line_bytes != self.capacity {
            return Err(MemoryError::CacheGeometry(format!(
                "capacity {} is not sets * {} ways * {} B",
                self.capacity, self.ways, self.line_bytes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub writebacks: u64,
}

#[derive(Debug, Clone, Copy)]
struct Line {
    tag: u64,
    dirty: bool,
    last_use: u64,
}

/// Set-associative, LRU, write-back / write-allocate cache. Tags only; data
/// always lives in the backing store.
#[derive(Debug, Clone)]
struct Cache {
    config: CacheConfig,
    sets: Vec<Vec<Line>>,
    clock: u64,
    stats: CacheStats,
}

enum Lookup {
    Hit,
    Miss { writeback: Option<u64> },
}

impl Cache {
    fn new(config: CacheConfig) -> Self {
        Self { config, sets: vec![Vec::new(); config.sets() as usize], clock: 0, stats: CacheStats::default() }
    }

    fn access(&mut self, line_addr: u64, write: bool) -> Lookup {
        self.clock += 1;
        let line_no = line_addr / self.config.line_bytes;
        let nsets = self.sets.len() as u64;
        let (set_idx, tag) = ((line_no % nsets) as usize, line_no / nsets);
        let ways = self.config.ways as usize;
        let set = &mut self.sets[set_idx];
        if let Some(line) = set.iter_mut().find(|l| l.tag == tag) {
            line.last_use = self.clock;
            line.dirty |= write;
            self.stats.hits += 1;
            return Lookup::Hit;
        }
        self.stats.misses += 1;
        let mut writeback = None;
        if set.len() == ways {
            let victim = set.iter().enumerate().min_by_key(|(_, l)| l.last_use).map(|(i, _)| i).unwrap();
            let old = set.swap_remove(victim);
            self.stats.evictions += 1;
            if old.dirty {
                self.stats.writebacks += 1;
                writeback = Some((old.tag * nsets + set_idx as u64) * self.config.line_bytes);
            }
        }
        set.push(Line { tag, dirty: write, last_use: self.clock });
        Lookup::Miss { writeback }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefetchMode {
    #[default]
    Disabled,
    /// Next-line prefetcher that ignores memory attributes.
    RogueNextLine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryConfig {
    /// Physical address space size.
    pub address_space: u64,
    /// Cap on the summed size of contiguous-pool regions.
    pub pool_cap: u64,
    #[serde(default)]
    pub cache: CacheConfig,
    #[serde(default)]
    pub prefetch: PrefetchMode,
}

impl MemoryConfig {
    pub fn new(address_space: u64) -> Self {
        Self { address_space, pool_cap: 1 << 30, cache: CacheConfig::default(), prefetch: PrefetchMode::Disabled }
    }
}

const PAGE: u64 = 4096;
const DEFAULT_ALIGN: u64 = 4096;

/// Sparse byte store; untouched bytes read as zero.
#[derive(Debug, Clone, Default)]
struct Store {
    pages: HashMap<u64, Box<[u8]>>,
}

impl Store {
    fn read(&self, addr: u64, buf: &mut [u8]) {
        let mut done = 0usize;
        while done < buf.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(buf.len() - done);
            match self.pages.get(&page) {
                Some(p) => buf[done..done + n].copy_from_slice(&p[off..off + n]),
                None => buf[done..done + n].fill(0),
            }
            done += n;
        }
    }

    fn write(&mut self, addr: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(data.len() - done);
            let p = self.pages.entry(page).or_insert_with(|| vec![0u8; PAGE as usize].into_boxed_slice());
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }
}

/// A single memory system instance; accesses are serialised into one total
/// order and tagged with the submitting agent.
#[derive(Debug, Clone)]
pub struct MemorySystem {
    config: MemoryConfig,
    regions: Vec<MemoryRegion>,
    next_base: u64,
    pool_used: u64,
    cache: Cache,
    store: Store,
    trace: CommandTrace,
    drained: usize,
    tick: u64,
    prefetches: u64,
}

impl MemorySystem {
    pub fn new(config: MemoryConfig) -> Result<Self, MemoryError> {
        config.cache.validate()?;
        Ok(Self {
            config,
            regions: Vec::new(),
            next_base: 0,
            pool_used: 0,
            cache: Cache::new(config.cache),
            store: Store::default(),
            trace: Vec::new(),
            drained: 0,
            tick: 0,
            prefetches: 0,
        })
    }

    pub fn config(&self) -> &MemoryConfig {
        &self.config
    }

    pub fn set_prefetch(&mut self, mode: PrefetchMode) {
        self.config.prefetch = mode;
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    pub fn allocate_region(&mut self, kind: RegionKind, attribute: Attribute, size: u64) -> Result<MemoryRegion, MemoryError> {
        self.allocate_region_aligned(kind, attribute, size, DEFAULT_ALIGN)
    }

    /// Registers a new region at the next `align`-aligned free address.
    pub fn allocate_region_aligned(
        &mut self,
        kind: RegionKind,
        attribute: Attribute,
        size: u64,
        align: u64,
    ) -> Result<MemoryRegion, MemoryError> {
        if size == 0 {
            return Err(MemoryError::ZeroSize);
        }
        if kind == RegionKind::ContiguousPool {
            let available = self.config.pool_cap.saturating_sub(self.pool_used);
            if size > available {
                return Err(MemoryError::PoolExhausted { requested: size, available, cap: self.config.pool_cap });
            }
        }
        let align = align.max(1);
        let base = self.next_base.div_ceil(align) * align;
        let end = base.checked_add(size).filter(|&e| e <= self.config.address_space);
        let Some(end) = end else {
            return Err(MemoryError::AddressSpaceExhausted { requested: size, base, limit: self.config.address_space });
        };
        if kind == RegionKind::ContiguousPool {
            self.pool_used += size;
        }
        self.next_base = end;
        let region = MemoryRegion { id: self.regions.len(), base, size, attribute, kind };
        self.regions.push(region);
        Ok(region)
    }

    pub fn region_of(&self, addr: u64, bytes: u64) -> Result<&MemoryRegion, MemoryError> {
        self.regions
            .iter()
            .find(|r| r.contains(addr, bytes.max(1)))
            .ok_or(MemoryError::Unmapped { addr, bytes })
    }

    fn push(&mut self, agent: AgentId, op: Op, addr: u64, bytes: u64) {
        self.trace.push(TraceRecord { tick: self.tick, agent, op, addr, bytes });
    }

    /// Routes one request through the cache / controller boundary and
    /// reports who served it.
    pub fn access(&mut self, addr: u64, op: Op, bytes: u64, agent: AgentId) -> Result<Service, MemoryError> {
        let attribute = self.region_of(addr, bytes)?.attribute;
        self.tick += 1;
        let service = match attribute {
            Attribute::NonCacheable => {
                self.push(agent, op, addr, bytes);
                Service::Dram
            }
            Attribute::Cacheable => self.cached_access(addr, op, bytes, agent),
        };
        if op == Op::Read && agent != AgentId::PREFETCHER && self.config.prefetch == PrefetchMode::RogueNextLine {
            self.prefetch_next_line(addr);
        }
        Ok(service)
    }

    fn cached_access(&mut self, addr: u64, op: Op, bytes: u64, agent: AgentId) -> Service {
        let line = self.config.cache.line_bytes;
        let first = addr / line * line;
        let last = (addr + bytes.max(1) - 1) / line * line;
        let mut service = Service::Cache;
        let mut line_addr = first;
        while line_addr <= last {
            if let Lookup::Miss { writeback } = self.cache.access(line_addr, op == Op::Write) {
                service = Service::Dram;
                if let Some(victim) = writeback {
                    self.push(agent, Op::Write, victim, line);
                }
                self.push(agent, Op::Read, line_addr, line);
            }
            line_addr += line;
        }
        service
    }

    fn prefetch_next_line(&mut self, addr: u64) {
        let line = self.config.cache.line_bytes;
        let target = addr / line * line + line;
        let Some(attribute) = self.regions.iter().find(|r| r.contains(target, line)).map(|r| r.attribute) else {
            return;
        };
        self.prefetches += 1;
        self.tick += 1;
        match attribute {
            Attribute::NonCacheable => self.push(AgentId::PREFETCHER, Op::Read, target, line),
            Attribute::Cacheable => {
                self.cached_access(target, Op::Read, line, AgentId::PREFETCHER);
            }
        }
    }

    pub fn read(&mut self, addr: u64, buf: &mut [u8], agent: AgentId) -> Result<Service, MemoryError> {
        let service = self.access(addr, Op::Read, buf.len() as u64, agent)?;
        self.store.read(addr, buf);
        Ok(service)
    }

    pub fn write(&mut self, addr: u64, data: &[u8], agent: AgentId) -> Result<Service, MemoryError> {
        let service = self.access(addr, Op::Write, data.len() as u64, agent)?;
        self.store.write(addr, data);
        Ok(service)
    }

    /// Initialises memory contents without generating traffic (image load).
    pub fn load(&mut self, addr: u64, data: &[u8]) -> Result<(), MemoryError> {
        self.region_of(addr, data.len() as u64)?;
        self.store.write(addr, data);
        Ok(())
    }

    /// Reads memory contents without generating traffic.
    pub fn peek(&self, addr: u64, buf: &mut [u8]) {
        self.store.read(addr, buf);
    }

    /// Full trace since construction.
    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    pub fn trace_len(&self) -> usize {
        self.trace.len()
    }

    pub fn trace_since(&self, start: usize) -> &[TraceRecord] {
        &self.trace[start.min(self.trace.len())..]
    }

    /// Records appended since the previous drain.
    pub fn drain_trace(&mut self) -> CommandTrace {
        let delta = self.trace[self.drained..].to_vec();
        self.drained = self.trace.len();
        delta
    }

    pub fn cache_stats(&self) -> CacheStats {
        self.cache.stats
    }

    pub fn prefetch_count(&self) -> u64 {
        self.prefetches
    }

    /// Zeroes counters; regions, contents and cache state are kept.
    pub fn reset_stats(&mut self) {
        self.cache.stats = CacheStats::default();
        self.prefetches = 0;
    }

    /// Drops every cached line without write-back traffic.
    pub fn invalidate_cache(&mut self) {
        self.cache = Cache::new(self.config.cache);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_system() -> MemorySystem {
        let mut cfg = MemoryConfig::new(1 << 24);
        cfg.cache = CacheConfig { capacity: 4096, line_bytes: 64, ways: 4 };
        MemorySystem::new(cfg).unwrap()
    }

    #[test]
    fn pool_cap_rejects_oversized_request() {
        let mut cfg = MemoryConfig::new(u64::MAX);
        cfg.pool_cap = 1 << 30;
        let mut mem = MemorySystem::new(cfg).unwrap();
        let err = mem
            .allocate_region(RegionKind::ContiguousPool, Attribute::NonCacheable, 2_400_000_000)
            .unwrap_err();
        assert!(matches!(err, MemoryError::PoolExhausted { requested: 2_400_000_000, .. }));
        assert!(mem.regions().is_empty());
    }

    #[test]
    fn zero_size_and_disjoint_allocations() {
        let mut mem = small_system();
        assert_eq!(mem.allocate_region(RegionKind::General, Attribute::Cacheable, 0), Err(MemoryError::ZeroSize));
        let a = mem.allocate_region(RegionKind::General, Attribute::Cacheable, 100).unwrap();
        let b = mem.allocate_region(RegionKind::General, Attribute::NonCacheable, 100).unwrap();
        assert!(a.end() <= b.base);
    }

    #[test]
    fn cacheable_reads_miss_then_hit() {
        let mut mem = small_system();
        let r = mem.allocate_region(RegionKind::General, Attribute::Cacheable, 4096).unwrap();
        let s1 = mem.access(r.base + 8, Op::Read, 8, AgentId::HOST).unwrap();
        let s2 = mem.access(r.base + 8, Op::Read, 8, AgentId::HOST).unwrap();
        assert_eq!((s1, s2), (Service::Dram, Service::Cache));
        assert_eq!(mem.trace().len(), 1);
        assert_eq!(mem.trace()[0].bytes, 64);
    }

    #[test]
    fn non_cacheable_reads_always_reach_dram() {
        let mut mem = small_system();
        let r = mem.allocate_region(RegionKind::ContiguousPool, Attribute::NonCacheable, 4096).unwrap();
        let s1 = mem.access(r.base, Op::Read, 32, AgentId::HOST).unwrap();
        let s2 = mem.access(r.base, Op::Read, 32, AgentId::HOST).unwrap();
        assert_eq!((s1, s2), (Service::Dram, Service::Dram));
        assert_eq!(mem.cache_stats(), CacheStats::default());
    }

    #[test]
    fn unmapped_access_fails() {
        let mut mem = small_system();
        assert!(matches!(mem.access(0, Op::Read, 4, AgentId::HOST), Err(MemoryError::Unmapped { .. })));
    }

    #[test]
    fn dirty_eviction_writes_back() {
        let mut mem = MemorySystem::new(MemoryConfig {
            cache: CacheConfig { capacity: 128, line_bytes: 64, ways: 1 },
            ..MemoryConfig::new(1 << 20)
        })
        .unwrap();
        let r = mem.allocate_region(RegionKind::General, Attribute::Cacheable, 4096).unwrap();
        mem.write(r.base, &[1, 2, 3], AgentId::HOST).unwrap();
        // same set (2 sets of 64 B), different tag
        mem.read(r.base + 128, &mut [0u8; 4], AgentId::HOST).unwrap();
        let ops: Vec<(Op, u64)> = mem.trace().iter().map(|t| (t.op, t.addr)).collect();
        assert_eq!(ops, vec![(Op::Read, r.base), (Op::Write, r.base), (Op::Read, r.base + 128)]);
        assert_eq!(mem.cache_stats().writebacks, 1);
    }

    #[test]
    fn drain_returns_deltas_and_reset_keeps_regions() {
        let mut mem = small_system();
        let r = mem.allocate_region(RegionKind::General, Attribute::NonCacheable, 4096).unwrap();
        for i in 0..5 {
            mem.access(r.base + 32 * i, Op::Read, 32, AgentId::HOST).unwrap();
        }
        let first = mem.drain_trace();
        assert_eq!(first.len(), 5);
        assert!(first.iter().all(|t| t.op == Op::Read));
        assert!(mem.drain_trace().is_empty());
        mem.reset_stats();
        assert_eq!(mem.regions().len(), 1);
        assert_eq!(mem.trace_len(), 5);
    }

    #[test]
    fn data_round_trips_through_store() {
        let mut mem = small_system();
        let r = mem.allocate_region(RegionKind::General, Attribute::Cacheable, 3 * PAGE).unwrap();
        let data: Vec<u8> = (0..5000u32).map(|i| (i % 251) as u8).collect();
        mem.write(r.base + 100, &data, AgentId(3)).unwrap();
        let mut back = vec![0u8; data.len()];
        mem.read(r.base + 100, &mut back, AgentId(3)).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn rogue_prefetcher_injects_reads() {
        let mut mem = small_system();
        mem.set_prefetch(PrefetchMode::RogueNextLine);
        let r = mem.allocate_region(RegionKind::General, Attribute::NonCacheable, 4096).unwrap();
        mem.access(r.base, Op::Read, 32, AgentId::HOST).unwrap();
        let t = mem.trace();
        assert_eq!(t.len(), 2);
        assert_eq!((t[1].agent, t[1].addr), (AgentId::PREFETCHER, r.base + 64));
    }
}
