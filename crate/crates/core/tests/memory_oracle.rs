mod common;

use common::RefCache;
use pimsim::memory::{AgentId, Attribute, CacheConfig, MemoryConfig, MemorySystem, Op, PrefetchMode, RegionKind, Service};
use proptest::prelude::*;

const LINE: u64 = 64;

#[derive(Debug, Clone)]
struct Req {
    cacheable: bool,
    offset: u64,
    bytes: u64,
    write: bool,
    agent: u32,
}

fn req() -> impl Strategy<Value = Req> {
    (any::<bool>(), 0u64..4032, 1u64..=64, any::<bool>(), 0u32..4)
        .prop_map(|(cacheable, offset, bytes, write, agent)| Req { cacheable, offset, bytes, write, agent })
}

fn small_cache() -> CacheConfig {
    CacheConfig { capacity: 512, line_bytes: LINE, ways: 2 }
}

fn system() -> (MemorySystem, u64, u64) {
    let mut cfg = MemoryConfig::new(1 << 20);
    cfg.cache = small_cache();
    let mut mem = MemorySystem::new(cfg).unwrap();
    let nc = mem.allocate_region(RegionKind::General, Attribute::NonCacheable, 4096).unwrap();
    let c = mem.allocate_region(RegionKind::General, Attribute::Cacheable, 4096).unwrap();
    (mem, nc.base, c.base)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn trace_matches_reference_cache(reqs in prop::collection::vec(req(), 1..200)) {
        let (mut mem, nc, c) = system();
        let mut oracle = RefCache::new(&small_cache());
        let mut expected = Vec::new();
        for r in &reqs {
            let op = if r.write { Op::Write } else { Op::Read };
            let agent = AgentId(r.agent);
            let addr = if r.cacheable { c + r.offset } else { nc + r.offset };
            let before = expected.len();
            if r.cacheable {
                let mut line = addr / LINE * LINE;
                while line < addr + r.bytes {
                    expected.extend(oracle.touch(line, r.write).records.into_iter().map(|(o, a)| (agent, o, a, LINE)));
                    line += LINE;
                }
            } else {
                expected.push((agent, op, addr, r.bytes));
            }
            let service = mem.access(addr, op, r.bytes, agent).unwrap();
            let reached = expected.len() > before;
            prop_assert_eq!(service == Service::Dram, reached);
        }
        let got: Vec<_> = mem.trace().iter().map(|t| (t.agent, t.op, t.addr, t.bytes)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn non_cacheable_requests_always_reach_the_controller(reqs in prop::collection::vec(req(), 1..100)) {
        let (mut mem, nc, _) = system();
        for (i, r) in reqs.iter().enumerate() {
            let op = if r.write { Op::Write } else { Op::Read };
            prop_assert_eq!(mem.access(nc + r.offset, op, r.bytes, AgentId(r.agent)).unwrap(), Service::Dram);
            prop_assert_eq!(mem.trace().len(), i + 1);
        }
        prop_assert_eq!(mem.cache_stats().hits + mem.cache_stats().misses, 0);
    }

    #[test]
    fn interleaved_agents_keep_submission_order(reqs in prop::collection::vec(req(), 1..100)) {
        let (mut mem, nc, _) = system();
        for r in &reqs {
            mem.access(nc + r.offset, Op::Read, r.bytes, AgentId(r.agent)).unwrap();
        }
        let trace = mem.trace();
        prop_assert!(trace.windows(2).all(|w| w[0].tick < w[1].tick));
        let agents: Vec<u32> = trace.iter().map(|t| t.agent.0).collect();
        prop_assert_eq!(agents, reqs.iter().map(|r| r.agent).collect::<Vec<_>>());
    }
}

#[test]
fn repeated_cacheable_read_is_absorbed() {
    let (mut mem, _, c) = system();
    let mut buf = [0u8; 32];
    assert_eq!(mem.read(c, &mut buf, AgentId::HOST).unwrap(), Service::Dram);
    assert_eq!(mem.read(c + 32, &mut buf, AgentId::HOST).unwrap(), Service::Cache);
    assert_eq!(mem.trace().len(), 1);
}

#[test]
fn rogue_prefetcher_touches_the_next_line_regardless_of_attribute() {
    let (mut mem, nc, _) = system();
    mem.set_prefetch(PrefetchMode::RogueNextLine);
    mem.access(nc, Op::Read, 32, AgentId::HOST).unwrap();
    let t = mem.trace();
    assert_eq!(t.len(), 2);
    assert_eq!((t[1].agent, t[1].addr), (AgentId::PREFETCHER, nc + LINE));
}

#[test]
fn pool_cap_is_enforced() {
    let mut cfg = MemoryConfig::new(1 << 20);
    cfg.pool_cap = 8192;
    let mut mem = MemorySystem::new(cfg).unwrap();
    mem.allocate_region(RegionKind::ContiguousPool, Attribute::NonCacheable, 8192).unwrap();
    assert!(mem.allocate_region(RegionKind::ContiguousPool, Attribute::NonCacheable, 1).is_err());
    assert!(mem.allocate_region(RegionKind::General, Attribute::Cacheable, 1).is_ok());
}
