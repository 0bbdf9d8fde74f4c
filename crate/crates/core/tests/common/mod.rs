#![allow(dead_code)]

use half::bf16;
use pimsim::address_map::{AddressMap, DramGeometry, Field};
use pimsim::layout::{convert_to_pim_aware, smc_copy, unswizzle, PimPlacement, PlacementPolicy, SmcDestination, WeightMatrix};
use pimsim::memory::{AgentId, Attribute, CacheConfig, MemoryConfig, MemorySystem, Op, RegionKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Shape {
    pub map: AddressMap,
    pub policy: PlacementPolicy,
    pub out_dim: u64,
    pub in_dim: u64,
}

/// Random map, policy and matrix shape; dims are not multiples of 16.
pub fn random_shape(rng: &mut ChaCha8Rng) -> Shape {
    let g = DramGeometry {
        channels: 1 << rng.gen_range(0..=1),
        banks_per_rank: 1 << rng.gen_range(2..=4),
        rows_per_bank: 512,
        columns_per_row: 1 << rng.gen_range(4..=6),
        ..DramGeometry::default()
    };
    let low: &[Field] = if rng.gen_bool(0.5) {
        &[Field::Channel, Field::Bank, Field::Column, Field::Rank]
    } else {
        &[Field::Column, Field::Bank, Field::Channel, Field::Rank]
    };
    let mut order = low.to_vec();
    order.push(Field::Row);
    let map = AddressMap::new(g, &order).unwrap();
    let policy = PlacementPolicy {
        active_banks: 1 << rng.gen_range(0..=g.banks_per_rank.trailing_zeros()),
        active_channels: rng.gen_range(1..=g.channels),
    };
    Shape { map, policy, out_dim: rng.gen_range(1..=300), in_dim: rng.gen_range(1..=160) }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, out_dim: u64, in_dim: u64) -> WeightMatrix {
    let data = (0..out_dim * in_dim).map(|_| bf16::from_f32(rng.gen_range(-1000i32..1000) as f32 / 8.0)).collect();
    WeightMatrix::host_friendly(out_dim, in_dim, data).unwrap()
}

pub fn shape_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// host -> PIM image -> non-cacheable memory -> SMC -> host.
pub fn memory_round_trip(w: &WeightMatrix, p: &PimPlacement) -> Result<WeightMatrix, String> {
    let g = *p.geometry();
    let mut cfg = MemoryConfig::new(g.total_capacity() + (1 << 20));
    cfg.pool_cap = cfg.address_space;
    let mut mem = MemorySystem::new(cfg).map_err(|e| e.to_string())?;
    let region = mem
        .allocate_region_aligned(RegionKind::ContiguousPool, Attribute::NonCacheable, p.span_bytes(), p.map.row_stride())
        .map_err(|e| e.to_string())?;
    let placed = p.placed_in(&region).map_err(|e| e.to_string())?;
    let image = convert_to_pim_aware(w, &placed).map_err(|e| e.to_string())?;
    if unswizzle(&image, &placed).map_err(|e| e.to_string())? != *w {
        return Err("pure unswizzle differs".into());
    }
    mem.load(image.base, &image.bytes).map_err(|e| e.to_string())?;
    let bytes = w.out_dim * w.in_dim * 2;
    let dst = mem.allocate_region(RegionKind::General, Attribute::Cacheable, bytes).map_err(|e| e.to_string())?;
    let out = smc_copy(
        &mut mem,
        &placed,
        SmcDestination { addr: dst.base, capacity: dst.size },
        0..w.out_dim,
        0..w.in_dim,
        AgentId(1),
    )
    .map_err(|e| e.to_string())?;
    if out.source_reads != w.in_dim * w.out_dim.div_ceil(p.lanes()) {
        return Err(format!("{} source reads", out.source_reads));
    }
    let mut buf = vec![0u8; bytes as usize];
    mem.read(dst.base, &mut buf, AgentId::HOST).map_err(|e| e.to_string())?;
    let data = buf.chunks_exact(2).map(|c| bf16::from_le_bytes([c[0], c[1]])).collect();
    WeightMatrix::host_friendly(w.out_dim, w.in_dim, data).map_err(|e| e.to_string())
}

/// Every output row lives in one bank, its K elements walk consecutive
/// columns of consecutive rows, and 16 rows of a tile share each burst.
pub fn placement_invariants(p: &PimPlacement) -> Result<(), String> {
    let lanes = p.lanes();
    let cols = p.geometry().columns_per_row;
    for m in 0..p.padded_out() {
        let first = p.coord_of_element(m, 0).map_err(|e| e.to_string())?;
        if first.burst_offset != (m % lanes) * 2 {
            return Err(format!("m={m}: lane offset {}", first.burst_offset));
        }
        if p.policy.active_banks <= first.bank || p.policy.active_channels <= first.channel {
            return Err(format!("m={m}: inactive bank or channel"));
        }
        let mut prev = first;
        for k in 1..p.in_dim {
            let c = p.coord_of_element(m, k).map_err(|e| e.to_string())?;
            if (c.channel, c.rank, c.bank, c.burst_offset) != (prev.channel, prev.rank, prev.bank, prev.burst_offset) {
                return Err(format!("m={m} k={k}: row left its bank"));
            }
            let step = (c.row * cols + c.column) as i64 - (prev.row * cols + prev.column) as i64;
            if step != 1 {
                return Err(format!("m={m} k={k}: burst stride {step}"));
            }
            prev = c;
        }
        let tile_head = p.coord_of_element(m / lanes * lanes, p.in_dim - 1).map_err(|e| e.to_string())?;
        if (tile_head.row, tile_head.column, tile_head.bank, tile_head.channel) != (prev.row, prev.column, prev.bank, prev.channel) {
            return Err(format!("m={m}: tile rows do not share bursts"));
        }
    }
    if p.row_base + p.slab_rows() > p.geometry().rows_per_bank {
        return Err("slab overflows the bank".into());
    }
    Ok(())
}

/// Reference write-back LRU cache; each set is kept in recency order.
pub struct RefCache {
    sets: Vec<Vec<(u64, bool)>>,
    ways: usize,
    line: u64,
}

pub struct Touch {
    pub hit: bool,
    /// Controller records `(op, line address)` caused by the touch.
    pub records: Vec<(Op, u64)>,
}

impl RefCache {
    pub fn new(cfg: &CacheConfig) -> Self {
        Self {
            sets: vec![Vec::new(); (cfg.capacity / (cfg.ways * cfg.line_bytes)) as usize],
            ways: cfg.ways as usize,
            line: cfg.line_bytes,
        }
    }

    pub fn touch(&mut self, line_addr: u64, write: bool) -> Touch {
        let n = self.sets.len() as u64;
        let line_no = line_addr / self.line;
        let (idx, tag) = ((line_no % n) as usize, line_no / n);
        let set = &mut self.sets[idx];
        if let Some(pos) = set.iter().position(|(t, _)| *t == tag) {
            let (t, d) = set.remove(pos);
            set.push((t, d || write));
            return Touch { hit: true, records: Vec::new() };
        }
        let mut records = Vec::new();
        if set.len() == self.ways {
            let (victim, dirty) = set.remove(0);
            if dirty {
                records.push((Op::Write, (victim * n + idx as u64) * self.line));
            }
        }
        set.push((tag, write));
        records.push((Op::Read, line_no * self.line));
        Touch { hit: false, records }
    }

    /// Touches every line of `[addr, addr + bytes)`; true if all hit.
    pub fn access(&mut self, addr: u64, bytes: u64, write: bool) -> bool {
        let mut line = addr / self.line * self.line;
        let mut all_hit = true;
        while line < addr + bytes.max(1) {
            all_hit &= self.touch(line, write).hit;
            line += self.line;
        }
        all_hit
    }
}
