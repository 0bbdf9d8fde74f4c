//! Host-friendly and PIM-aware weight placement, the offline converter and
//! the swizzled memory copy (SMC).
//!
//! Host-friendly matrices are column-major: element `(m, k)` of an `M x K`
//! matrix sits at flat index `k * M + m`. In the PIM-aware layout output rows
//! are grouped into tiles of `lanes` rows. Tile `t` lives in bank
//! `t % active_banks` of channel `(t / active_banks) % active_channels`, in
//! bank-local slot `t / (active_banks * active_channels)`. Inside a bank a
//! slot is `K` consecutive bursts, burst `k` holding column `k` of the tile,
//! laid out along DRAM columns and then rows starting at `row_base`.

use std::ops::Range;

use half::bf16;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address_map::{AddressMap, DramCoord, DramGeometry, MapError};
use crate::memory::{AgentId, Attribute, MemoryError, MemoryRegion, MemorySystem, TraceRecord};
use crate::model::{MatrixShape, ModelSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("placement: {0}")]
    Policy(String),
    #[error("element ({m}, {k}) outside padded bounds {padded_out} x {in_dim}")]
    IndexOutOfBounds { m: u64, k: u64, padded_out: u64, in_dim: u64 },
    #[error("matrix needs rows {start}..{end} but the bank has {rows}")]
    CapacityExceeded { start: u64, end: u64, rows: u64 },
    #[error("expected a {expected:?} matrix, got {actual:?}")]
    WrongLayout { expected: &'static str, actual: LayoutTag },
    #[error("matrix data holds {actual} elements, shape needs {expected}")]
    DataLength { expected: usize, actual: usize },
    #[error("shape mismatch: matrix {matrix:?} vs placement {placement:?}")]
    ShapeMismatch { matrix: (u64, u64), placement: (u64, u64) },
    #[error("SMC destination holds {capacity} bytes, tile needs {needed}")]
    DestinationOverflow { needed: u64, capacity: u64 },
    #[error("SMC source at {addr:#x} is not in a non-cacheable region")]
    SourceCacheable { addr: u64 },
    #[error("image holds {actual} bytes, placement spans {expected}")]
    ImageSize { expected: u64, actual: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayoutTag {
    HostFriendly,
    PimAware { lanes: u64, active_banks: u64 },
}

/// A BF16 weight matrix, `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub out_dim: u64,
    pub in_dim: u64,
    pub data: Vec<bf16>,
    pub layout: LayoutTag,
}

impl WeightMatrix {
    pub fn host_friendly(out_dim: u64, in_dim: u64, data: Vec<bf16>) -> Result<Self, LayoutError> {
        let w = Self { out_dim, in_dim, data, layout: LayoutTag::HostFriendly };
        w.check()?;
        Ok(w)
    }

    fn check(&self) -> Result<(), LayoutError> {
        let expected = (self.out_dim * self.in_dim) as usize;
        if self.out_dim == 0 || self.in_dim == 0 || self.data.len() != expected {
            return Err(LayoutError::DataLength { expected, actual: self.data.len() });
        }
        Ok(())
    }

    /// Element `(m, k)` of a host-friendly (column-major) matrix.
    pub fn at(&self, m: u64, k: u64) -> bf16 {
        self.data[(k * self.out_dim + m) as usize]
    }

    pub fn element_bytes(&self) -> u64 {
        2
    }
}

/// Which banks and channels take part in a PIM pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementPolicy {
    pub active_banks: u64,
    pub active_channels: u64,
}

impl PlacementPolicy {
    /// Every bank of every channel.
    pub fn all_of(geometry: &DramGeometry) -> Self {
        Self { active_banks: geometry.banks_per_rank, active_channels: geometry.channels }
    }

    pub fn units(&self) -> u64 {
        self.active_banks * self.active_channels
    }

    pub fn validate(&self, geometry: &DramGeometry) -> Result<(), LayoutError> {
        if self.active_banks == 0 || self.active_banks > geometry.banks_per_rank {
            return Err(LayoutError::Policy(format!(
                "active_banks {} must be in 1..={}",
                self.active_banks, geometry.banks_per_rank
            )));
        }
        if self.active_channels == 0 || self.active_channels > geometry.channels {
            return Err(LayoutError::Policy(format!(
                "active_channels {} must be in 1..={}",
                self.active_channels, geometry.channels
            )));
        }
        Ok(())
    }

    /// Output rows covered by one pass over all active banks.
    pub fn row_block(&self, geometry: &DramGeometry) -> u64 {
        geometry.elements_per_burst() * self.units()
    }
}

/// Bank-local position of an output-row tile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLocation {
    pub channel: u64,
    pub bank: u64,
    pub slot: u64,
}

/// PIM-aware placement of one matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PimPlacement {
    pub map: AddressMap,
    pub policy: PlacementPolicy,
    pub out_dim: u64,
    pub in_dim: u64,
    /// First DRAM row of the matrix slab in every active bank.
    pub row_base: u64,
}

impl PimPlacement {
    pub fn new(map: AddressMap, policy: PlacementPolicy, out_dim: u64, in_dim: u64, row_base: u64) -> Result<Self, LayoutError> {
        let g = *map.geometry();
        policy.validate(&g)?;
        if !map.row_is_most_significant() {
            return Err(LayoutError::Policy("PIM placement needs `row` as the most significant map field".into()));
        }
        if out_dim == 0 || in_dim == 0 {
            return Err(LayoutError::Policy("matrix dimensions must be >= 1".into()));
        }
        let p = Self { map, policy, out_dim, in_dim, row_base };
        let end = row_base + p.slab_rows();
        if end > g.rows_per_bank {
            return Err(LayoutError::CapacityExceeded { start: row_base, end, rows: g.rows_per_bank });
        }
        Ok(p)
    }

    /// Same placement moved so that its slab starts at `region.base`.
    pub fn placed_in(&self, region: &MemoryRegion) -> Result<Self, LayoutError> {
        let stride = self.map.row_stride();
        if !region.base.is_multiple_of(stride) || region.size < self.span_bytes() {
            return Err(LayoutError::Policy(format!(
                "region {:#x}+{} does not hold a row-aligned slab of {} bytes",
                region.base,
                region.size,
                self.span_bytes()
            )));
        }
        Self::new(self.map.clone(), self.policy, self.out_dim, self.in_dim, region.base / stride)
    }

    pub fn geometry(&self) -> &DramGeometry {
        self.map.geometry()
    }

    pub fn lanes(&self) -> u64 {
        self.geometry().elements_per_burst()
    }

    pub fn padded_out(&self) -> u64 {
        let block = self.policy.row_block(self.geometry());
        self.out_dim.div_ceil(block) * block
    }

    pub fn tiles(&self) -> u64 {
        self.padded_out() / self.lanes()
    }

    /// Bank-local slots, i.e. output tiles of one lockstep pass.
    pub fn slots(&self) -> u64 {
        self.tiles() / self.policy.units()
    }

    pub fn slab_rows(&self) -> u64 {
        (self.slots() * self.in_dim).div_ceil(self.geometry().columns_per_row)
    }

    /// Bytes of the active-bank slabs.
    pub fn padded_bytes(&self) -> u64 {
        self.slab_rows() * self.geometry().row_bytes() * self.policy.units()
    }

    pub fn padding_bytes(&self) -> u64 {
        self.padded_bytes() - self.out_dim * self.in_dim * self.geometry().element_bytes
    }

    /// Physical address of the first slab row.
    pub fn base(&self) -> u64 {
        self.row_base * self.map.row_stride()
    }

    /// Physical bytes spanned by the slab rows, inactive banks included.
    pub fn span_bytes(&self) -> u64 {
        self.slab_rows() * self.map.row_stride()
    }

    pub fn tile_location(&self, tile: u64) -> TileLocation {
        let banks = self.policy.active_banks;
        TileLocation {
            bank: tile % banks,
            channel: (tile / banks) % self.policy.active_channels,
            slot: tile / self.policy.units(),
        }
    }

    /// DRAM coordinate of burst `k` of a tile slot in one bank.
    pub fn burst_coord(&self, channel: u64, bank: u64, slot: u64, k: u64) -> DramCoord {
        let cols = self.geometry().columns_per_row;
        let burst = slot * self.in_dim + k;
        DramCoord {
            channel,
            rank: 0,
            bank,
            row: self.row_base + burst / cols,
            column: burst % cols,
            burst_offset: 0,
        }
    }

    pub fn coord_of_element(&self, m: u64, k: u64) -> Result<DramCoord, LayoutError> {
        if m >= self.padded_out() || k >= self.in_dim {
            return Err(LayoutError::IndexOutOfBounds { m, k, padded_out: self.padded_out(), in_dim: self.in_dim });
        }
        let lanes = self.lanes();
        let loc = self.tile_location(m / lanes);
        let mut coord = self.burst_coord(loc.channel, loc.bank, loc.slot, k);
        coord.burst_offset = (m % lanes) * self.geometry().element_bytes;
        Ok(coord)
    }

    pub fn address_of_element(&self, m: u64, k: u64) -> Result<u64, LayoutError> {
        Ok(self.map.encode(&self.coord_of_element(m, k)?)?)
    }

    pub fn tag(&self) -> LayoutTag {
        LayoutTag::PimAware { lanes: self.lanes(), active_banks: self.policy.active_banks }
    }
}

/// Byte image of a PIM-aware matrix covering `[base, base + bytes.len())`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PimImage {
    pub base: u64,
    pub bytes: Vec<u8>,
    pub padded_out: u64,
    pub in_dim: u64,
    pub padding_bytes: u64,
}

/// Offline converter: host-friendly matrix to PIM-aware image. Padding
/// elements are zero.
pub fn convert_to_pim_aware(w: &WeightMatrix, p: &PimPlacement) -> Result<PimImage, LayoutError> {
    if w.layout != LayoutTag::HostFriendly {
        return Err(LayoutError::WrongLayout { expected: "HostFriendly", actual: w.layout });
    }
    w.check()?;
    if (w.out_dim, w.in_dim) != (p.out_dim, p.in_dim) {
        return Err(LayoutError::ShapeMismatch { matrix: (w.out_dim, w.in_dim), placement: (p.out_dim, p.in_dim) });
    }
    let base = p.base();
    let mut bytes = vec![0u8; p.span_bytes() as usize];
    for k in 0..w.in_dim {
        for m in 0..w.out_dim {
            let at = (p.address_of_element(m, k)? - base) as usize;
            bytes[at..at + 2].copy_from_slice(&w.at(m, k).to_le_bytes());
        }
    }
    Ok(PimImage { base, bytes, padded_out: p.padded_out(), in_dim: p.in_dim, padding_bytes: p.padding_bytes() })
}

/// Pure inverse of [`convert_to_pim_aware`].
pub fn unswizzle(image: &PimImage, p: &PimPlacement) -> Result<WeightMatrix, LayoutError> {
    if image.bytes.len() as u64 != p.span_bytes() {
        return Err(LayoutError::ImageSize { expected: p.span_bytes(), actual: image.bytes.len() as u64 });
    }
    let mut data = Vec::with_capacity((p.out_dim * p.in_dim) as usize);
    for k in 0..p.in_dim {
        for m in 0..p.out_dim {
            let at = (p.address_of_element(m, k)? - image.base) as usize;
            data.push(bf16::from_le_bytes([image.bytes[at], image.bytes[at + 1]]));
        }
    }
    WeightMatrix::host_friendly(p.out_dim, p.in_dim, data)
}

/// Result of one swizzled memory copy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SmcOutcome {
    pub copied_bytes: u64,
    pub source_reads: u64,
    /// Controller-level records produced during the copy (any region).
    pub trace: Vec<TraceRecord>,
}

/// Cacheable destination of an SMC.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmcDestination {
    pub addr: u64,
    pub capacity: u64,
}

/// Copies the `rows x cols` tile of a PIM-aware matrix resident in a
/// non-cacheable region into `dst` in host-friendly column-major order
/// (leading dimension `rows.len()`). Issues one source read per burst.
pub fn smc_copy(
    mem: &mut MemorySystem,
    p: &PimPlacement,
    dst: SmcDestination,
    rows: Range<u64>,
    cols: Range<u64>,
    agent: AgentId,
) -> Result<SmcOutcome, LayoutError> {
    let start = mem.trace_len();
    let (nrows, ncols) = (rows.end.saturating_sub(rows.start), cols.end.saturating_sub(cols.start));
    if nrows == 0 || ncols == 0 {
        return Ok(SmcOutcome { copied_bytes: 0, source_reads: 0, trace: Vec::new() });
    }
    if rows.end > p.out_dim || cols.end > p.in_dim {
        return Err(LayoutError::IndexOutOfBounds { m: rows.end - 1, k: cols.end - 1, padded_out: p.out_dim, in_dim: p.in_dim });
    }
    let eb = p.geometry().element_bytes;
    let needed = nrows * ncols * eb;
    if needed > dst.capacity {
        return Err(LayoutError::DestinationOverflow { needed, capacity: dst.capacity });
    }
    let src_region = *mem.region_of(p.base(), p.span_bytes())?;
    if src_region.attribute != Attribute::NonCacheable {
        return Err(LayoutError::SourceCacheable { addr: p.base() });
    }

    let lanes = p.lanes();
    let burst_bytes = p.geometry().burst_bytes;
    let mut burst = vec![0u8; burst_bytes as usize];
    let mut source_reads = 0;
    for k in cols.clone() {
        let mut m = rows.start;
        while m < rows.end {
            let tile = m / lanes;
            let tile_end = ((tile + 1) * lanes).min(rows.end);
            let loc = p.tile_location(tile);
            let addr = p.map.encode(&p.burst_coord(loc.channel, loc.bank, loc.slot, k))?;
            mem.read(addr, &mut burst, agent)?;
            source_reads += 1;
            let lane0 = (m % lanes) * eb;
            let len = (tile_end - m) * eb;
            let dst_off = ((k - cols.start) * nrows + (m - rows.start)) * eb;
            mem.write(dst.addr + dst_off, &burst[lane0 as usize..(lane0 + len) as usize], agent)?;
            m = tile_end;
        }
    }
    Ok(SmcOutcome { copied_bytes: needed, source_reads, trace: mem.trace_since(start).to_vec() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixPadding {
    pub tag: String,
    pub out_dim: u64,
    pub in_dim: u64,
    pub padded_out: u64,
    pub host_bytes: u64,
    pub padded_bytes: u64,
    pub padding_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PaddingReport {
    pub matrices: Vec<MatrixPadding>,
    pub host_bytes: u64,
    pub padded_bytes: u64,
    pub padding_bytes: u64,
    /// padding / host bytes
    pub padding_fraction: f64,
}

fn matrix_padding(shape: &MatrixShape, geometry: &DramGeometry, policy: &PlacementPolicy) -> MatrixPadding {
    let block = policy.row_block(geometry);
    let padded_out = shape.out_dim.div_ceil(block) * block;
    let slots = padded_out / block;
    let slab_rows = (slots * shape.in_dim).div_ceil(geometry.columns_per_row);
    let padded_bytes = slab_rows * geometry.row_bytes() * policy.units();
    let host_bytes = shape.elements() * geometry.element_bytes;
    MatrixPadding {
        tag: shape.tag(),
        out_dim: shape.out_dim,
        in_dim: shape.in_dim,
        padded_out,
        host_bytes,
        padded_bytes,
        padding_bytes: padded_bytes - host_bytes,
    }
}

/// Per-matrix and total PIM-aware sizes under the padding rule. Pure
/// arithmetic; does not need the model to fit the geometry's rows.
pub fn padded_size(model: &ModelSpec, geometry: &DramGeometry, policy: &PlacementPolicy) -> PaddingReport {
    let matrices: Vec<MatrixPadding> = model.matrices().iter().map(|s| matrix_padding(s, geometry, policy)).collect();
    let host_bytes = matrices.iter().map(|m| m.host_bytes).sum::<u64>();
    let padded_bytes = matrices.iter().map(|m| m.padded_bytes).sum::<u64>();
    let padding_bytes = padded_bytes - host_bytes;
    PaddingReport {
        matrices,
        host_bytes,
        padded_bytes,
        padding_bytes,
        padding_fraction: if host_bytes == 0 { 0.0 } else { padding_bytes as f64 / host_bytes as f64 },
    }
}

/// All matrices of a model stacked row-band after row-band.
#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub entries: Vec<(MatrixShape, PimPlacement)>,
    pub row_base: u64,
    pub rows: u64,
}

impl ModelLayout {
    pub fn new(model: &ModelSpec, map: &AddressMap, policy: PlacementPolicy, row_base: u64) -> Result<Self, LayoutError> {
        let mut row = row_base;
        let mut entries = Vec::new();
        for shape in model.matrices() {
            let p = PimPlacement::new(map.clone(), policy, shape.out_dim, shape.in_dim, row)?;
            row += p.slab_rows();
            entries.push((shape, p));
        }
        Ok(Self { entries, row_base, rows: row - row_base })
    }

    pub fn base(&self) -> u64 {
        self.entries.first().map_or(0, |(_, p)| p.row_base * p.map.row_stride())
    }

    pub fn span_bytes(&self, map: &AddressMap) -> u64 {
        self.rows * map.row_stride()
    }
}
