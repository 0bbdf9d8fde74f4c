//! Functional model of per-bank PIM blocks driven by ordinary DRAM commands.
//!
//! The host issues a fixed command pattern per output tile: one `Write8` per
//! input tile loading 128 input elements into the input register file, one
//! weight read per input column, five dummy reads draining the ALU pipeline,
//! and one `Write8` that latches the accumulators into the output register
//! file. The engine never looks at the host's intent, only at the records
//! that reach the memory controller, so anything that absorbs or injects
//! requests (a cache, a prefetcher) shows up as wrong results and a command
//! count that disagrees with the formula.
//!
//! In multi-bank mode a weight read to `(channel, row, column)` triggers
//! every active bank of that channel in lockstep. MAC read `j` after an input
//! `Write8` multiplies input element `j` of the tile with the 16 weights of
//! the fetched burst.

use half::bf16;
use serde::Serialize;
use thiserror::Error;

use crate::address_map::{AddressMap, DramCoord, DramGeometry};
use crate::layout::{convert_to_pim_aware, LayoutError, PimPlacement, PlacementPolicy, WeightMatrix};
use crate::memory::{
    AgentId, Attribute, CacheConfig, MemoryConfig, MemoryError, MemoryRegion, MemorySystem, Op, RegionKind, Service,
    TraceRecord,
};
use crate::scalar::Scalar;

pub const INPUT_RF_ENTRIES: u64 = 8;
pub const OUTPUT_RF_ENTRIES: u64 = 8;
pub const DRAIN_READS: u64 = 5;
pub const READ_GROUP: u64 = 32;

/// Control window layout inside the PIM control region, per channel.
const WINDOW_STRIDE: u64 = 1024;
const OUT_WINDOW: u64 = 256;
const DUMMY_WINDOW: u64 = 512;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PimError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("weights at {addr:#x} are in a cacheable region; PIM triggers cannot be guaranteed")]
    CacheableWeights { addr: u64 },
    #[error("input tile of {len} elements exceeds the {capacity}-element register file")]
    RfOverflow { len: u64, capacity: u64 },
    #[error("staging address {addr:#x} is not aligned to {align} bytes")]
    Misaligned { addr: u64, align: u64 },
    #[error("input vector has {actual} elements, matrix needs {expected}")]
    InputLength { expected: u64, actual: u64 },
    #[error("control region too small: {size} bytes for {channels} channels")]
    ControlRegion { size: u64, channels: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PimMode {
    Standard,
    MultiBank,
}

/// Deliberate engine defects used as negative controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineFault {
    /// MAC read `j` consumes input element `j + 1`.
    RotateMacInput,
}

#[derive(Debug, Clone, Serialize)]
pub struct PimBlock<S> {
    pub input_rf: Vec<bf16>,
    pub output_rf: Vec<S>,
    pub acc: Vec<S>,
}

impl<S: Scalar> PimBlock<S> {
    fn new(lanes: usize) -> Self {
        Self {
            input_rf: vec![bf16::ZERO; INPUT_RF_ENTRIES as usize * lanes],
            output_rf: vec![S::zero(); OUTPUT_RF_ENTRIES as usize * lanes],
            acc: vec![S::zero(); lanes],
        }
    }
}

/// The PIM blocks of one channel and their shared command decoder.
#[derive(Debug, Clone, Serialize)]
pub struct PimRank<S> {
    pub channel: u64,
    pub mode: PimMode,
    pub blocks: Vec<PimBlock<S>>,
    /// Index of the next input element consumed by a MAC read.
    pub mac_cursor: u64,
}

/// Command counts observed in (or predicted for) a GEMV run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CommandCounts {
    pub input_writes: u64,
    pub mac_reads: u64,
    pub dummy_reads: u64,
    pub output_writes: u64,
}

/// A GEMV over a PIM-aware matrix resident in memory.
#[derive(Debug, Clone)]
pub struct GemvJob {
    pub placement: PimPlacement,
    pub input: Vec<bf16>,
}

impl GemvJob {
    pub fn input_tile_len(&self) -> u64 {
        INPUT_RF_ENTRIES * self.placement.lanes()
    }

    pub fn num_input_tiles(&self) -> u64 {
        self.placement.in_dim.div_ceil(self.input_tile_len())
    }

    pub fn num_out_tiles(&self) -> u64 {
        self.placement.slots()
    }

    /// Reads per input tile, in groups of [`READ_GROUP`].
    pub fn tile_reads(&self, input_tile: u64) -> u64 {
        let start = input_tile * self.input_tile_len();
        (self.placement.in_dim - start).min(self.input_tile_len())
    }

    /// Command counts the command pattern must produce at the controller.
    pub fn expected_counts(&self) -> CommandCounts {
        let streams = self.num_out_tiles() * self.placement.policy.active_channels;
        CommandCounts {
            input_writes: streams * self.num_input_tiles(),
            mac_reads: streams * self.placement.in_dim,
            dummy_reads: streams * DRAIN_READS,
            output_writes: streams,
        }
    }

    fn weight_span(&self) -> std::ops::Range<u64> {
        self.placement.base()..self.placement.base() + self.placement.span_bytes()
    }
}

/// Outcome of [`PimEngine::gemv_execute`].
#[derive(Debug, Clone)]
pub struct GemvRun<S> {
    pub output: Vec<S>,
    pub trace: Vec<TraceRecord>,
    /// Every host command of the run in issue order: `(op, addr, bytes)`.
    pub commands: Vec<(Op, u64, u64)>,
    /// Weight reads issued by the host and who served them.
    pub issued_reads: Vec<(u64, Service)>,
    pub observed: CommandCounts,
    pub expected: CommandCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum IntegrityStatus {
    Ok,
    /// MAC triggers were absorbed before reaching the controller.
    PimBlocked,
    /// Extra requests reached the weights and shifted the MAC sequence.
    Desynchronized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IntegrityReport {
    pub status: IntegrityStatus,
    pub expected_mac_reads: u64,
    pub observed_mac_reads: u64,
    pub deficit: u64,
    pub surplus: u64,
    /// Cache lines that served weight reads instead of the controller.
    pub absorbing_lines: Vec<u64>,
}

/// Compares the MAC-phase reads that reached the controller with the
/// command-count formula.
pub fn verify_trigger_integrity<S>(job: &GemvJob, run: &GemvRun<S>, line_bytes: u64) -> IntegrityReport {
    let expected = job.expected_counts().mac_reads;
    let observed = run.observed.mac_reads;
    let mut absorbing_lines: Vec<u64> = run
        .issued_reads
        .iter()
        .filter(|(_, s)| *s == Service::Cache)
        .map(|(a, _)| a / line_bytes * line_bytes)
        .collect();
    absorbing_lines.sort_unstable();
    absorbing_lines.dedup();
    let deficit = expected.saturating_sub(observed);
    let surplus = observed.saturating_sub(expected);
    let status = if deficit > 0 {
        IntegrityStatus::PimBlocked
    } else if surplus > 0 {
        IntegrityStatus::Desynchronized
    } else {
        IntegrityStatus::Ok
    };
    IntegrityReport { status, expected_mac_reads: expected, observed_mac_reads: observed, deficit, surplus, absorbing_lines }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GemvOptions {
    /// Run even when the weights are cacheable (for diagnosis).
    pub allow_cacheable_weights: bool,
    pub fault: Option<EngineFault>,
}

/// One engine per channel of the geometry, addressed through a
/// non-cacheable control region.
#[derive(Debug, Clone)]
pub struct PimEngine<S> {
    geometry: DramGeometry,
    control: MemoryRegion,
    ranks: Vec<PimRank<S>>,
    fault: Option<EngineFault>,
    active_job: Option<(std::ops::Range<u64>, PimPlacement)>,
    commands: Vec<(Op, u64, u64)>,
}

impl<S: Scalar> PimEngine<S> {
    pub fn control_region_bytes(geometry: &DramGeometry) -> u64 {
        geometry.channels * WINDOW_STRIDE
    }

    pub fn new(geometry: DramGeometry, control: MemoryRegion) -> Result<Self, PimError> {
        if control.size < Self::control_region_bytes(&geometry) || control.attribute != Attribute::NonCacheable {
            return Err(PimError::ControlRegion { size: control.size, channels: geometry.channels });
        }
        let lanes = geometry.elements_per_burst() as usize;
        let ranks = (0..geometry.channels)
            .map(|channel| PimRank {
                channel,
                mode: PimMode::Standard,
                blocks: (0..geometry.banks_per_rank).map(|_| PimBlock::new(lanes)).collect(),
                mac_cursor: 0,
            })
            .collect();
        Ok(Self { geometry, control, ranks, fault: None, active_job: None, commands: Vec::new() })
    }

    pub fn ranks(&self) -> &[PimRank<S>] {
        &self.ranks
    }

    fn rf_bytes(&self) -> u64 {
        INPUT_RF_ENTRIES * self.geometry.burst_bytes
    }

    pub fn input_window(&self, channel: u64) -> u64 {
        self.control.base + channel * WINDOW_STRIDE
    }

    pub fn output_window(&self, channel: u64) -> u64 {
        self.input_window(channel) + OUT_WINDOW
    }

    pub fn dummy_address(&self, channel: u64) -> u64 {
        self.input_window(channel) + DUMMY_WINDOW
    }

    fn window_of(&self, addr: u64) -> Option<(u64, u64)> {
        if !self.control.contains(addr, 1) {
            return None;
        }
        let rel = addr - self.control.base;
        Some((rel / WINDOW_STRIDE, rel % WINDOW_STRIDE))
    }

    /// `Write8(InBufPtr, InRfPtr)`: moves one RF-width of input from a
    /// staging buffer into the input register files of `channel`.
    pub fn pim_write_input(&mut self, mem: &mut MemorySystem, channel: u64, in_buf: u64) -> Result<(), PimError> {
        let align = self.geometry.burst_bytes;
        if !in_buf.is_multiple_of(align) {
            return Err(PimError::Misaligned { addr: in_buf, align });
        }
        let mut payload = vec![0u8; self.rf_bytes() as usize];
        self.commands.push((Op::Read, in_buf, payload.len() as u64));
        self.issue(mem, |mem, _| mem.read(in_buf, &mut payload, AgentId::HOST))?;
        let window = self.input_window(channel);
        self.commands.push((Op::Write, window, payload.len() as u64));
        self.issue(mem, |mem, _| mem.write(window, &payload, AgentId::HOST))?;
        Ok(())
    }

    /// Output register file of every bank of `channel`, entry 0, lanes in
    /// bank order.
    pub fn pim_read_output(&self, channel: u64) -> Vec<S> {
        let lanes = self.geometry.elements_per_burst() as usize;
        self.ranks[channel as usize].blocks.iter().flat_map(|b| b.output_rf[..lanes].iter().cloned()).collect()
    }

    /// Issues one host command and feeds whatever reached the controller to
    /// the command decoder, in trace order.
    fn issue<T>(
        &mut self,
        mem: &mut MemorySystem,
        cmd: impl FnOnce(&mut MemorySystem, &Self) -> Result<T, MemoryError>,
    ) -> Result<T, PimError> {
        let start = mem.trace_len();
        let out = cmd(mem, self)?;
        let records: Vec<TraceRecord> = mem.trace_since(start).to_vec();
        for r in &records {
            self.apply(r, mem);
        }
        Ok(out)
    }

    /// Command decoder: applies one controller-level record to the blocks.
    pub fn apply(&mut self, record: &TraceRecord, mem: &MemorySystem) {
        if let Some((channel, window)) = self.window_of(record.addr) {
            let Some(rank) = self.ranks.get_mut(channel as usize) else { return };
            match (record.op, window) {
                (Op::Write, 0) => {
                    let mut payload = vec![0u8; (INPUT_RF_ENTRIES * self.geometry.burst_bytes) as usize];
                    mem.peek(record.addr, &mut payload);
                    for block in &mut rank.blocks {
                        for (slot, chunk) in block.input_rf.iter_mut().zip(payload.chunks_exact(2)) {
                            *slot = bf16::from_le_bytes([chunk[0], chunk[1]]);
                        }
                    }
                    rank.mac_cursor = 0;
                }
                (Op::Write, OUT_WINDOW) => {
                    for block in &mut rank.blocks {
                        let lanes = block.acc.len();
                        for (dst, acc) in block.output_rf[..lanes].iter_mut().zip(block.acc.iter_mut()) {
                            *dst = acc.round_to_element();
                            *acc = S::zero();
                        }
                    }
                }
                _ => {}
            }
            return;
        }
        let Some((span, placement)) = &self.active_job else { return };
        if record.op != Op::Read || !span.contains(&record.addr) {
            return;
        }
        let Ok(coord) = placement.map.decode(record.addr) else { return };
        let Some(rank) = self.ranks.get_mut(coord.channel as usize) else { return };
        if rank.mode != PimMode::MultiBank {
            return;
        }
        let rf_len = rank.blocks.first().map_or(0, |b| b.input_rf.len() as u64);
        let index = match self.fault {
            Some(EngineFault::RotateMacInput) => (rank.mac_cursor + 1) % rf_len.max(1),
            None => rank.mac_cursor,
        };
        rank.mac_cursor += 1;
        if index >= rf_len {
            return;
        }
        let burst_bytes = self.geometry.burst_bytes as usize;
        let mut burst = vec![0u8; burst_bytes];
        for bank in 0..placement.policy.active_banks {
            let at = DramCoord { bank, burst_offset: 0, ..coord };
            let Ok(addr) = placement.map.encode(&at) else { continue };
            mem.peek(addr, &mut burst);
            let block = &mut rank.blocks[bank as usize];
            let x = S::from_bf16(block.input_rf[index as usize]);
            for (acc, w) in block.acc.iter_mut().zip(burst.chunks_exact(2)) {
                let w = S::from_bf16(bf16::from_le_bytes([w[0], w[1]]));
                *acc = acc.clone() + w * x.clone();
            }
        }
    }

    /// Runs the full GEMV command pattern for `job`. The input vector is
    /// staged in `in_buf` (at least `num_input_tiles * 256` bytes).
    pub fn gemv_execute(
        &mut self,
        mem: &mut MemorySystem,
        job: &GemvJob,
        in_buf: &MemoryRegion,
        options: GemvOptions,
    ) -> Result<GemvRun<S>, PimError> {
        let p = &job.placement;
        if job.input.len() as u64 != p.in_dim {
            return Err(PimError::InputLength { expected: p.in_dim, actual: job.input.len() as u64 });
        }
        let weights = *mem.region_of(p.base(), p.span_bytes())?;
        if weights.attribute == Attribute::Cacheable && !options.allow_cacheable_weights {
            return Err(PimError::CacheableWeights { addr: p.base() });
        }
        let tile_len = job.input_tile_len();
        let staged_bytes = job.num_input_tiles() * tile_len * 2;
        if in_buf.size < staged_bytes {
            return Err(PimError::RfOverflow { len: in_buf.size / 2, capacity: staged_bytes / 2 });
        }
        let mut staged = vec![0u8; staged_bytes as usize];
        for (i, v) in job.input.iter().enumerate() {
            staged[2 * i..2 * i + 2].copy_from_slice(&v.to_le_bytes());
        }
        mem.load(in_buf.base, &staged)?;

        self.fault = options.fault;
        self.active_job = Some((job.weight_span(), p.clone()));
        for rank in &mut self.ranks {
            rank.mode = PimMode::MultiBank;
            rank.mac_cursor = 0;
            for block in &mut rank.blocks {
                block.acc.iter_mut().for_each(|a| *a = S::zero());
            }
        }
        let result = self.run_pattern(mem, job, in_buf);
        for rank in &mut self.ranks {
            rank.mode = PimMode::Standard;
        }
        self.active_job = None;
        self.fault = None;
        result
    }

    fn run_pattern(&mut self, mem: &mut MemorySystem, job: &GemvJob, in_buf: &MemoryRegion) -> Result<GemvRun<S>, PimError> {
        let p = job.placement.clone();
        let start = mem.trace_len();
        self.commands.clear();
        let lanes = p.lanes();
        let burst_bytes = self.geometry.burst_bytes as usize;
        let tile_bytes = job.input_tile_len() * 2;
        let mut output = vec![S::zero(); p.out_dim as usize];
        let mut issued_reads = Vec::new();
        let mut burst = vec![0u8; burst_bytes];

        for o in 0..job.num_out_tiles() {
            for channel in 0..p.policy.active_channels {
                for i in 0..job.num_input_tiles() {
                    self.pim_write_input(mem, channel, in_buf.base + i * tile_bytes)?;
                    let reads = job.tile_reads(i);
                    for group in 0..reads.div_ceil(READ_GROUP) {
                        for r in group * READ_GROUP..((group + 1) * READ_GROUP).min(reads) {
                            let k = i * job.input_tile_len() + r;
                            let addr = p.map.encode(&p.burst_coord(channel, 0, o, k)).map_err(LayoutError::from)?;
                            self.commands.push((Op::Read, addr, burst_bytes as u64));
                            let service = self.issue(mem, |mem, _| mem.read(addr, &mut burst, AgentId::HOST))?;
                            issued_reads.push((addr, service));
                        }
                    }
                }
                for _ in 0..DRAIN_READS {
                    let dummy = self.dummy_address(channel);
                    self.commands.push((Op::Read, dummy, burst_bytes as u64));
                    self.issue(mem, |mem, _| mem.read(dummy, &mut burst, AgentId::HOST))?;
                }
                let flush = vec![0u8; self.rf_bytes() as usize];
                let out_window = self.output_window(channel);
                self.commands.push((Op::Write, out_window, flush.len() as u64));
                self.issue(mem, |mem, _| mem.write(out_window, &flush, AgentId::HOST))?;

                let results = self.pim_read_output(channel);
                for bank in 0..p.policy.active_banks {
                    let tile = o * p.policy.units() + channel * p.policy.active_banks + bank;
                    for lane in 0..lanes {
                        let m = tile * lanes + lane;
                        if m < p.out_dim {
                            output[m as usize] = results[(bank * lanes + lane) as usize].clone();
                        }
                    }
                }
            }
        }

        let trace = mem.trace_since(start).to_vec();
        let observed = self.classify(&trace, job);
        Ok(GemvRun { output, trace, commands: std::mem::take(&mut self.commands), issued_reads, observed, expected: job.expected_counts() })
    }

    fn classify(&self, trace: &[TraceRecord], job: &GemvJob) -> CommandCounts {
        let span = job.weight_span();
        let mut counts = CommandCounts::default();
        for r in trace {
            match (r.op, self.window_of(r.addr)) {
                (Op::Write, Some((_, 0))) => counts.input_writes += 1,
                (Op::Write, Some((_, OUT_WINDOW))) => counts.output_writes += 1,
                (Op::Read, Some((_, DUMMY_WINDOW))) => counts.dummy_reads += 1,
                (Op::Read, None) if span.contains(&r.addr) => counts.mac_reads += 1,
                _ => {}
            }
        }
        counts
    }

    /// Register files and accumulators as JSON, for debugging.
    pub fn state_dump(&self) -> serde_json::Value {
        let ranks: Vec<serde_json::Value> = self
            .ranks
            .iter()
            .map(|r| {
                serde_json::json!({
                    "channel": r.channel,
                    "mode": r.mode,
                    "mac_cursor": r.mac_cursor,
                    "blocks": r.blocks.iter().map(|b| serde_json::json!({
                        "input_rf": b.input_rf.iter().map(|v| v.to_f32()).collect::<Vec<_>>(),
                        "output_rf": b.output_rf.iter().map(Scalar::to_real).collect::<Vec<_>>(),
                        "acc": b.acc.iter().map(Scalar::to_real).collect::<Vec<_>>(),
                    })).collect::<Vec<_>>(),
                })
            })
            .collect();
        serde_json::Value::Array(ranks)
    }
}

/// A memory system prepared for GEMV jobs: control region and input
/// staging buffer first, then row-aligned weight regions.
#[derive(Debug, Clone)]
pub struct PimTestbed<S> {
    pub mem: MemorySystem,
    pub engine: PimEngine<S>,
    pub input_buffer: MemoryRegion,
    pub map: AddressMap,
}

impl<S: Scalar> PimTestbed<S> {
    pub fn new(map: AddressMap, cache: CacheConfig, max_in_dim: u64) -> Result<Self, PimError> {
        let g = *map.geometry();
        let mut config = MemoryConfig::new(g.total_capacity());
        config.cache = cache;
        let mut mem = MemorySystem::new(config)?;
        let control =
            mem.allocate_region(RegionKind::General, Attribute::NonCacheable, PimEngine::<S>::control_region_bytes(&g))?;
        let tile_bytes = INPUT_RF_ENTRIES * g.burst_bytes;
        let staging = max_in_dim.max(1).div_ceil(INPUT_RF_ENTRIES * g.elements_per_burst()) * tile_bytes;
        let input_buffer = mem.allocate_region(RegionKind::General, Attribute::Cacheable, staging)?;
        let engine = PimEngine::new(g, control)?;
        Ok(Self { mem, engine, input_buffer, map })
    }

    /// Converts `w` and loads it into a fresh row-aligned region.
    pub fn stage_weights(
        &mut self,
        w: &WeightMatrix,
        policy: PlacementPolicy,
        attribute: Attribute,
    ) -> Result<PimPlacement, PimError> {
        let probe = PimPlacement::new(self.map.clone(), policy, w.out_dim, w.in_dim, 0)?;
        let region = self.mem.allocate_region_aligned(
            RegionKind::ContiguousPool,
            attribute,
            probe.span_bytes(),
            self.map.row_stride(),
        )?;
        let p = probe.placed_in(&region)?;
        let image = convert_to_pim_aware(w, &p)?;
        self.mem.load(image.base, &image.bytes)?;
        Ok(p)
    }

    pub fn run(&mut self, job: &GemvJob, options: GemvOptions) -> Result<GemvRun<S>, PimError> {
        let input_buffer = self.input_buffer;
        self.engine.gemv_execute(&mut self.mem, job, &input_buffer, options)
    }
}

/// Host-side GEMV over the host-friendly matrix, accumulating in `S` and
/// rounding once per output.
pub fn host_gemv<S: Scalar>(w: &WeightMatrix, x: &[bf16]) -> Vec<S> {
    (0..w.out_dim)
        .map(|m| {
            let mut acc = S::zero();
            for (k, xk) in x.iter().enumerate() {
                acc = acc + S::from_bf16(w.at(m, k as u64)) * S::from_bf16(*xk);
            }
            acc.round_to_element()
        })
        .collect()
}
