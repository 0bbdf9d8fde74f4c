//! Prefill and decode orchestration under the six placement scenarios.
//!
//! Prefill is a sequence of steps, one per projection GEMM plus one host
//! step per layer for attention and normalization. The LM head is cut into
//! chunks that fit one cacheable buffer unit. Copy and compute agents are
//! advanced by a small discrete-event loop that records a [`Timeline`].

use serde::Serialize;
use thiserror::Error;

use crate::cost::{
    decode_token_seconds, gemm_seconds, gemm_units, nc_gemm_seconds, percent_half_up, smc_seconds, smc_units,
    CostError, HardwareSpec, ScenarioKind,
};
use crate::model::{MatrixKind, ModelSpec};
use crate::scalar::Scalar;
use num_rational::Ratio;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("SL must be >= 1")]
    EmptyInput,
    #[error("{unit} needs {bytes} bytes but a cacheable buffer holds {capacity}")]
    BufferTooSmall { unit: String, bytes: u64, capacity: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Copy,
    Compute,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Segment<S> {
    pub agent: String,
    pub role: Role,
    pub layer: String,
    pub start: S,
    pub end: S,
    pub bytes: u64,
    /// Cacheable buffer read (compute) or written (copy).
    pub buffer: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Timeline<S> {
    pub segments: Vec<Segment<S>>,
}

impl<S: Scalar> Timeline<S> {
    fn new() -> Self {
        Self { segments: Vec::new() }
    }

    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, agent: impl Into<String>, role: Role, layer: &str, start: S, end: S, bytes: u64, buffer: Option<u32>) {
        self.segments.push(Segment { agent: agent.into(), role, layer: layer.into(), start, end, bytes, buffer });
    }

    pub fn end(&self) -> S {
        self.segments.iter().fold(S::zero(), |acc, s| S::max_of(acc, s.end.clone()))
    }

    pub fn agents(&self) -> Vec<String> {
        let mut a: Vec<String> = self.segments.iter().map(|s| s.agent.clone()).collect();
        a.sort();
        a.dedup();
        a
    }

    /// True if no agent has two overlapping segments.
    pub fn agents_are_serial(&self) -> bool {
        self.agents().iter().all(|agent| {
            let mut segs: Vec<&Segment<S>> = self.segments.iter().filter(|s| &s.agent == agent).collect();
            segs.sort_by(|a, b| a.start.partial_cmp(&b.start).expect("ordered times"));
            segs.windows(2).all(|w| w[0].end <= w[1].start)
        })
    }

    /// Total time of the segments of one role.
    pub fn busy(&self, role: Role, agent: Option<&str>) -> S {
        self.segments
            .iter()
            .filter(|s| s.role == role && agent.is_none_or(|a| s.agent == a))
            .fold(S::zero(), |acc, s| acc + (s.end.clone() - s.start.clone()))
    }

    /// Span and compute time per layer tag prefix (`L3`, `LM`).
    pub fn layer_critical_paths(&self) -> Vec<LayerPath<S>> {
        let mut out: Vec<LayerPath<S>> = Vec::new();
        for s in &self.segments {
            let layer = s.layer.split('.').next().unwrap_or("").to_string();
            let busy = match s.role {
                Role::Compute => s.end.clone() - s.start.clone(),
                Role::Copy => S::zero(),
            };
            match out.iter_mut().find(|p| p.layer == layer) {
                Some(p) => {
                    p.start = S::min_of(p.start.clone(), s.start.clone());
                    p.end = S::max_of(p.end.clone(), s.end.clone());
                    p.compute_busy = p.compute_busy.clone() + busy;
                }
                None => out.push(LayerPath { layer, start: s.start.clone(), end: s.end.clone(), compute_busy: busy }),
            }
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.segments
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "agent": s.agent,
                        "role": s.role,
                        "layer": s.layer,
                        "start": s.start.to_real(),
                        "end": s.end.to_real(),
                        "bytes": s.bytes,
                        "buffer": s.buffer,
                    })
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerPath<S> {
    pub layer: String,
    pub start: S,
    pub end: S,
    pub compute_busy: S,
}

impl<S: Scalar> LayerPath<S> {
    /// The compute agent waited on a copy somewhere in this layer.
    pub fn copy_is_critical(&self) -> bool {
        self.end.clone() - self.start.clone() > self.compute_busy
    }
}

trait MinOf: Sized {
    fn min_of(a: Self, b: Self) -> Self;
}

impl<S: Scalar> MinOf for S {
    fn min_of(a: S, b: S) -> S {
        if b < a {
            b
        } else {
            a
        }
    }
}

/// One prefill step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub tag: String,
    pub layer: Option<u64>,
    /// `None` for the per-layer host step.
    pub kind: Option<MatrixKind>,
    pub params: u64,
    pub bytes: u64,
    /// Cacheable buffer unit the weights are copied into.
    pub unit: Option<usize>,
}

/// Weights copied into one cacheable buffer as a whole.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LoadUnit {
    pub tag: String,
    pub bytes: u64,
    /// Indices into the step list of the GEMMs fed by this unit.
    pub steps: Vec<usize>,
}

/// Prefill steps and the buffer units they consume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrefillPlan {
    pub steps: Vec<Step>,
    pub units: Vec<LoadUnit>,
}

impl PrefillPlan {
    pub fn new(model: &ModelSpec) -> Self {
        let eb = model.element_bytes;
        let mut steps = Vec::new();
        let mut units: Vec<LoadUnit> = Vec::new();
        let gemm = |steps: &mut Vec<Step>, units: &mut Vec<LoadUnit>, tag: String, layer, kind, params: u64, unit_tag: String| {
            if units.last().is_none_or(|u| u.tag != unit_tag) {
                units.push(LoadUnit { tag: unit_tag, bytes: 0, steps: Vec::new() });
            }
            let u = units.len() - 1;
            units[u].bytes += params * eb;
            units[u].steps.push(steps.len());
            steps.push(Step { tag, layer, kind: Some(kind), params, bytes: params * eb, unit: Some(u) });
        };
        for l in 0..model.layers {
            for shape in model.layer_matrices(l) {
                let unit_tag = match shape.kind {
                    MatrixKind::Q | MatrixKind::K | MatrixKind::V | MatrixKind::O => format!("L{l}.QKVO"),
                    _ => shape.tag(),
                };
                if shape.kind == MatrixKind::O {
                    steps.push(Step { tag: format!("L{l}.attn"), layer: Some(l), kind: None, params: 0, bytes: 0, unit: None });
                }
                gemm(&mut steps, &mut units, shape.tag(), Some(l), shape.kind, shape.elements(), unit_tag);
            }
        }
        if let Some(lm) = model.lm_head() {
            let rows_per_chunk = (model.buffer_unit_elements() / lm.in_dim).max(1);
            let chunks = lm.out_dim.div_ceil(rows_per_chunk);
            for c in 0..chunks {
                let rows = rows_per_chunk.min(lm.out_dim - c * rows_per_chunk);
                let tag = format!("LM.{c}");
                gemm(&mut steps, &mut units, tag.clone(), None, MatrixKind::LmHead, rows * lm.in_dim, tag);
            }
        }
        Self { steps, units }
    }

    pub fn total_bytes(&self) -> u64 {
        self.steps.iter().map(|s| s.bytes).sum()
    }

    pub fn total_params(&self) -> u64 {
        self.steps.iter().map(|s| s.params).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillResult<S> {
    pub scenario: ScenarioKind,
    pub sl: u64,
    pub ttft: S,
    pub timeline: Timeline<S>,
    pub copy_bytes: u64,
    pub smc_seconds: S,
    pub gemm_seconds: S,
}

fn step_compute<S: Scalar>(step: &Step, kind: ScenarioKind, sl: u64, hw: &HardwareSpec) -> S {
    match (step.kind, kind) {
        (None, _) => S::from_real(hw.host_layer_latency),
        (Some(_), ScenarioKind::NcGemm) => nc_gemm_seconds(step.bytes, step.params, sl, hw),
        (Some(_), _) => gemm_seconds(step.bytes, step.params, sl, hw),
    }
}

fn copy_segments<S: Scalar>(
    tl: &mut Timeline<S>,
    agents: u32,
    layer: &str,
    start: &S,
    end: &S,
    bytes: u64,
    buffer: u32,
) {
    for a in 0..agents as u64 {
        let share = bytes / agents as u64 + u64::from(a < bytes % agents as u64);
        tl.push(format!("copy{a}"), Role::Copy, layer, start.clone(), end.clone(), share, Some(buffer));
    }
}

/// Prefill time and timeline for `scenario` at input length `sl`.
pub fn run_prefill<S: Scalar>(
    scenario: ScenarioKind,
    model: &ModelSpec,
    hw: &HardwareSpec,
    sl: u64,
) -> Result<PrefillResult<S>, RuntimeError> {
    if sl == 0 {
        return Err(RuntimeError::EmptyInput);
    }
    let plan = PrefillPlan::new(model);
    match scenario {
        ScenarioKind::SDdb => build_ddb_schedule(&plan, model, hw, sl),
        ScenarioKind::SOwr => build_owr_schedule(&plan, model, hw, sl),
        _ => {
            let mut tl = Timeline::new();
            let mut t = S::zero();
            let mut gemm = S::zero();
            for step in &plan.steps {
                let c: S = step_compute(step, scenario, sl, hw);
                if step.kind.is_some() {
                    gemm = gemm + c.clone();
                }
                let end = t.clone() + c;
                tl.push("compute", Role::Compute, &step.tag, t, end.clone(), step.bytes, None);
                t = end;
            }
            Ok(PrefillResult { scenario, sl, ttft: t, timeline: tl, copy_bytes: 0, smc_seconds: S::zero(), gemm_seconds: gemm })
        }
    }
}

fn check_buffers(plan: &PrefillPlan, model: &ModelSpec) -> Result<(), RuntimeError> {
    let capacity = model.buffer_unit_bytes();
    match plan.units.iter().find(|u| u.bytes > capacity) {
        Some(u) => Err(RuntimeError::BufferTooSmall { unit: u.tag.clone(), bytes: u.bytes, capacity }),
        None => Ok(()),
    }
}

/// Serial copy then compute for every GEMM.
fn build_owr_schedule<S: Scalar>(
    plan: &PrefillPlan,
    model: &ModelSpec,
    hw: &HardwareSpec,
    sl: u64,
) -> Result<PrefillResult<S>, RuntimeError> {
    check_buffers(plan, model)?;
    let agents = ScenarioKind::SOwr.copy_agents();
    let mut tl = Timeline::new();
    let mut t = S::zero();
    let (mut smc, mut gemm) = (S::zero(), S::zero());
    for step in &plan.steps {
        if step.kind.is_some() {
            let k: S = smc_seconds(step.bytes, agents, hw)?;
            smc = smc + k.clone();
            let end = t.clone() + k;
            copy_segments(&mut tl, agents, &step.tag, &t, &end, step.bytes, 0);
            t = end;
        }
        let c: S = step_compute(step, ScenarioKind::SOwr, sl, hw);
        if step.kind.is_some() {
            gemm = gemm + c.clone();
        }
        let end = t.clone() + c;
        tl.push("compute", Role::Compute, &step.tag, t, end.clone(), step.bytes, step.kind.map(|_| 0));
        t = end;
    }
    Ok(PrefillResult {
        scenario: ScenarioKind::SOwr,
        sl,
        ttft: t,
        timeline: tl,
        copy_bytes: plan.total_bytes(),
        smc_seconds: smc,
        gemm_seconds: gemm,
    })
}

/// Copy chunk per step: (unit being loaded, bytes).
fn copy_chunks(plan: &PrefillPlan) -> Vec<Option<(usize, u64)>> {
    let mut chunks = vec![None; plan.steps.len()];
    for (u, unit) in plan.units.iter().enumerate() {
        let Some(next) = plan.units.get(u + 1) else { continue };
        let n = unit.steps.len() as u64;
        for (i, &s) in unit.steps.iter().enumerate() {
            let i = i as u64;
            chunks[s] = Some((u + 1, next.bytes / n + u64::from(i < next.bytes % n)));
        }
    }
    chunks
}

/// Double-buffered schedule. Unit 0 is preloaded; while unit `u` computes,
/// unit `u + 1` is copied into the other buffer. When unit `u` feeds several
/// GEMMs the next unit is split evenly over them; host steps carry no copy.
/// Every step ends at a barrier `max(compute end, copy end)`.
pub fn build_ddb_schedule<S: Scalar>(
    plan: &PrefillPlan,
    model: &ModelSpec,
    hw: &HardwareSpec,
    sl: u64,
) -> Result<PrefillResult<S>, RuntimeError> {
    if sl == 0 {
        return Err(RuntimeError::EmptyInput);
    }
    check_buffers(plan, model)?;
    let agents = ScenarioKind::SDdb.copy_agents();
    let buffer_of = |u: usize| (u % 2) as u32;
    let mut tl = Timeline::new();
    let (mut smc, mut gemm) = (S::zero(), S::zero());
    let mut copy_bytes = 0;
    let mut t = S::zero();

    if let Some(first) = plan.units.first() {
        let k: S = smc_seconds(first.bytes, agents, hw)?;
        smc = smc + k.clone();
        copy_bytes += first.bytes;
        copy_segments(&mut tl, agents, &format!("{}.preload", first.tag), &t, &k, first.bytes, buffer_of(0));
        t = k;
    }

    let chunks = copy_chunks(plan);

    for (s, step) in plan.steps.iter().enumerate() {
        let c: S = step_compute(step, ScenarioKind::SDdb, sl, hw);
        if step.kind.is_some() {
            gemm = gemm + c.clone();
        }
        let compute_end = t.clone() + c;
        tl.push("compute", Role::Compute, &step.tag, t.clone(), compute_end.clone(), step.bytes, step.unit.map(buffer_of));
        let mut end = compute_end;
        if let Some((target, bytes)) = chunks[s] {
            let k: S = smc_seconds(bytes, agents, hw)?;
            smc = smc + k.clone();
            copy_bytes += bytes;
            let copy_end = t.clone() + k;
            let label = format!("{}<-{}", step.tag, plan.units[target].tag);
            copy_segments(&mut tl, agents, &label, &t, &copy_end, bytes, buffer_of(target));
            end = S::max_of(end, copy_end);
        }
        t = end;
    }
    Ok(PrefillResult { scenario: ScenarioKind::SDdb, sl, ttft: t, timeline: tl, copy_bytes, smc_seconds: smc, gemm_seconds: gemm })
}

/// Smallest SL in `1..=max_sl` at which the double-buffered schedule
/// never waits on a copy after the preload.
pub fn hiding_crossover(model: &ModelSpec, hw: &HardwareSpec, max_sl: u64) -> Result<Option<u64>, RuntimeError> {
    let plan = PrefillPlan::new(model);
    let agents = ScenarioKind::SDdb.copy_agents();
    let copies: Vec<(usize, f64)> = copy_chunks(&plan)
        .iter()
        .enumerate()
        .filter_map(|(s, c)| c.map(|(_, bytes)| (s, bytes)))
        .map(|(s, bytes)| Ok((s, smc_seconds::<f64>(bytes, agents, hw)?)))
        .collect::<Result<_, RuntimeError>>()?;
    Ok((1..=max_sl).find(|&sl| {
        copies.iter().all(|&(s, copy)| step_compute::<f64>(&plan.steps[s], ScenarioKind::SDdb, sl, hw) >= copy)
    }))
}

/// Prefill time in units of one weight stream.
pub fn analytical_ttft(scenario: ScenarioKind, sl: u64, flop_per_byte: u64) -> Ratio<i64> {
    let g = gemm_units(sl, flop_per_byte);
    match scenario {
        ScenarioKind::Wd | ScenarioKind::FacilO | ScenarioKind::CGemm => g,
        ScenarioKind::SOwr => g + smc_units(),
        ScenarioKind::SDdb => g.max(smc_units()),
        ScenarioKind::NcGemm => g.max(Ratio::from_integer(sl as i64)),
    }
}

/// Prefill overhead relative to the single-copy oracle, percent half-up.
pub fn analytical_overhead_pct(scenario: ScenarioKind, sl: u64, flop_per_byte: u64) -> i64 {
    percent_half_up(analytical_ttft(scenario, sl, flop_per_byte), analytical_ttft(ScenarioKind::FacilO, sl, flop_per_byte))
}

/// Weight bytes streamed per decoded token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeStreams {
    pub host_bytes: u64,
    pub pim_bytes: u64,
}

impl DecodeStreams {
    pub fn bytes_for(&self, scenario: ScenarioKind) -> u64 {
        if scenario.uses_pim() {
            self.pim_bytes
        } else {
            self.host_bytes
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult<S> {
    pub token_seconds: S,
    pub tps: f64,
}

pub fn run_decode<S: Scalar>(scenario: ScenarioKind, streams: &DecodeStreams, hw: &HardwareSpec) -> DecodeResult<S> {
    let token_seconds: S = decode_token_seconds(streams.bytes_for(scenario), hw, scenario.uses_pim());
    let tps = 1.0 / token_seconds.to_real();
    DecodeResult { token_seconds, tps }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EndToEnd<S> {
    pub scenario: ScenarioKind,
    pub in_len: u64,
    pub out_len: u64,
    pub ttft: S,
    pub token_seconds: S,
    pub decode_seconds: S,
    pub total: S,
    pub speedup_vs_c_gemm: f64,
}

pub fn run_end_to_end<S: Scalar>(
    scenario: ScenarioKind,
    model: &ModelSpec,
    streams: &DecodeStreams,
    hw: &HardwareSpec,
    in_len: u64,
    out_len: u64,
) -> Result<EndToEnd<S>, RuntimeError> {
    let total_for = |kind| -> Result<(S, S, S), RuntimeError> {
        let ttft = run_prefill::<S>(kind, model, hw, in_len)?.ttft;
        let token = run_decode::<S>(kind, streams, hw).token_seconds;
        let decode = token.clone() * S::from_count(out_len);
        Ok((ttft, token, decode))
    };
    let (ttft, token_seconds, decode_seconds) = total_for(scenario)?;
    let total = ttft.clone() + decode_seconds.clone();
    let (base_ttft, _, base_decode) =
        if scenario == ScenarioKind::CGemm { (ttft.clone(), S::zero(), decode_seconds.clone()) } else { total_for(ScenarioKind::CGemm)? };
    let baseline = base_ttft + base_decode;
    Ok(EndToEnd {
        scenario,
        in_len,
        out_len,
        ttft,
        token_seconds,
        decode_seconds,
        speedup_vs_c_gemm: baseline.to_real() / total.to_real(),
        total,
    })
}

/// End-to-end results for every scenario over an input/output length grid.
pub fn speedup_grid<S: Scalar>(
    model: &ModelSpec,
    streams: &DecodeStreams,
    hw: &HardwareSpec,
    in_lens: &[u64],
    out_lens: &[u64],
) -> Result<Vec<EndToEnd<S>>, RuntimeError> {
    let mut out = Vec::new();
    for &i in in_lens {
        for &o in out_lens {
            for kind in ScenarioKind::ALL {
                out.push(run_end_to_end(kind, model, streams, hw, i, o)?);
            }
        }
    }
    Ok(out)
}
