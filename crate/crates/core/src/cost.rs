//! Latency, bandwidth and capacity models.
//!
//! Two profiles share one set of formulas:
//!
//! * `Analytical` counts time in units of `t`, one full weight stream from
//!   DRAM. GEMM costs `max(1, SL / FLOP_per_byte)` units and a swizzled copy
//!   costs three DRAM transactions.
//! * `Calibrated` works in seconds from a [`HardwareSpec`].

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelSpec;
use crate::scalar::Scalar;

const GIGA: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("hw.{field} must be > 0 (got {value})")]
    NonPositive { field: &'static str, value: f64 },
    #[error("hw.gemm_effective_gflops ({effective}) exceeds hw.peak_gflops ({peak})")]
    EffectiveAbovePeak { effective: f64, peak: f64 },
    #[error("no copy bandwidth for {agents} agents; set hw.smc_bw_override")]
    UnsupportedAgents { agents: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostProfile {
    Analytical,
    #[default]
    Calibrated,
}

/// Device parameters. Bandwidths in GB/s (1e9 bytes), compute in GFLOP/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub name: String,
    pub peak_gflops: f64,
    pub dram_bw: f64,
    pub flop_per_byte: f64,
    /// Arithmetic intensity used by the t-unit table.
    pub table_flop_per_byte: u64,
    pub pim_bw_multiplier: f64,
    pub gemm_effective_gflops: f64,
    pub smc_bw_2agents: f64,
    pub smc_bw_4agents: f64,
    /// Copy bandwidth for any other agent count.
    #[serde(default)]
    pub smc_bw_override: Option<f64>,
    /// Slowdown of non-cacheable reads relative to cacheable ones.
    pub nc_read_penalty: f64,
    /// Effective weight bandwidth of a host GEMM reading non-cacheable
    /// weights with no reuse.
    pub nc_gemm_bw: f64,
    /// Seconds per decoded token outside the weight stream.
    pub host_overhead_per_token: f64,
    /// Seconds per layer for attention, normalization and activations.
    #[serde(default)]
    pub host_layer_latency: f64,
}

impl Default for HardwareSpec {
    fn default() -> Self {
        Self::s24plus()
    }
}

impl HardwareSpec {
    pub fn s24plus() -> Self {
        Self {
            name: "s24plus".into(),
            peak_gflops: 321.0,
            dram_bw: 68.264,
            flop_per_byte: 4.7,
            table_flop_per_byte: 4,
            pim_bw_multiplier: 8.0,
            gemm_effective_gflops: 107.0,
            smc_bw_2agents: 2.87,
            smc_bw_4agents: 4.25,
            smc_bw_override: None,
            nc_read_penalty: 2.0,
            nc_gemm_bw: 2.62,
            host_overhead_per_token: 1e-3,
            host_layer_latency: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let positive = [
            ("peak_gflops", self.peak_gflops),
            ("dram_bw", self.dram_bw),
            ("flop_per_byte", self.flop_per_byte),
            ("table_flop_per_byte", self.table_flop_per_byte as f64),
            ("pim_bw_multiplier", self.pim_bw_multiplier),
            ("gemm_effective_gflops", self.gemm_effective_gflops),
            ("smc_bw_2agents", self.smc_bw_2agents),
            ("smc_bw_4agents", self.smc_bw_4agents),
            ("nc_read_penalty", self.nc_read_penalty),
            ("nc_gemm_bw", self.nc_gemm_bw),
        ];
        for (field, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CostError::NonPositive { field, value });
            }
        }
        for (field, value) in [
            ("host_overhead_per_token", self.host_overhead_per_token),
            ("host_layer_latency", self.host_layer_latency),
        ] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(CostError::NonPositive { field, value });
            }
        }
        if let Some(value) = self.smc_bw_override {
            if !(value > 0.0 && value.is_finite()) {
                return Err(CostError::NonPositive { field: "smc_bw_override", value });
            }
        }
        if self.gemm_effective_gflops > self.peak_gflops {
            return Err(CostError::EffectiveAbovePeak { effective: self.gemm_effective_gflops, peak: self.peak_gflops });
        }
        Ok(())
    }

    /// Copy bandwidth in GB/s for a given number of copy agents.
    pub fn smc_bw(&self, agents: u32) -> Result<f64, CostError> {
        match (agents, self.smc_bw_override) {
            (_, Some(bw)) => Ok(bw),
            (2, None) => Ok(self.smc_bw_2agents),
            (4, None) => Ok(self.smc_bw_4agents),
            _ => Err(CostError::UnsupportedAgents { agents }),
        }
    }

    /// Copy bandwidth implied by three transactions per byte with
    /// non-cacheable reads `nc_read_penalty` times slower than cached ones.
    pub fn smc_bw_transaction_estimate(&self) -> f64 {
        self.dram_bw / (self.nc_read_penalty * 2.0)
    }
}

fn seconds_per_byte<S: Scalar>(gbs: f64) -> S {
    S::one() / (S::from_real(gbs) * S::from_real(GIGA))
}

/// Host GEMM time: bandwidth-bound or compute-bound, whichever is slower.
pub fn gemm_seconds<S: Scalar>(bytes: u64, params: u64, sl: u64, hw: &HardwareSpec) -> S {
    let stream = S::from_count(bytes) * seconds_per_byte::<S>(hw.dram_bw);
    let flops = S::from_count(2) * S::from_count(sl) * S::from_count(params);
    let compute = flops / (S::from_real(hw.gemm_effective_gflops) * S::from_real(GIGA));
    S::max_of(stream, compute)
}

/// Host GEMM reading non-cacheable weights: each token re-streams the weights.
pub fn nc_gemm_seconds<S: Scalar>(bytes: u64, params: u64, sl: u64, hw: &HardwareSpec) -> S {
    let reread = S::from_count(bytes) * S::from_count(sl) * seconds_per_byte::<S>(hw.nc_gemm_bw);
    S::max_of(gemm_seconds(bytes, params, sl, hw), reread)
}

pub fn smc_seconds<S: Scalar>(bytes: u64, agents: u32, hw: &HardwareSpec) -> Result<S, CostError> {
    Ok(S::from_count(bytes) * seconds_per_byte::<S>(hw.smc_bw(agents)?))
}

/// Weight stream of one decoded token.
pub fn decode_stream_seconds<S: Scalar>(stream_bytes: u64, hw: &HardwareSpec, use_pim: bool) -> S {
    let bw = if use_pim { hw.dram_bw * hw.pim_bw_multiplier } else { hw.dram_bw };
    S::from_count(stream_bytes) * seconds_per_byte::<S>(bw)
}

pub fn decode_token_seconds<S: Scalar>(stream_bytes: u64, hw: &HardwareSpec, use_pim: bool) -> S {
    decode_stream_seconds::<S>(stream_bytes, hw, use_pim) + S::from_real(hw.host_overhead_per_token)
}

/// GEMM cost in units of `t`.
pub fn gemm_units(sl: u64, flop_per_byte: u64) -> Ratio<i64> {
    let r = Ratio::new(sl as i64, flop_per_byte as i64);
    if r < Ratio::from_integer(1) {
        Ratio::from_integer(1)
    } else {
        r
    }
}

/// Swizzled copy cost in units of `t`: read source, fill destination line,
/// write destination back.
pub fn smc_units() -> Ratio<i64> {
    Ratio::from_integer(3)
}

/// Percentage rounded half-up to an integer.
pub fn percent_half_up(num: Ratio<i64>, den: Ratio<i64>) -> i64 {
    let r = num * Ratio::from_integer(100) / den;
    (r + Ratio::new(1, 2)).floor().to_integer()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OverheadRow {
    pub input: String,
    pub sl: u64,
    pub gemm: Ratio<i64>,
    pub dram: Ratio<i64>,
    pub online: Ratio<i64>,
    pub sum: Ratio<i64>,
    pub sum_pct: i64,
    pub max: Ratio<i64>,
    pub max_pct: i64,
}

impl OverheadRow {
    pub fn new(input: impl Into<String>, sl: u64, flop_per_byte: u64) -> Self {
        let gemm = gemm_units(sl, flop_per_byte);
        let online = smc_units();
        let sum = gemm + online;
        let max = gemm.max(online);
        Self {
            input: input.into(),
            sl,
            gemm,
            dram: Ratio::from_integer(1),
            online,
            sum,
            sum_pct: percent_half_up(sum, gemm),
            max,
            max_pct: percent_half_up(max, gemm),
        }
    }
}

/// Rearrangement overhead across input lengths, one row per length band.
pub fn rearrangement_overhead_table(hw: &HardwareSpec) -> Vec<OverheadRow> {
    let fpb = hw.table_flop_per_byte;
    let mut rows = vec![OverheadRow::new(format!("1 - {fpb}"), fpb, fpb)];
    rows.extend([8u64, 16, 32, 64, 128, 192].into_iter().map(|sl| OverheadRow::new(sl.to_string(), sl, fpb)));
    rows
}

pub fn format_units(r: &Ratio<i64>) -> String {
    match (r.is_integer(), r.to_integer()) {
        (true, 1) => "t".into(),
        (true, n) => format!("{n}t"),
        (false, _) => format!("{}/{}t", r.numer(), r.denom()),
    }
}

/// Plain-text rendering of the overhead table.
pub fn render_overhead_table(rows: &[OverheadRow]) -> String {
    let mut out = String::from("Input  GEMM  DRAM  Online  SUM  SUM%  MAX  MAX%\n");
    for r in rows {
        out.push_str(&format!(
            "{:<6} {:<5} {:<5} {:<7} {:<4} {:<5} {:<4} {}%\n",
            r.input,
            format_units(&r.gemm),
            format_units(&r.dram),
            format_units(&r.online),
            format_units(&r.sum),
            format!("{}%", r.sum_pct),
            format_units(&r.max),
            r.max_pct
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ScenarioKind {
    Wd,
    FacilO,
    SDdb,
    SOwr,
    CGemm,
    NcGemm,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 6] = [
        ScenarioKind::Wd,
        ScenarioKind::FacilO,
        ScenarioKind::SDdb,
        ScenarioKind::SOwr,
        ScenarioKind::CGemm,
        ScenarioKind::NcGemm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::Wd => "WD",
            ScenarioKind::FacilO => "FACIL_O",
            ScenarioKind::SDdb => "S_DDB",
            ScenarioKind::SOwr => "S_OWR",
            ScenarioKind::CGemm => "C_GEMM",
            ScenarioKind::NcGemm => "NC_GEMM",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let norm = s.to_ascii_uppercase().replace('-', "_");
        Self::ALL.into_iter().find(|k| k.label() == norm)
    }

    /// Decode runs on PIM.
    pub fn uses_pim(self) -> bool {
        !matches!(self, ScenarioKind::CGemm | ScenarioKind::NcGemm)
    }

    /// Cacheable buffer units of `H x I` elements.
    pub fn buffer_units(self) -> u64 {
        match self {
            ScenarioKind::SDdb => 2,
            ScenarioKind::SOwr => 1,
            _ => 0,
        }
    }

    /// Copy agents used for swizzled copies.
    pub fn copy_agents(self) -> u32 {
        match self {
            ScenarioKind::SDdb => 2,
            ScenarioKind::SOwr => 4,
            _ => 0,
        }
    }
}

impl std::fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Byte inputs of the capacity model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CapacityInputs {
    pub host_bytes: u64,
    pub pim_bytes: u64,
    pub buffer_unit_bytes: u64,
}

impl CapacityInputs {
    pub fn from_model(model: &ModelSpec, pim_bytes: u64) -> Self {
        Self { host_bytes: model.host_bytes(), pim_bytes, buffer_unit_bytes: model.buffer_unit_bytes() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacityRow {
    pub scenario: ScenarioKind,
    pub weight_bytes: u64,
    pub padding_bytes: u64,
    pub buffer_bytes: u64,
    pub total_bytes: u64,
    /// WD total minus this total.
    pub savings_bytes: i64,
    /// Percent of the WD total; `None` when WD needs no memory.
    pub savings_pct: Option<f64>,
}

/// DRAM footprint per scenario.
pub fn capacity_report(inputs: &CapacityInputs) -> Vec<CapacityRow> {
    let padding = inputs.pim_bytes.saturating_sub(inputs.host_bytes);
    let wd = inputs.host_bytes + inputs.pim_bytes;
    ScenarioKind::ALL
        .into_iter()
        .map(|scenario| {
            let (weight_bytes, padding_bytes) = match scenario {
                ScenarioKind::Wd => (inputs.host_bytes + inputs.pim_bytes, padding),
                ScenarioKind::CGemm => (inputs.host_bytes, 0),
                _ => (inputs.pim_bytes, padding),
            };
            let buffer_bytes = scenario.buffer_units() * inputs.buffer_unit_bytes;
            let total_bytes = weight_bytes + buffer_bytes;
            let savings_bytes = wd as i64 - total_bytes as i64;
            CapacityRow {
                scenario,
                weight_bytes,
                padding_bytes,
                buffer_bytes,
                total_bytes,
                savings_bytes,
                savings_pct: (wd > 0).then(|| savings_bytes as f64 / wd as f64 * 100.0),
            }
        })
        .collect()
}
