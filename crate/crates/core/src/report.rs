//! Run reports and parameter sweeps.

use half::bf16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::RunConfig;
use crate::cost::{
    capacity_report, rearrangement_overhead_table, smc_seconds, CapacityInputs, CapacityRow, CostError, CostProfile,
    OverheadRow, ScenarioKind,
};
use crate::layout::{padded_size, WeightMatrix};
use crate::memory::{Attribute, CacheStats, TraceRecord};
use crate::pim::{verify_trigger_integrity, GemvJob, GemvOptions, IntegrityReport, PimError, PimTestbed};
use crate::runtime::{
    analytical_overhead_pct, analytical_ttft, hiding_crossover, run_end_to_end, run_prefill, DecodeStreams, RuntimeError,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Pim(#[from] PimError),
    #[error("unknown sweep axis `{0}` (expected in_len, out_len or scenario)")]
    Axis(String),
    #[error("sweep value `{value}` is not valid for axis {axis}")]
    Value { axis: &'static str, value: String },
    #[error("sweep needs at least one value")]
    EmptySweep,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One grid point. Times are seconds in calibrated mode and units of one
/// weight stream (`t`) in analytical mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub scenario: ScenarioKind,
    pub mode: CostProfile,
    pub in_len: u64,
    pub out_len: u64,
    pub unit: &'static str,
    pub ttft: f64,
    pub token_time: f64,
    pub tps: f64,
    pub decode_time: f64,
    pub total: f64,
    pub speedup_vs_c_gemm: f64,
    /// Analytical prefill overhead over FACIL_O, percent.
    pub overhead_pct: Option<i64>,
}

pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "mode",
    "in_len",
    "out_len",
    "unit",
    "ttft",
    "token_time",
    "tps",
    "decode_time",
    "total",
    "speedup_vs_c_gemm",
    "overhead_pct",
];

pub fn decode_streams(cfg: &RunConfig) -> DecodeStreams {
    let padding = padded_size(&cfg.model, &cfg.map.geometry, &cfg.map.policy());
    DecodeStreams { host_bytes: padding.host_bytes, pim_bytes: padding.padded_bytes }
}

pub fn result_row(cfg: &RunConfig, scenario: ScenarioKind, in_len: u64, out_len: u64) -> Result<ResultRow, ReportError> {
    match cfg.run.mode {
        CostProfile::Calibrated => {
            let e = run_end_to_end::<f64>(scenario, &cfg.model, &decode_streams(cfg), &cfg.hw, in_len, out_len)?;
            Ok(ResultRow {
                scenario,
                mode: cfg.run.mode,
                in_len,
                out_len,
                unit: "s",
                ttft: e.ttft,
                token_time: e.token_seconds,
                tps: 1.0 / e.token_seconds,
                decode_time: e.decode_seconds,
                total: e.total,
                speedup_vs_c_gemm: e.speedup_vs_c_gemm,
                overhead_pct: None,
            })
        }
        CostProfile::Analytical => {
            let fpb = cfg.hw.table_flop_per_byte;
            let token = |k: ScenarioKind| if k.uses_pim() { 1.0 / cfg.hw.pim_bw_multiplier } else { 1.0 };
            let total = |k: ScenarioKind| {
                let units = analytical_ttft(k, in_len, fpb);
                let ttft = *units.numer() as f64 / *units.denom() as f64;
                (ttft, ttft + out_len as f64 * token(k))
            };
            let (ttft, all) = total(scenario);
            Ok(ResultRow {
                scenario,
                mode: cfg.run.mode,
                in_len,
                out_len,
                unit: "t",
                ttft,
                token_time: token(scenario),
                tps: 1.0 / token(scenario),
                decode_time: out_len as f64 * token(scenario),
                total: all,
                speedup_vs_c_gemm: total(ScenarioKind::CGemm).1 / all,
                overhead_pct: Some(analytical_overhead_pct(scenario, in_len, fpb)),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrefillSummary {
    pub ttft_s: f64,
    pub gemm_s: f64,
    pub smc_s: f64,
    pub copy_bytes: u64,
    /// Layers where the compute agent waited for a copy.
    pub copy_critical_layers: Vec<String>,
    /// Smallest SL at which double buffering never waits on a copy.
    pub hiding_crossover_sl: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CopyBandwidth {
    pub calibrated_2agents_gbs: f64,
    pub calibrated_4agents_gbs: f64,
    /// Three transactions per byte with slow non-cacheable reads.
    pub transaction_estimate_gbs: f64,
    pub full_copy_2agents_s: f64,
    pub full_copy_transaction_estimate_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CapacitySummary {
    pub host_bytes: u64,
    pub padded_bytes: u64,
    pub padding_bytes: u64,
    pub padding_fraction: f64,
    pub scenarios: Vec<CapacityRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegritySummary {
    pub out_dim: u64,
    pub in_dim: u64,
    /// Second of two back-to-back GEMVs with non-cacheable weights.
    pub non_cacheable: IntegrityReport,
    /// Same with cacheable weights.
    pub cacheable: IntegrityReport,
    pub cache: CacheStats,
    pub prefetches: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub result: ResultRow,
    pub scenarios: Vec<ResultRow>,
    pub prefill: Option<PrefillSummary>,
    pub overhead_table: Option<Vec<OverheadRow>>,
    pub capacity: CapacitySummary,
    pub copy_bandwidth: CopyBandwidth,
    pub integrity: IntegritySummary,
}

/// Everything `run` emits besides the report itself.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub report: RunReport,
    pub timeline: serde_json::Value,
    pub trace: Vec<TraceRecord>,
}

fn integrity_job(cfg: &RunConfig) -> (WeightMatrix, Vec<bf16>) {
    let policy = cfg.map.policy();
    let m = cfg.map.geometry.elements_per_burst() * policy.units();
    let k = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut draw = || bf16::from_f32(rng.gen_range(-8i32..=8) as f32);
    let w = (0..m * k).map(|_| draw()).collect();
    let x = (0..k).map(|_| draw()).collect();
    (WeightMatrix::host_friendly(m, k, w).expect("shape matches data"), x)
}

/// Runs the integrity GEMV twice per attribute on the configured map,
/// cache and prefetcher.
pub fn integrity_summary(cfg: &RunConfig) -> Result<(IntegritySummary, Vec<TraceRecord>), ReportError> {
    let map = cfg.map.address_map().map_err(|e| PimError::Layout(e.into()))?;
    let (w, x) = integrity_job(cfg);
    let mut trace = Vec::new();
    let mut second_run = |attribute| -> Result<(IntegrityReport, CacheStats, u64), ReportError> {
        let mut bed = PimTestbed::<f32>::new(map.clone(), cfg.memory.cache, w.in_dim)?;
        bed.mem.set_prefetch(cfg.memory.prefetch);
        let placement = bed.stage_weights(&w, cfg.map.policy(), attribute)?;
        let job = GemvJob { placement, input: x.clone() };
        let options = GemvOptions { allow_cacheable_weights: true, fault: None };
        bed.run(&job, options)?;
        let run = bed.run(&job, options)?;
        trace.extend_from_slice(bed.mem.trace());
        let report = verify_trigger_integrity(&job, &run, cfg.memory.cache.line_bytes);
        Ok((report, bed.mem.cache_stats(), bed.mem.prefetch_count()))
    };
    let (non_cacheable, _, _) = second_run(Attribute::NonCacheable)?;
    let (cacheable, cache, prefetches) = second_run(Attribute::Cacheable)?;
    Ok((IntegritySummary { out_dim: w.out_dim, in_dim: w.in_dim, non_cacheable, cacheable, cache, prefetches }, trace))
}

pub fn run_report(cfg: &RunConfig) -> Result<RunArtifacts, ReportError> {
    let (in_len, out_len) = (cfg.run.in_len, cfg.run.out_len);
    let scenarios: Vec<ResultRow> = ScenarioKind::ALL
        .par_iter()
        .map(|&k| result_row(cfg, k, in_len, out_len))
        .collect::<Result<_, _>>()?;
    let result = scenarios.iter().find(|r| r.scenario == cfg.run.scenario).cloned().expect("all scenarios present");

    let (prefill, timeline) = match cfg.run.mode {
        CostProfile::Calibrated => {
            let p = run_prefill::<f64>(cfg.run.scenario, &cfg.model, &cfg.hw, in_len)?;
            let copy_critical_layers = p
                .timeline
                .layer_critical_paths()
                .into_iter()
                .filter(|l| l.copy_is_critical())
                .map(|l| l.layer)
                .collect();
            let summary = PrefillSummary {
                ttft_s: p.ttft,
                gemm_s: p.gemm_seconds,
                smc_s: p.smc_seconds,
                copy_bytes: p.copy_bytes,
                copy_critical_layers,
                hiding_crossover_sl: hiding_crossover(&cfg.model, &cfg.hw, 4096)?,
            };
            (Some(summary), p.timeline.to_json())
        }
        CostProfile::Analytical => (None, serde_json::Value::Array(Vec::new())),
    };

    let padding = padded_size(&cfg.model, &cfg.map.geometry, &cfg.map.policy());
    let capacity = CapacitySummary {
        host_bytes: padding.host_bytes,
        padded_bytes: padding.padded_bytes,
        padding_bytes: padding.padding_bytes,
        padding_fraction: padding.padding_fraction,
        scenarios: capacity_report(&CapacityInputs::from_model(&cfg.model, padding.padded_bytes)),
    };

    let estimate = cfg.hw.smc_bw_transaction_estimate();
    let copy_bandwidth = CopyBandwidth {
        calibrated_2agents_gbs: cfg.hw.smc_bw_2agents,
        calibrated_4agents_gbs: cfg.hw.smc_bw_4agents,
        transaction_estimate_gbs: estimate,
        full_copy_2agents_s: smc_seconds::<f64>(padding.host_bytes, 2, &cfg.hw)?,
        full_copy_transaction_estimate_s: padding.host_bytes as f64 / (estimate * 1e9),
    };

    let (integrity, trace) = integrity_summary(cfg)?;
    let overhead_table = (cfg.run.mode == CostProfile::Analytical).then(|| rearrangement_overhead_table(&cfg.hw));
    let report = RunReport {
        config: cfg.clone(),
        result,
        scenarios,
        prefill,
        overhead_table,
        capacity,
        copy_bandwidth,
        integrity,
    };
    Ok(RunArtifacts { report, timeline, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    InLen,
    OutLen,
    Scenario,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, ReportError> {
        match s {
            "in_len" => Ok(Self::InLen),
            "out_len" => Ok(Self::OutLen),
            "scenario" => Ok(Self::Scenario),
            other => Err(ReportError::Axis(other.to_string())),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::InLen => "in_len",
            Self::OutLen => "out_len",
            Self::Scenario => "scenario",
        }
    }
}

/// One row per value along `axis`, other parameters from `cfg`.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<ResultRow>, ReportError> {
    if values.is_empty() {
        return Err(ReportError::EmptySweep);
    }
    let bad = |v: &String| ReportError::Value { axis: axis.name(), value: v.clone() };
    let points: Vec<(ScenarioKind, u64, u64)> = values
        .iter()
        .map(|v| {
            let (s, i, o) = (cfg.run.scenario, cfg.run.in_len, cfg.run.out_len);
            Ok(match axis {
                SweepAxis::InLen => (s, v.parse().ok().filter(|&n: &u64| n > 0).ok_or_else(|| bad(v))?, o),
                SweepAxis::OutLen => (s, i, v.parse().map_err(|_| bad(v))?),
                SweepAxis::Scenario => (ScenarioKind::parse(v).ok_or_else(|| bad(v))?, i, o),
            })
        })
        .collect::<Result<_, ReportError>>()?;
    points.par_iter().map(|&(s, i, o)| result_row(cfg, s, i, o)).collect()
}

pub fn write_csv<W: std::io::Write>(rows: &[ResultRow], out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
