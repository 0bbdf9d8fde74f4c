//! Seeded GEMV battery comparing the PIM engine with a host GEMV.

use half::bf16;
use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::address_map::{AddressMap, DramGeometry};
use crate::layout::{PlacementPolicy, WeightMatrix};
use crate::memory::{Attribute, CacheConfig};
use crate::pim::{
    host_gemv, verify_trigger_integrity, EngineFault, GemvJob, GemvOptions, IntegrityReport, IntegrityStatus, PimError,
    PimTestbed,
};
use crate::scalar::Scalar;

/// Bound on `max |pim - oracle| / max |oracle|` in BF16 mode.
pub const BF16_REL_TOLERANCE: f64 = 1.0 / 128.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// Rational accumulation; must match the host bit-for-bit.
    Exact,
    /// BF16 operands, 32-bit float accumulation, BF16 outputs.
    Bf16,
}

#[derive(Debug, Clone, Copy)]
pub struct BatteryConfig {
    pub seed: u64,
    pub jobs: u64,
    pub max_m: u64,
    pub max_k: u64,
    pub precision: Precision,
    pub cacheable_weights: bool,
    pub fault: Option<EngineFault>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 100,
            max_m: 512,
            max_k: 1024,
            precision: Precision::Exact,
            cacheable_weights: false,
            fault: None,
        }
    }
}

/// Geometry of the battery testbed: two channels of 16 banks.
pub fn battery_map() -> AddressMap {
    let g = DramGeometry { channels: 2, rows_per_bank: 2048, ..DramGeometry::default() };
    AddressMap::host_interleaved(g).expect("valid battery map")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct JobSpec {
    pub index: u64,
    pub m: u64,
    pub k: u64,
    pub active_banks: u64,
    pub active_channels: u64,
}

fn rng_for(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn log_uniform(rng: &mut ChaCha8Rng, max: u64) -> u64 {
    let x: f64 = rng.gen_range(0.0..=(max as f64).ln());
    (x.exp().round() as u64).clamp(1, max)
}

pub fn job_spec(cfg: &BatteryConfig, index: u64) -> JobSpec {
    let mut rng = rng_for(cfg.seed, index);
    JobSpec {
        index,
        m: log_uniform(&mut rng, cfg.max_m),
        k: log_uniform(&mut rng, cfg.max_k),
        active_banks: 1 << rng.gen_range(0..=4),
        active_channels: rng.gen_range(1..=2),
    }
}

/// Weights and input of a job. Exact mode draws small dyadic values so
/// rational sums stay within 64-bit numerators.
pub fn job_data(cfg: &BatteryConfig, spec: &JobSpec) -> (WeightMatrix, Vec<bf16>) {
    let mut rng = rng_for(cfg.seed ^ 0x5eed_da7a, spec.index);
    let draw = |rng: &mut ChaCha8Rng| match cfg.precision {
        Precision::Exact => bf16::from_f32(rng.gen_range(-64i32..=64) as f32 / (1 << rng.gen_range(0..=4)) as f32),
        Precision::Bf16 => bf16::from_f32(rng.gen_range(-1.0f32..1.0)),
    };
    let w = (0..spec.m * spec.k).map(|_| draw(&mut rng)).collect();
    let x = (0..spec.k).map(|_| draw(&mut rng)).collect();
    (WeightMatrix::host_friendly(spec.m, spec.k, w).expect("shape matches data"), x)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobOutcome {
    pub spec: JobSpec,
    pub ok: bool,
    /// First output row that disagrees with the host.
    pub first_bad_m: Option<u64>,
    pub rel_err: f64,
    pub integrity: IntegrityReport,
}

fn run_typed<S: Scalar>(
    cfg: &BatteryConfig,
    spec: &JobSpec,
    w: &WeightMatrix,
    x: &[bf16],
) -> Result<(Vec<S>, IntegrityReport), PimError> {
    let cache = CacheConfig::default();
    let mut bed = PimTestbed::<S>::new(battery_map(), cache, spec.k)?;
    let policy = PlacementPolicy { active_banks: spec.active_banks, active_channels: spec.active_channels };
    let attribute = if cfg.cacheable_weights { Attribute::Cacheable } else { Attribute::NonCacheable };
    let placement = bed.stage_weights(w, policy, attribute)?;
    let job = GemvJob { placement, input: x.to_vec() };
    let options = GemvOptions { allow_cacheable_weights: cfg.cacheable_weights, fault: cfg.fault };
    let mut run = bed.run(&job, options)?;
    if cfg.cacheable_weights {
        run = bed.run(&job, options)?;
    }
    let integrity = verify_trigger_integrity(&job, &run, cache.line_bytes);
    Ok((run.output, integrity))
}

pub fn run_job(cfg: &BatteryConfig, index: u64) -> Result<JobOutcome, PimError> {
    let spec = job_spec(cfg, index);
    let (w, x) = job_data(cfg, &spec);
    let (first_bad_m, rel_err, integrity) = match cfg.precision {
        Precision::Exact => {
            let (out, integrity) = run_typed::<Ratio<i64>>(cfg, &spec, &w, &x)?;
            let host = host_gemv::<Ratio<i64>>(&w, &x);
            let bad = out.iter().zip(&host).position(|(a, b)| a != b).map(|m| m as u64);
            (bad, if bad.is_some() { f64::INFINITY } else { 0.0 }, integrity)
        }
        Precision::Bf16 => {
            let (out, integrity) = run_typed::<f32>(cfg, &spec, &w, &x)?;
            let wide: Vec<f64> = (0..spec.m)
                .map(|m| x.iter().enumerate().map(|(k, v)| w.at(m, k as u64).to_f64() * v.to_f64()).sum())
                .collect();
            let scale = wide.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let errs: Vec<f64> = out.iter().zip(&wide).map(|(p, o)| (*p as f64 - o).abs()).collect();
            let max_err = errs.iter().fold(0.0f64, |a, e| a.max(*e));
            let rel = if scale == 0.0 { max_err } else { max_err / scale };
            let bad = (rel > BF16_REL_TOLERANCE)
                .then(|| errs.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(m, _)| m as u64))
                .flatten();
            (bad, rel, integrity)
        }
    };
    let ok = first_bad_m.is_none() && integrity.status == IntegrityStatus::Ok;
    Ok(JobOutcome { spec, ok, first_bad_m, rel_err, integrity })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatteryReport {
    pub seed: u64,
    pub precision: Precision,
    pub cacheable_weights: bool,
    pub jobs: u64,
    pub passed: u64,
    pub max_rel_err: f64,
    pub integrity_failures: u64,
    /// `(job index, first bad output row)` of the first failing job.
    pub first_failure: Option<(u64, Option<u64>)>,
    pub failures: Vec<JobOutcome>,
}

impl BatteryReport {
    pub fn ok(&self) -> bool {
        self.passed == self.jobs
    }
}

/// Runs every job; results do not depend on the rayon pool size.
pub fn run_battery(cfg: &BatteryConfig) -> Result<BatteryReport, PimError> {
    let outcomes: Vec<JobOutcome> = (0..cfg.jobs).into_par_iter().map(|i| run_job(cfg, i)).collect::<Result<_, _>>()?;
    let failures: Vec<JobOutcome> = outcomes.iter().filter(|o| !o.ok).cloned().collect();
    Ok(BatteryReport {
        seed: cfg.seed,
        precision: cfg.precision,
        cacheable_weights: cfg.cacheable_weights,
        jobs: cfg.jobs,
        passed: cfg.jobs - failures.len() as u64,
        max_rel_err: outcomes.iter().map(|o| o.rel_err).fold(0.0, f64::max),
        integrity_failures: outcomes.iter().filter(|o| o.integrity.status != IntegrityStatus::Ok).count() as u64,
        first_failure: failures.first().map(|f| (f.spec.index, f.first_bad_m)),
        failures,
    })
}
