//! Acceptance checks; prints one PASS/FAIL line per criterion.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use half::bf16;
use num_rational::Ratio;
use pimsim::check::{battery_map, run_battery, BatteryConfig, Precision, BF16_REL_TOLERANCE};
use pimsim::config::RunConfig;
use pimsim::cost::{
    capacity_report, decode_token_seconds, rearrangement_overhead_table, smc_seconds, CapacityInputs, HardwareSpec,
    ScenarioKind,
};
use pimsim::layout::{padded_size, PimPlacement, PlacementPolicy, WeightMatrix};
use pimsim::memory::{Attribute, CacheConfig, Op};
use pimsim::model::ModelSpec;
use pimsim::pim::{verify_trigger_integrity, GemvJob, GemvOptions, IntegrityStatus, PimTestbed};
use pimsim::report::{run_report, sweep, write_csv, SweepAxis};
use pimsim::runtime::{hiding_crossover, run_end_to_end, run_prefill, DecodeStreams};
use pimsim::ExactTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{memory_round_trip, placement_invariants, random_matrix, random_shape, shape_rng, RefCache};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn within(actual: f64, target: f64, tol: f64) -> bool {
    (actual - target).abs() <= tol
}

fn c1_overhead_table() -> Outcome {
    let start = Instant::now();
    let rows = rearrangement_overhead_table(&HardwareSpec::s24plus());
    let elapsed = start.elapsed();
    // input, GEMM, SUM, SUM%, MAX, MAX%
    let table: [(&str, i64, i64, i64, i64, i64); 7] = [
        ("1 - 4", 1, 4, 400, 3, 300),
        ("8", 2, 5, 250, 3, 150),
        ("16", 4, 7, 175, 4, 100),
        ("32", 8, 11, 138, 8, 100),
        ("64", 16, 19, 119, 16, 100),
        ("128", 32, 35, 109, 32, 100),
        ("192", 48, 51, 106, 48, 100),
    ];
    ensure!(rows.len() == table.len(), "{} rows", rows.len());
    for (r, &(input, gemm, sum, sum_pct, max, max_pct)) in rows.iter().zip(&table) {
        let int = Ratio::from_integer;
        let got = (r.input.as_str(), r.gemm, r.dram, r.online, r.sum, r.sum_pct, r.max, r.max_pct);
        let want = (input, int(gemm), int(1), int(3), int(sum), sum_pct, int(max), max_pct);
        ensure!(got == want, "row {input}: got {got:?}");
        ensure!(r.max <= r.sum, "row {input}: MAX > SUM");
        ensure!(r.gemm < r.online || r.max_pct == 100, "row {input}: MAX% {}", r.max_pct);
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok(format!("7 rows exact in {elapsed:?}"))
}

fn c2_capacity() -> Outcome {
    let mb = 1u64 << 20;
    let one_b = ModelSpec::llama32_1b();
    let three_b = ModelSpec::llama32_3b();
    let cases = [
        ("1B", 2_470_000_000u64, 80 * 1_000_000u64, one_b.buffer_unit_bytes(), 47.8, 48.5),
        ("3B", 6_400_000_000, 0, three_b.buffer_unit_bytes(), 49.4, 49.7),
    ];
    ensure!(one_b.buffer_unit_bytes() == 32 * mb, "1B buffer {}", one_b.buffer_unit_bytes());
    let mut detail = Vec::new();
    for (name, host, padding, buffer, ddb_expected, owr_expected) in cases {
        let rows = capacity_report(&CapacityInputs { host_bytes: host, pim_bytes: host + padding, buffer_unit_bytes: buffer });
        let pct = |k: ScenarioKind| rows.iter().find(|r| r.scenario == k).and_then(|r| r.savings_pct).unwrap();
        let wd = 2 * host + padding;
        let oracle = |buffers: u64| 100.0 * (1.0 - (host + padding + buffers * buffer) as f64 / wd as f64);
        let (ddb, owr) = (pct(ScenarioKind::SDdb), pct(ScenarioKind::SOwr));
        ensure!(within(ddb, oracle(2), 1e-9) && within(owr, oracle(1), 1e-9), "{name}: report disagrees with oracle");
        ensure!(within(ddb, ddb_expected, 0.5), "{name}: S_DDB saves {ddb:.2}%, expected {ddb_expected}%");
        ensure!(within(owr, owr_expected, 0.5), "{name}: S_OWR saves {owr:.2}%, expected {owr_expected}%");
        let total = |k: ScenarioKind| rows.iter().find(|r| r.scenario == k).unwrap().total_bytes;
        ensure!(total(ScenarioKind::SOwr) == total(ScenarioKind::SDdb) - buffer, "{name}: capacity identity");
        detail.push(format!("{name} {ddb:.2}%/{owr:.2}%"));
    }
    Ok(detail.join(", "))
}

fn c3_gemv_battery() -> Outcome {
    let start = Instant::now();
    let exact = run_battery(&BatteryConfig { seed: 2024, jobs: 1000, ..Default::default() }).map_err(|e| e.to_string())?;
    let bf = run_battery(&BatteryConfig { seed: 2024, jobs: 1000, precision: Precision::Bf16, ..Default::default() })
        .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(exact.ok(), "exact: {} of 1000 passed, first failure {:?}", exact.passed, exact.first_failure);
    ensure!(bf.ok(), "bf16: {} of 1000 passed, first failure {:?}", bf.passed, bf.first_failure);
    ensure!(bf.max_rel_err <= BF16_REL_TOLERANCE && BF16_REL_TOLERANCE == 2f64.powi(-7), "bf16 error {}", bf.max_rel_err);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("2x1000 jobs, bf16 max rel err {:.2e}, {elapsed:.1?}", bf.max_rel_err))
}

fn c4_layout_round_trip() -> Outcome {
    let mut rng = shape_rng(4);
    let mut ragged = 0;
    for i in 0..500 {
        let s = random_shape(&mut rng);
        let p = PimPlacement::new(s.map.clone(), s.policy, s.out_dim, s.in_dim, 0).map_err(|e| format!("shape {i}: {e}"))?;
        placement_invariants(&p).map_err(|e| format!("shape {i}: {e}"))?;
        let w = random_matrix(&mut rng, s.out_dim, s.in_dim);
        let back = memory_round_trip(&w, &p).map_err(|e| format!("shape {i}: {e}"))?;
        ensure!(back == w, "shape {i} ({} x {}) did not round trip", s.out_dim, s.in_dim);
        ragged += usize::from(!s.out_dim.is_multiple_of(16));
    }
    ensure!(ragged > 100, "only {ragged} ragged shapes");
    Ok(format!("500 shapes, {ragged} with ragged tails"))
}

fn c5_attribute_inconsistency() -> Outcome {
    let caches = [CacheConfig::default(), CacheConfig { capacity: 32 << 10, line_bytes: 64, ways: 4 }];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut detail = Vec::new();
    for (c, cache) in caches.into_iter().enumerate() {
        for _ in 0..3 {
            let (m, k) = (rng.gen_range(1..=512u64), rng.gen_range(1..=600u64));
            let policy = PlacementPolicy { active_banks: 1 << rng.gen_range(0..=4), active_channels: rng.gen_range(1..=2) };
            let data = (0..m * k).map(|_| bf16::from_f32(rng.gen_range(-4i32..=4) as f32)).collect();
            let w = WeightMatrix::host_friendly(m, k, data).unwrap();
            let mut x: Vec<bf16> = (0..k).map(|_| bf16::from_f32(rng.gen_range(-4i32..=4) as f32)).collect();
            for attribute in [Attribute::NonCacheable, Attribute::Cacheable] {
                let mut bed = PimTestbed::<f32>::new(battery_map(), cache, k).map_err(|e| e.to_string())?;
                let placement = bed.stage_weights(&w, policy, attribute).map_err(|e| e.to_string())?;
                let span = placement.base()..placement.base() + placement.span_bytes();
                let job = GemvJob { placement, input: x };
                let options = GemvOptions { allow_cacheable_weights: true, fault: None };
                let first = bed.run(&job, options).map_err(|e| e.to_string())?;
                let second = bed.run(&job, options).map_err(|e| e.to_string())?;
                if attribute == Attribute::NonCacheable {
                    for (n, run) in [&first, &second].into_iter().enumerate() {
                        ensure!(run.observed == job.expected_counts(), "non-cacheable run {n}: {:?}", run.observed);
                        let r = verify_trigger_integrity(&job, run, cache.line_bytes);
                        ensure!(r.status == IntegrityStatus::Ok, "non-cacheable run {n}: {:?}", r.status);
                    }
                } else {
                    let mut oracle = RefCache::new(&cache);
                    let mut warm_hits = 0;
                    for (n, run) in [&first, &second].into_iter().enumerate() {
                        for &(op, addr, bytes) in &run.commands {
                            let region = bed.mem.region_of(addr, bytes).map_err(|e| e.to_string())?;
                            if region.attribute == Attribute::NonCacheable {
                                continue;
                            }
                            let hit = oracle.access(addr, bytes, op == Op::Write);
                            if n == 1 && hit && op == Op::Read && span.contains(&addr) {
                                warm_hits += 1;
                            }
                        }
                    }
                    let r = verify_trigger_integrity(&job, &second, cache.line_bytes);
                    ensure!(r.deficit == warm_hits, "cache {c} M={m} K={k}: deficit {} vs oracle {warm_hits}", r.deficit);
                    if c == 0 {
                        ensure!(r.status == IntegrityStatus::PimBlocked && r.deficit > 0, "M={m} K={k}: {:?}", r.status);
                    }
                    detail.push(r.deficit);
                }
                x = job.input;
            }
        }
    }
    Ok(format!("deficits {detail:?} match oracle warm hits"))
}

fn c6_smc_calibration() -> Outcome {
    let hw = HardwareSpec::s24plus();
    let cases = [
        ("1B/2", ModelSpec::llama32_1b(), 2, 0.89),
        ("3B/2", ModelSpec::llama32_3b(), 2, 2.54),
        ("1B/4", ModelSpec::llama32_1b(), 4, 0.6),
    ];
    let mut detail = Vec::new();
    for (name, model, agents, published) in cases {
        let t: f64 = smc_seconds(model.host_bytes(), agents, &hw).map_err(|e| e.to_string())?;
        ensure!(within(t, published, 0.2 * published), "{name}: {t:.3} s vs {published} s");
        detail.push(format!("{name} {t:.3}s"));
    }
    Ok(detail.join(", "))
}

fn ttft(kind: ScenarioKind, model: &ModelSpec, sl: u64) -> Result<f64, String> {
    Ok(run_prefill::<f64>(kind, model, &HardwareSpec::s24plus(), sl).map_err(|e| e.to_string())?.ttft)
}

fn c7_ddb_hiding() -> Outcome {
    let model = ModelSpec::llama32_1b();
    let hw = HardwareSpec::s24plus();
    let mut gaps = Vec::new();
    for sl in [64, 96, 128, 160, 192] {
        let gap = ttft(ScenarioKind::SDdb, &model, sl)? / ttft(ScenarioKind::FacilO, &model, sl)? - 1.0;
        if sl >= 128 {
            ensure!(gap <= 0.01, "SL {sl}: gap {:.2}%", gap * 100.0);
        } else {
            ensure!(gap > 0.0 && gap <= 0.25, "SL {sl}: gap {:.2}%", gap * 100.0);
        }
        gaps.push(format!("{sl}:{:.2}%", gap * 100.0));
    }
    for sl in [32, 64, 192] {
        let owr = run_prefill::<ExactTime>(ScenarioKind::SOwr, &model, &hw, sl).map_err(|e| e.to_string())?.ttft;
        let facil = run_prefill::<ExactTime>(ScenarioKind::FacilO, &model, &hw, sl).map_err(|e| e.to_string())?.ttft;
        let smc: ExactTime = smc_seconds(model.host_bytes(), 4, &hw).map_err(|e| e.to_string())?;
        ensure!(owr == facil + smc, "SL {sl}: S_OWR is not FACIL_O + SMC");
    }
    let crossover = hiding_crossover(&model, &hw, 4096).map_err(|e| e.to_string())?;
    ensure!(crossover.is_some_and(|sl| (96..=192).contains(&sl)), "crossover {crossover:?}");
    Ok(format!("gaps {}, S_OWR exact, crossover SL {}", gaps.join(" "), crossover.unwrap()))
}

fn c8_decode_speedup() -> Outcome {
    let hw = HardwareSpec::s24plus();
    let no_overhead = HardwareSpec { host_overhead_per_token: 0.0, ..hw.clone() };
    for model in [ModelSpec::llama32_1b(), ModelSpec::llama32_3b(), ModelSpec::toy_64()] {
        let map = RunConfig::preset_map("s24plus").unwrap();
        let pad = padded_size(&model, &map.geometry, &map.policy());
        for h in [&hw, &no_overhead] {
            let host: f64 = decode_token_seconds(pad.host_bytes, h, false);
            let pim: f64 = decode_token_seconds(pad.padded_bytes, h, true);
            ensure!(host / pim <= h.pim_bw_multiplier, "{}: decode speedup {}", model.name, host / pim);
        }
    }
    let model = ModelSpec::llama32_1b();
    let map = RunConfig::preset_map("s24plus").unwrap();
    let pad = padded_size(&model, &map.geometry, &map.policy());
    let streams = DecodeStreams { host_bytes: pad.host_bytes, pim_bytes: pad.padded_bytes };
    let lens = [64u64, 96, 128, 160, 192];
    let mut peak = 0.0f64;
    for i in lens {
        let mut prev = 0.0;
        for o in lens {
            let e = run_end_to_end::<f64>(ScenarioKind::SOwr, &model, &streams, &hw, i, o).map_err(|e| e.to_string())?;
            ensure!(e.speedup_vs_c_gemm >= prev, "in {i} out {o}: speedup falls to {:.3}", e.speedup_vs_c_gemm);
            prev = e.speedup_vs_c_gemm;
            peak = peak.max(prev);
        }
    }
    ensure!((2.5..=8.0).contains(&peak), "peak {peak:.3}");
    Ok(format!("S_OWR peak {peak:.2}x"))
}

fn c9_nc_gemm() -> Outcome {
    let model = ModelSpec::llama32_1b();
    let mut ratios = Vec::new();
    for sl in [32, 48, 64, 96] {
        let r = ttft(ScenarioKind::NcGemm, &model, 2 * sl)? / ttft(ScenarioKind::NcGemm, &model, sl)?;
        ensure!(r >= 1.8, "SL {sl} -> {}: ratio {r:.3}", 2 * sl);
        ratios.push(format!("{r:.2}"));
    }
    let vs = ttft(ScenarioKind::NcGemm, &model, 192)? / ttft(ScenarioKind::CGemm, &model, 192)?;
    ensure!(vs >= 10.0, "NC_GEMM / C_GEMM at 192 = {vs:.1}");
    let toy = RunConfig::from_toml("[model]\npreset = \"toy-64\"\n[map]\npreset = \"desk\"\n[run]\nscenario = \"NC_GEMM\"\n").unwrap();
    let rows = sweep(&toy, SweepAxis::InLen, &["16".into(), "32".into()]).map_err(|e| e.to_string())?;
    ensure!(rows[1].ttft / rows[0].ttft >= 1.8, "toy ratio {}", rows[1].ttft / rows[0].ttft);
    Ok(format!("doubling ratios {}, {vs:.1}x C_GEMM at 192", ratios.join("/")))
}

fn c10_determinism() -> Outcome {
    let configs = [
        "[model]\npreset = \"llama3.2-1b\"\n[run]\nin_len = 96\nout_len = 128\n",
        "[model]\npreset = \"toy-64\"\n[map]\npreset = \"desk\"\n[run]\nscenario = \"S_OWR\"\nin_len = 16\nmode = \"analytical\"\n",
        "[model]\npreset = \"llama3.2-3b\"\n[run]\nscenario = \"NC_GEMM\"\nseed = 7\n[memory]\nprefetch = \"rogue_next_line\"\n",
    ];
    for text in configs {
        let cfg = RunConfig::from_toml(text).map_err(|e| e.to_string())?;
        let render = || -> Result<String, String> {
            let a = run_report(&cfg).map_err(|e| e.to_string())?;
            let mut csv = Vec::new();
            let rows = sweep(&cfg, SweepAxis::Scenario, &ScenarioKind::ALL.map(|k| k.label().to_string())).map_err(|e| e.to_string())?;
            write_csv(&rows, &mut csv).map_err(|e| e.to_string())?;
            Ok(format!("{}{}{}", serde_json::to_string(&a.report).unwrap(), a.timeline, String::from_utf8(csv).unwrap()))
        };
        let mut outputs = vec![render()?, render()?];
        for threads in [1, 3, 8] {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            outputs.push(pool.install(render)?);
        }
        ensure!(outputs.windows(2).all(|w| w[0] == w[1]), "outputs differ for {text:?}");
    }
    Ok("3 configs identical across repeats and 1/3/8 threads".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("C1 overhead table", c1_overhead_table),
        ("C2 capacity savings", c2_capacity),
        ("C3 GEMV correctness", c3_gemv_battery),
        ("C4 layout round trip", c4_layout_round_trip),
        ("C5 attribute inconsistency", c5_attribute_inconsistency),
        ("C6 SMC calibration", c6_smc_calibration),
        ("C7 DDB hiding", c7_ddb_hiding),
        ("C8 decode speedup", c8_decode_speedup),
        ("C9 NC_GEMM degradation", c9_nc_gemm),
        ("C10 determinism", c10_determinism),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
