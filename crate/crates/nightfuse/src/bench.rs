//! Benchmark harness: wall-clock timing per sampling method, exact
//! network-evaluation accounting, and reduced-precision quality deltas.
//!
//! Absolute wall times are reported but never asserted against published
//! numbers; evaluation counts and SSIM deltas are the portable checks.

use crate::error::Result;
use crate::evaluate;
use crate::network::{Checkpoint, PrecisionMode};
use crate::raster::Grid;
use crate::sample::{self, Method, SamplerSpec};
use std::path::Path;
use std::time::Instant;

/// One timed run of a (method, precision) combination.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub method: Method,
    pub precision: PrecisionMode,
    pub steps: usize,
    /// Exact network calls for the full fused grid (ledger x tile count).
    pub net_evals: usize,
    pub wall_seconds: f64,
    /// SSIM-vs-truth difference from the full32 run with identical seeds;
    /// 0 by definition for full32 itself.
    pub ssim_delta_vs_full32: f64,
    /// True when the precision mode is software-emulated on this build.
    pub emulated: bool,
}

/// Exact network evaluations of one sampler invocation.
pub fn count_evals(spec: &SamplerSpec, t: usize) -> Result<usize> {
    spec.validate()?;
    Ok(sample::expected_evals(spec.method, spec.steps, t))
}

fn tile_count(cond: &Grid, patch: u32) -> usize {
    ((cond.width / patch) * (cond.height / patch)) as usize
}

/// Serial single-thread pool used for contention-free timing.
fn serial_pool() -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("single-thread pool")
}

/// Times one full-grid fusion at the given precision after one untimed
/// warmup run. `concurrent` permits tile-level parallelism during the
/// timed run; the default serial mode avoids contention-skewed numbers.
pub fn time_method(
    ckpt: &Checkpoint,
    cond: &Grid,
    truth: &Grid,
    spec: &SamplerSpec,
    precision: PrecisionMode,
    concurrent: bool,
) -> Result<BenchRecord> {
    let run = || -> Result<Grid> {
        if concurrent {
            sample::fuse_full(cond, ckpt, spec, precision)
        } else {
            serial_pool().install(|| sample::fuse_full(cond, ckpt, spec, precision))
        }
    };
    run()?; // warmup
    let start = Instant::now();
    let fused = run()?;
    let wall_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    let ssim_delta_vs_full32 = if precision == PrecisionMode::Full32 {
        0.0
    } else {
        let baseline = sample::fuse_full(cond, ckpt, spec, PrecisionMode::Full32)?;
        evaluate::evaluate_pair(&fused, truth)?.ssim - evaluate::evaluate_pair(&baseline, truth)?.ssim
    };
    Ok(BenchRecord {
        method: spec.method,
        precision,
        steps: spec.steps,
        net_evals: count_evals(spec, ckpt.config.schedule.steps)? * tile_count(cond, ckpt.config.net.patch),
        wall_seconds,
        ssim_delta_vs_full32,
        emulated: precision.emulated(),
    })
}

/// Sweeps each method over {full32, half16}, plus weights_int8 for the
/// first method, producing one record per combination.
pub fn precision_report(
    ckpt_noise: &Checkpoint,
    ckpt_velocity: &Checkpoint,
    cond: &Grid,
    truth: &Grid,
    specs: &[SamplerSpec],
) -> Result<Vec<BenchRecord>> {
    let mut records = Vec::new();
    for (i, spec) in specs.iter().enumerate() {
        let ckpt = if spec.method == Method::FmEuler { ckpt_velocity } else { ckpt_noise };
        records.push(time_method(ckpt, cond, truth, spec, PrecisionMode::Full32, false)?);
        records.push(time_method(ckpt, cond, truth, spec, PrecisionMode::Half16, false)?);
        if i == 0 {
            records.push(time_method(ckpt, cond, truth, spec, PrecisionMode::WeightsInt8, false)?);
        }
    }
    Ok(records)
}

/// Writes records as CSV
/// (method, precision, steps, net_evals, wall_seconds, ssim_delta, emulated).
pub fn write_bench_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut out = String::from("method,precision,steps,net_evals,wall_seconds,ssim_delta,emulated\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.method, r.precision, r.steps, r.net_evals, r.wall_seconds, r.ssim_delta_vs_full32, r.emulated
        ));
    }
    Ok(std::fs::write(path, out)?)
}
