//! End-to-end experiment orchestration: each stage reads the previous
//! stage's artifacts from the output directory and writes its own, so the
//! pipeline can run as one shot or be resumed stage by stage. Every file
//! an experiment produces lives under the configured output directory.

use crate::bench::{self, BenchRecord};
use crate::config::ExperimentConfig;
use crate::dataset::{self, PatchPair};
use crate::error::{Error, Result};
use crate::evaluate;
use crate::network::{self, Checkpoint, Objective, PrecisionMode};
use crate::raster::{self, Grid};
use crate::rng;
use crate::sample::{self, Method, SamplerSpec};
use crate::train;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Raw condition-role grid (radiance or loaded DN source).
pub const VIIRS_FILE: &str = "viirs.nlg";
/// Raw target-role grid.
pub const DMSP_FILE: &str = "dmsp.nlg";
/// Scaled + background-filtered condition grid, DN units.
pub const COND_FILE: &str = "cond.nlg";
/// Background-filtered truth grid, DN units.
pub const TRUTH_FILE: &str = "truth.nlg";
/// Name of the baseline row in the metrics table.
pub const BASELINE_ROW: &str = "viirs";
/// Marker dropped next to partial artifacts when a stage aborts.
pub const FAILED_MARKER: &str = "FAILED";

fn ckpt_file(objective: Objective) -> &'static str {
    match objective {
        Objective::Noise => "noise.nfck",
        Objective::Velocity => "velocity.nfck",
    }
}

fn fused_file(method: Method) -> String {
    format!("fused_{method}.nlg")
}

/// Reads an artifact from an earlier stage; a missing file is a stage
/// error naming the expected path.
fn read_artifact(path: &Path) -> Result<Grid> {
    if !path.exists() {
        return Err(Error::Stage(format!("missing upstream artifact {}", path.display())));
    }
    raster::read_grid_file(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Stage(format!("missing trained checkpoint {}", path.display())));
    }
    network::checkpoint::load_file(path)
}

/// Resolved sampler requests, seeded per method from the global seed.
pub fn sampler_specs(cfg: &ExperimentConfig) -> Vec<SamplerSpec> {
    let t = cfg.train.schedule.steps;
    cfg.sample
        .methods
        .iter()
        .map(|m| m.resolve(t, rng::derive_seed(cfg.seed, "fuse", m.method as u64)))
        .collect()
}

/// Generates or loads the raw grid pair into the output directory.
pub fn stage_synth(cfg: &ExperimentConfig) -> Result<()> {
    let (viirs, dmsp) = match (&cfg.data.cond_path, &cfg.data.target_path) {
        (Some(c), Some(t)) => (raster::read_grid_file(c)?, raster::read_grid_file(t)?),
        _ => {
            let mut p = cfg.data.synth.clone();
            p.seed = rng::derive_seed(cfg.seed, "synth", p.seed);
            dataset::synth_pair(&p)?
        }
    };
    raster::write_grid_file(&cfg.out_dir.join(VIIRS_FILE), &viirs)?;
    raster::write_grid_file(&cfg.out_dir.join(DMSP_FILE), &dmsp)?;
    Ok(())
}

/// Scales the condition grid to DN range and applies the joint
/// background filter to both grids.
pub fn stage_prepare(cfg: &ExperimentConfig) -> Result<()> {
    let viirs = read_artifact(&cfg.out_dir.join(VIIRS_FILE))?;
    let dmsp = read_artifact(&cfg.out_dir.join(DMSP_FILE))?;
    let hi = raster::percentile(&viirs, cfg.data.scale_percentile)?;
    let cond_dn = raster::linear_scale_to_dn(&viirs, 0.0, hi)?;
    let (cond, truth) = raster::joint_background_filter(&cond_dn, &dmsp, cfg.data.filter_floor)?;
    raster::write_grid_file(&cfg.out_dir.join(COND_FILE), &cond)?;
    raster::write_grid_file(&cfg.out_dir.join(TRUTH_FILE), &truth)?;
    Ok(())
}

fn training_splits(cfg: &ExperimentConfig) -> Result<(Vec<PatchPair>, Vec<PatchPair>)> {
    let cond = read_artifact(&cfg.out_dir.join(COND_FILE))?;
    let truth = read_artifact(&cfg.out_dir.join(TRUTH_FILE))?;
    let pairs = dataset::extract_pairs(
        &raster::normalize_signed(&cond)?,
        &raster::normalize_signed(&truth)?,
        cfg.train.net.patch,
    )?;
    dataset::split(&pairs, cfg.data.n_val, rng::derive_seed(cfg.seed, "split", 0))
}

/// Trains both objectives on the extracted patch pairs and writes one
/// checkpoint plus a loss-history CSV per objective.
pub fn stage_train(cfg: &ExperimentConfig) -> Result<()> {
    let (train_set, val_set) = training_splits(cfg)?;
    for (objective, tc) in
        [(Objective::Noise, &cfg.train.noise), (Objective::Velocity, &cfg.train.velocity)]
    {
        let mut tc = *tc;
        tc.seed = rng::derive_seed(cfg.seed, "train", objective as u64);
        let ckpt = network::init(cfg.train.net, cfg.train.schedule, objective, tc.seed)?;
        let (best, history) = train::train(&ckpt, &train_set, &val_set, &tc)?;
        network::checkpoint::save_file(&best, &cfg.out_dir.join(ckpt_file(objective)))?;
        train::write_history_csv(
            &history,
            &cfg.out_dir.join(format!("train_{}.csv", ckpt_file(objective).trim_end_matches(".nfck"))),
        )?;
    }
    Ok(())
}

/// Fuses the full condition grid once per configured sampler and records
/// per-method wall times.
pub fn stage_fuse(cfg: &ExperimentConfig, precision: PrecisionMode) -> Result<()> {
    let cond = read_artifact(&cfg.out_dir.join(COND_FILE))?;
    let noise = load_checkpoint(&cfg.out_dir.join(ckpt_file(Objective::Noise)))?;
    let velocity = load_checkpoint(&cfg.out_dir.join(ckpt_file(Objective::Velocity)))?;
    let mut times = String::from("method,wall_seconds\n");
    for spec in sampler_specs(cfg) {
        let ckpt = if spec.method.objective() == Objective::Velocity { &velocity } else { &noise };
        let start = Instant::now();
        let fused = sample::fuse_full(&cond, ckpt, &spec, precision)?;
        times.push_str(&format!("{},{:.6}\n", spec.method, start.elapsed().as_secs_f64()));
        raster::write_grid_file(&cfg.out_dir.join(fused_file(spec.method)), &fused)?;
    }
    Ok(std::fs::write(cfg.out_dir.join("fuse_times.csv"), times)?)
}

fn read_fuse_times(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    if let Ok(text) = std::fs::read_to_string(dir.join("fuse_times.csv")) {
        for line in text.lines().skip(1) {
            if let Some((m, t)) = line.split_once(',') {
                out.insert(m.to_string(), t.to_string());
            }
        }
    }
    out
}

/// Scores every fused grid plus the raw condition baseline against the
/// truth grid and writes the metrics table.
pub fn stage_eval(cfg: &ExperimentConfig) -> Result<()> {
    let cond = read_artifact(&cfg.out_dir.join(COND_FILE))?;
    let truth = read_artifact(&cfg.out_dir.join(TRUTH_FILE))?;
    let times = read_fuse_times(&cfg.out_dir);
    let mut out = String::from("method,ssim,psnr_db,mae,mse,rmse,wall_seconds\n");
    let mut push = |name: &str, m: &evaluate::MetricsReport, wall: &str| {
        out.push_str(&format!(
            "{name},{:.6},{},{:.6},{:.6},{:.6},{wall}\n",
            m.ssim,
            evaluate::format_db(m.psnr_db),
            m.mae,
            m.mse,
            m.rmse
        ));
    };
    for spec in sampler_specs(cfg) {
        let fused = read_artifact(&cfg.out_dir.join(fused_file(spec.method)))?;
        let m = evaluate::evaluate_pair(&fused, &truth)?;
        let wall = if cfg.deterministic {
            "-".to_string()
        } else {
            times.get(&spec.method.to_string()).cloned().unwrap_or_else(|| "-".into())
        };
        push(&spec.method.to_string(), &m, &wall);
    }
    let baseline = evaluate::evaluate_pair(&cond, &truth)?;
    push(BASELINE_ROW, &baseline, "-");
    Ok(std::fs::write(cfg.out_dir.join("metrics.csv"), out)?)
}

/// Writes radial power spectra for truth, condition, and every fused
/// output under `spectra/`.
pub fn stage_psd(cfg: &ExperimentConfig) -> Result<()> {
    let dir = cfg.out_dir.join("spectra");
    std::fs::create_dir_all(&dir)?;
    let mut grids = vec![
        ("truth".to_string(), read_artifact(&cfg.out_dir.join(TRUTH_FILE))?),
        ("condition".to_string(), read_artifact(&cfg.out_dir.join(COND_FILE))?),
    ];
    for spec in sampler_specs(cfg) {
        let path = cfg.out_dir.join(fused_file(spec.method));
        grids.push((spec.method.to_string(), read_artifact(&path)?));
    }
    for (name, g) in grids {
        let s = evaluate::radial_psd(&evaluate::to_unit_grid(&g)?)?;
        evaluate::write_spectrum_csv(&s, &dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

/// Times every configured (method, precision) combination, plus one
/// int8-weight run for the first method, and writes the benchmark table.
pub fn stage_bench(cfg: &ExperimentConfig) -> Result<()> {
    if !cfg.bench.enabled {
        return Ok(());
    }
    let cond = read_artifact(&cfg.out_dir.join(COND_FILE))?;
    let truth = read_artifact(&cfg.out_dir.join(TRUTH_FILE))?;
    let noise = load_checkpoint(&cfg.out_dir.join(ckpt_file(Objective::Noise)))?;
    let velocity = load_checkpoint(&cfg.out_dir.join(ckpt_file(Objective::Velocity)))?;
    let mut records: Vec<BenchRecord> = Vec::new();
    for (i, spec) in sampler_specs(cfg).iter().enumerate() {
        let ckpt = if spec.method.objective() == Objective::Velocity { &velocity } else { &noise };
        for &p in &cfg.bench.precisions {
            records.push(bench::time_method(ckpt, &cond, &truth, spec, p, false)?);
        }
        if i == 0 && !cfg.bench.precisions.contains(&PrecisionMode::WeightsInt8) {
            records.push(bench::time_method(ckpt, &cond, &truth, spec, PrecisionMode::WeightsInt8, false)?);
        }
    }
    bench::write_bench_csv(&records, &cfg.out_dir.join("bench.csv"))
}

/// Merges the metrics and benchmark tables into one summary file.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<()> {
    let mut out = String::new();
    for (name, required) in [("metrics.csv", true), ("bench.csv", cfg.bench.enabled)] {
        let path = cfg.out_dir.join(name);
        if !path.exists() {
            if required {
                return Err(Error::Stage(format!("missing upstream artifact {}", path.display())));
            }
            continue;
        }
        out.push_str(&format!("# {name}\n{}\n", std::fs::read_to_string(path)?));
    }
    Ok(std::fs::write(cfg.out_dir.join("summary.txt"), out)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("{:x}", h.finalize())
}

/// Writes the reproduction manifest: full config, seed, content hashes of
/// the raw inputs, and the code version.
pub fn write_manifest(cfg: &ExperimentConfig) -> Result<()> {
    let mut hashes = BTreeMap::new();
    for name in [VIIRS_FILE, DMSP_FILE] {
        let path = cfg.out_dir.join(name);
        if path.exists() {
            hashes.insert(name.to_string(), sha256_hex(&std::fs::read(path)?));
        }
    }
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "deterministic": cfg.deterministic,
        "input_hashes": hashes,
        "config": cfg,
    });
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    Ok(std::fs::write(cfg.out_dir.join("run_manifest.json"), text)?)
}

fn annotate(stage: &str, e: Error) -> Error {
    let msg = format!("stage {stage}: {e}");
    match e {
        Error::Format(_) => Error::Format(msg),
        Error::Shape(_) => Error::Shape(msg),
        Error::Parameter(_) => Error::Parameter(msg),
        Error::Units(_) => Error::Units(msg),
        Error::Spec(_) => Error::Spec(msg),
        Error::Numeric(_) => Error::Numeric(msg),
        Error::Evaluation(_) => Error::Evaluation(msg),
        Error::Config(_) => Error::Config(msg),
        Error::Stage(_) | Error::Io(_) => Error::Stage(msg),
    }
}

/// Runs the full experiment. On any stage failure the partial artifacts
/// are kept and a FAILED marker naming the stage is written.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let marker = cfg.out_dir.join(FAILED_MARKER);
    let _ = std::fs::remove_file(&marker);
    let stages: [(&str, Box<dyn Fn(&ExperimentConfig) -> Result<()>>); 8] = [
        ("synth", Box::new(stage_synth)),
        ("prepare", Box::new(stage_prepare)),
        ("train", Box::new(stage_train)),
        ("fuse", Box::new(|c| stage_fuse(c, PrecisionMode::Full32))),
        ("eval", Box::new(stage_eval)),
        ("psd", Box::new(stage_psd)),
        ("bench", Box::new(stage_bench)),
        ("report", Box::new(|c| {
            write_manifest(c)?;
            stage_report(c)
        })),
    ];
    for (name, run) in &stages {
        if let Err(e) = run(cfg) {
            let e = annotate(name, e);
            let _ = std::fs::write(&marker, format!("{e}\n"));
            return Err(e);
        }
    }
    Ok(cfg.out_dir.clone())
}
