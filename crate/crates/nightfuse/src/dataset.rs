//! Patch extraction, train/validation splitting, and a synthetic
//! paired-scene generator that emulates the VIIRS -> DMSP degradation
//! (point-spread blur, 6-bit quantization, saturation at DN 63) so the
//! whole pipeline is testable without satellite data.

use crate::error::{Error, Result};
use crate::raster::{self, Grid, Units};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// One conditioning/target patch pair at training granularity.
/// Both patches are signed-normalized, `patch` x `patch`, no missing values.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub cond: Vec<f32>,
    pub target: Vec<f32>,
    pub row0: u32,
    pub col0: u32,
    pub patch: u32,
}

/// Parameters of the synthetic paired scene.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Fine-grid side length; must be divisible by 2 and by 64.
    pub fine_size: u32,
    pub n_cities: u32,
    pub n_towns: u32,
    /// Gaussian footprint of city blobs on the fine grid, pixels.
    pub city_sigma_px: f32,
    /// Peak radiance of isolated town points.
    pub town_peak: f32,
    /// Point-spread width of the simulated DMSP sensor, coarse pixels.
    pub dmsp_blur_sigma_px: f32,
    /// Scale of the additive non-negative background noise.
    pub sensor_noise_sd: f32,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            fine_size: 1152,
            n_cities: 6,
            n_towns: 60,
            city_sigma_px: 18.0,
            town_peak: 10.0,
            dmsp_blur_sigma_px: 1.5,
            sensor_noise_sd: 0.02,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.fine_size % 2 != 0 || self.fine_size % 64 != 0 || self.fine_size == 0 {
            return Err(Error::Parameter(format!(
                "fine_size {} must be divisible by 2 and 64",
                self.fine_size
            )));
        }
        if !(self.city_sigma_px > 0.0) || !(self.dmsp_blur_sigma_px > 0.0) {
            return Err(Error::Parameter("sigmas must be positive".into()));
        }
        if self.sensor_noise_sd < 0.0 || self.town_peak < 0.0 {
            return Err(Error::Parameter("noise scale and peaks must be >= 0".into()));
        }
        Ok(())
    }
}

/// Tiles two aligned signed grids into non-overlapping patch pairs in
/// raster order; partial edge tiles are dropped.
pub fn extract_pairs(cond: &Grid, target: &Grid, patch: u32) -> Result<Vec<PatchPair>> {
    if cond.width != target.width || cond.height != target.height {
        return Err(Error::Shape(format!(
            "dimension mismatch {}x{} vs {}x{}",
            cond.width, cond.height, target.width, target.height
        )));
    }
    if cond.width < patch || cond.height < patch {
        return Err(Error::Shape(format!(
            "grid {}x{} smaller than patch {patch}",
            cond.width, cond.height
        )));
    }
    let (tw, th) = (cond.width / patch, cond.height / patch);
    let mut pairs = Vec::with_capacity((tw * th) as usize);
    for tr in 0..th {
        for tc in 0..tw {
            let (row0, col0) = (tr * patch, tc * patch);
            let mut c = Vec::with_capacity((patch * patch) as usize);
            let mut t = Vec::with_capacity((patch * patch) as usize);
            for r in 0..patch {
                for cc in 0..patch {
                    let cv = cond.at(row0 + r, col0 + cc);
                    let tv = target.at(row0 + r, col0 + cc);
                    if cv.is_nan() || tv.is_nan() {
                        return Err(Error::Parameter(format!(
                            "missing value inside patch at ({},{})",
                            row0 + r,
                            col0 + cc
                        )));
                    }
                    c.push(cv);
                    t.push(tv);
                }
            }
            pairs.push(PatchPair { cond: c, target: t, row0, col0, patch });
        }
    }
    Ok(pairs)
}

/// Seeded-shuffle split: the last `n_val` shuffled pairs become validation.
pub fn split(pairs: &[PatchPair], n_val: usize, seed: u64) -> Result<(Vec<PatchPair>, Vec<PatchPair>)> {
    if n_val > pairs.len() {
        return Err(Error::Parameter(format!(
            "n_val = {n_val} exceeds pair count {}",
            pairs.len()
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut r = rng::labeled_stream(seed, "split", 0);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let cut = pairs.len() - n_val;
    let train = order[..cut].iter().map(|&i| pairs[i].clone()).collect();
    let val = order[cut..].iter().map(|&i| pairs[i].clone()).collect();
    Ok((train, val))
}

/// Separable Gaussian blur with clamp-to-edge padding.
pub fn gaussian_blur(g: &Grid, sigma: f32) -> Result<Grid> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("blur sigma {sigma} must be positive")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d as f64).powi(2) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let (w, h) = (g.width as i64, g.height as i64);
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0f32; src.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0f64;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let d = ki as i64 - radius;
                    let (r, c) = if horizontal {
                        (row, (col + d).clamp(0, w - 1))
                    } else {
                        ((row + d).clamp(0, h - 1), col)
                    };
                    acc += kv * src[(r * w + c) as usize] as f64;
                }
                dst[(row * w + col) as usize] = acc as f32;
            }
        }
        dst
    };
    let tmp = pass(&g.values, true);
    let out = pass(&tmp, false);
    Grid::new(g.width, g.height, g.units, out)
}

/// Generates a paired synthetic scene: a fine-grid luminance field of
/// Gaussian city blobs, isolated town points, and small non-negative
/// background noise; the VIIRS role is its 2x block average, the DMSP role
/// is the blurred, saturated, 6-bit-quantized rendition of the same scene.
pub fn synth_pair(p: &SynthParams) -> Result<(Grid, Grid)> {
    p.validate()?;
    let n = p.fine_size as usize;
    let mut fine = vec![0.0f32; n * n];

    let mut bg = rng::labeled_stream(p.seed, "synth.background", 0);
    if p.sensor_noise_sd > 0.0 {
        for v in fine.iter_mut() {
            *v = rng::normal_f32(&mut bg).abs() * p.sensor_noise_sd;
        }
    }

    let mut blob = rng::labeled_stream(p.seed, "synth.cities", 0);
    for _ in 0..p.n_cities {
        let cx = blob.gen_range(0.12..0.88) * n as f32;
        let cy = blob.gen_range(0.12..0.88) * n as f32;
        let sigma = p.city_sigma_px * blob.gen_range(0.6..1.4);
        let amp = p.town_peak * blob.gen_range(2.0..6.0);
        let r = (4.0 * sigma).ceil() as i64;
        let (ix, iy) = (cx as i64, cy as i64);
        for row in (iy - r).max(0)..=(iy + r).min(n as i64 - 1) {
            for col in (ix - r).max(0)..=(ix + r).min(n as i64 - 1) {
                let dx = col as f32 + 0.5 - cx;
                let dy = row as f32 + 0.5 - cy;
                let d2 = dx * dx + dy * dy;
                fine[(row * n as i64 + col) as usize] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let mut town = rng::labeled_stream(p.seed, "synth.towns", 0);
    for _ in 0..p.n_towns {
        let col = town.gen_range(0..n);
        let row = town.gen_range(0..n);
        let amp = p.town_peak * town.gen_range(0.3..1.0);
        fine[row * n + col] += amp;
    }

    let fine_grid = Grid::new(p.fine_size, p.fine_size, Units::Radiance, fine)?;
    let viirs = raster::block_average(&fine_grid, 2)?;

    // DMSP rendition: scale radiance to DN, apply the sensor point spread,
    // saturate at 63, quantize to integer DN, snap sub-DN-1 values to 0.
    let all_zero = viirs.values.iter().all(|&v| v == 0.0);
    let dmsp = if all_zero {
        Grid::filled(viirs.width, viirs.height, Units::Dn, 0.0)?
    } else {
        let r_hi = raster::percentile(&viirs, 99.5)?.max(f32::MIN_POSITIVE);
        let scaled = raster::linear_scale_to_dn(&viirs, 0.0, r_hi)?;
        let blurred = gaussian_blur(&scaled, p.dmsp_blur_sigma_px)?;
        let values = blurred
            .values
            .iter()
            .map(|&v| {
                let q = v.clamp(0.0, 63.0).round();
                if q < 1.0 {
                    0.0
                } else {
                    q
                }
            })
            .collect();
        Grid::new(viirs.width, viirs.height, Units::Dn, values)?
    };
    Ok((viirs, dmsp))
}

/// Split assignment recorded in the patch-set manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
}

/// Persists a patch set as NLG1 files plus a manifest listing offsets and
/// split assignments.
pub fn save_pairs(dir: &Path, pairs: &[(PatchPair, SplitTag)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::from("index\trow0\tcol0\tsplit\n");
    for (i, (pair, tag)) in pairs.iter().enumerate() {
        let cond = Grid::new(pair.patch, pair.patch, Units::Signed, pair.cond.clone())?;
        let target = Grid::new(pair.patch, pair.patch, Units::Signed, pair.target.clone())?;
        raster::write_grid_file(&dir.join(format!("pair_{i}_cond.nlg")), &cond)?;
        raster::write_grid_file(&dir.join(format!("pair_{i}_target.nlg")), &target)?;
        manifest.push_str(&format!(
            "{i}\t{}\t{}\t{}\n",
            pair.row0,
            pair.col0,
            match tag {
                SplitTag::Train => "train",
                SplitTag::Val => "val",
            }
        ));
    }
    std::fs::write(dir.join("manifest.tsv"), manifest)?;
    Ok(())
}

/// Loads a patch set saved by [`save_pairs`].
pub fn load_pairs(dir: &Path) -> Result<Vec<(PatchPair, SplitTag)>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.tsv"))
        .map_err(|e| Error::Stage(format!("missing manifest {}: {e}", dir.join("manifest.tsv").display())))?;
    let mut out = Vec::new();
    for line in manifest.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Format(format!("bad manifest line: {line:?}")));
        }
        let i: usize = fields[0].parse().map_err(|_| Error::Format("bad index".into()))?;
        let row0: u32 = fields[1].parse().map_err(|_| Error::Format("bad row0".into()))?;
        let col0: u32 = fields[2].parse().map_err(|_| Error::Format("bad col0".into()))?;
        let tag = match fields[3] {
            "train" => SplitTag::Train,
            "val" => SplitTag::Val,
            other => return Err(Error::Format(format!("bad split tag {other:?}"))),
        };
        let cond = raster::read_grid_file(&dir.join(format!("pair_{i}_cond.nlg")))?;
        let target = raster::read_grid_file(&dir.join(format!("pair_{i}_target.nlg")))?;
        out.push((
            PatchPair { cond: cond.values, target: target.values, row0, col0, patch: cond.width },
            tag,
        ));
    }
    Ok(out)
}
