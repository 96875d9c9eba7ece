//! Quality metrics (SSIM, PSNR, MAE/MSE/RMSE) and the azimuthally
//! averaged power spectral density with a log-ratio band distance.

use crate::error::{Error, Result};
use crate::raster::{Grid, Units};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use std::ops::Range;

/// Table-1-shaped bundle of pixel metrics on unit-normalized grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub ssim: f64,
    /// +infinity when the grids are identical.
    pub psnr_db: f64,
    pub mae: f64,
    pub mse: f64,
    pub rmse: f64,
}

/// Pairwise-valid MAE/MSE/RMSE over two same-sized grids; pixels where
/// either side is missing are excluded.
pub fn pixel_metrics(pred: &Grid, truth: &Grid) -> Result<(f64, f64, f64)> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(Error::Shape(format!(
            "dimension mismatch {}x{} vs {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    let mut n = 0usize;
    let (mut abs_sum, mut sq_sum) = (0.0f64, 0.0f64);
    for (&p, &t) in pred.values.iter().zip(&truth.values) {
        if p.is_nan() || t.is_nan() {
            continue;
        }
        let d = (p - t) as f64;
        abs_sum += d.abs();
        sq_sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Evaluation("no valid pixels in common".into()));
    }
    let mae = abs_sum / n as f64;
    let mse = sq_sum / n as f64;
    Ok((mae, mse, mse.sqrt()))
}

/// Peak signal-to-noise ratio in decibels; mse = 0 maps to +infinity.
pub fn psnr(mse: f64, range: f64) -> Result<f64> {
    if mse < 0.0 {
        return Err(Error::Parameter(format!("mse {mse} must be >= 0")));
    }
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Valid-mode separable convolution with the SSIM Gaussian window.
fn window_means(field: &[f64], w: usize, h: usize) -> Vec<f64> {
    let k = ssim_kernel();
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; oh.max(h) * ow]; // h rows of ow
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * field[r * w + c + i];
            }
            horiz[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0f64; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * horiz[(r + i) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    out
}

/// Mean structural similarity over all valid 11x11 window positions,
/// Gaussian-weighted, on unit-range data.
pub fn ssim(pred: &Grid, truth: &Grid) -> Result<f64> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(Error::Shape("dimension mismatch".into()));
    }
    let (w, h) = (pred.width as usize, pred.height as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!("grid {w}x{h} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    if pred.values.iter().chain(&truth.values).any(|v| v.is_nan()) {
        return Err(Error::Evaluation("ssim requires complete grids".into()));
    }
    let x: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = truth.values.iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let mu_x = window_means(&x, w, h);
    let mu_y = window_means(&y, w, h);
    let m_xx = window_means(&xx, w, h);
    let m_yy = window_means(&yy, w, h);
    let m_xy = window_means(&xy, w, h);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut sum = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = m_xx[i] - mx * mx;
        let vy = m_yy[i] - my * my;
        let cov = m_xy[i] - mx * my;
        sum += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(sum / mu_x.len() as f64)
}

/// Maps any grid onto the unit range its metric definitions assume.
pub fn to_unit_grid(g: &Grid) -> Result<Grid> {
    match g.units {
        Units::Unit => Ok(g.clone()),
        _ => g.to_unit(),
    }
}

/// Full metric bundle after unit normalization (dn grids divided by 63).
pub fn evaluate_pair(pred: &Grid, truth: &Grid) -> Result<MetricsReport> {
    let p = to_unit_grid(pred)?;
    let t = to_unit_grid(truth)?;
    let (mae, mse, rmse) = pixel_metrics(&p, &t)?;
    Ok(MetricsReport { ssim: ssim(&p, &t)?, psnr_db: psnr(mse, 1.0)?, mae, mse, rmse })
}

/// Azimuthally binned power spectrum. Bin index equals the integer
/// wavenumber (cycles across the image); bin 0 holds only the DC term.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialSpectrum {
    pub mean_power: Vec<f64>,
    pub count: Vec<usize>,
}

impl RadialSpectrum {
    pub fn n_bins(&self) -> usize {
        self.mean_power.len()
    }

    /// Total binned power; equals the grid's mean squared pixel value.
    pub fn total_power(&self) -> f64 {
        self.mean_power.iter().zip(&self.count).map(|(&p, &c)| p * c as f64).sum()
    }
}

/// Radially averaged power spectral density with normalization
/// P = |F|^2 / (w*h)^2, so the binned total equals mean(pixel^2).
pub fn radial_psd(g: &Grid) -> Result<RadialSpectrum> {
    radial_psd_with(g, false)
}

/// As [`radial_psd`]; with `energy_sum` the per-bin statistic is the
/// annulus sum rather than the azimuthal mean.
pub fn radial_psd_with(g: &Grid, energy_sum: bool) -> Result<RadialSpectrum> {
    let (w, h) = (g.width as usize, g.height as usize);
    if w < 2 || h < 2 {
        return Err(Error::Shape(format!("grid {w}x{h} too small for a spectrum")));
    }
    if g.values.iter().any(|v| v.is_nan()) {
        return Err(Error::Evaluation("spectrum requires a complete grid".into()));
    }
    let mut field: Vec<Complex64> =
        g.values.iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for r in 0..h {
        row_fft.process(&mut field[r * w..(r + 1) * w]);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = field[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            field[r * w + c] = col[r];
        }
    }
    let norm = ((w * h) as f64).powi(2);
    let signed = |i: usize, n: usize| -> f64 {
        if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        }
    };
    let r_max = {
        let kx = (w / 2) as f64;
        let ky = (h / 2) as f64;
        (kx * kx + ky * ky).sqrt().round() as usize
    };
    let mut power_sum = vec![0.0f64; r_max + 1];
    let mut count = vec![0usize; r_max + 1];
    for r in 0..h {
        let ky = signed(r, h);
        for c in 0..w {
            let kx = signed(c, w);
            let bin = (kx * kx + ky * ky).sqrt().round() as usize;
            power_sum[bin] += field[r * w + c].norm_sqr() / norm;
            count[bin] += 1;
        }
    }
    let mean_power = power_sum
        .iter()
        .zip(&count)
        .map(|(&p, &c)| if energy_sum || c == 0 { p } else { p / c as f64 })
        .collect();
    Ok(RadialSpectrum { mean_power, count })
}

/// Mean absolute log10 power ratio over a wavenumber band.
pub fn spectrum_distance(a: &RadialSpectrum, b: &RadialSpectrum, band: Range<usize>) -> Result<f64> {
    if a.n_bins() != b.n_bins() {
        return Err(Error::Parameter(format!(
            "spectra have different binnings ({} vs {} bins)",
            a.n_bins(),
            b.n_bins()
        )));
    }
    if band.is_empty() || band.end > a.n_bins() {
        return Err(Error::Parameter(format!(
            "band {}..{} outside available bins 0..{}",
            band.start,
            band.end,
            a.n_bins()
        )));
    }
    let mut sum = 0.0;
    for i in band.clone() {
        let (pa, pb) = (a.mean_power[i], b.mean_power[i]);
        if pa <= 0.0 || pb <= 0.0 {
            return Err(Error::Evaluation(format!(
                "zero power in band bin {i}; exclude empty bins from the band"
            )));
        }
        sum += (pa / pb).log10().abs();
    }
    Ok(sum / band.len() as f64)
}

/// Formats a PSNR value for CSV ("inf" sentinel at identity).
pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Writes a spectrum as CSV (bin, wavenumber, mean_power, count).
pub fn write_spectrum_csv(s: &RadialSpectrum, path: &std::path::Path) -> Result<()> {
    let mut out = String::from("bin,wavenumber,mean_power,count\n");
    for i in 0..s.n_bins() {
        out.push_str(&format!("{i},{i},{:.9e},{}\n", s.mean_power[i], s.count[i]));
    }
    Ok(std::fs::write(path, out)?)
}
