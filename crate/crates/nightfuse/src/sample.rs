//! Inference: DDIM, ancestral, few-step consistency-style, EDM-Heun,
//! probability-flow ODE (Euler and Heun), and flow-matching Euler samplers,
//! plus ensembles and tiled full-grid fusion.
//!
//! Each sampler core runs over an abstract model closure so the numeric
//! update rules can be tested against closed-form stand-ins, and so network
//! evaluations can be counted exactly.

use crate::error::{Error, Result};
use crate::network::{self, Checkpoint, Objective, PrecisionMode};
use crate::raster::{self, Grid, Units};
use crate::rng::{self, Stream};
use crate::schedule::{self, KarrasSigmas, NoiseSchedule};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Karras sigma-ladder defaults for the EDM sampler.
pub const EDM_RHO: f64 = 7.0;
pub const EDM_SIGMA_MIN: f64 = 0.002;
pub const EDM_SIGMA_MAX: f64 = 80.0;

/// Sampling algorithm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ddim,
    Ancestral,
    Lcm,
    EdmHeun,
    PfEuler,
    PfHeun,
    FmEuler,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ddim,
        Method::Ancestral,
        Method::Lcm,
        Method::EdmHeun,
        Method::PfEuler,
        Method::PfHeun,
        Method::FmEuler,
    ];

    /// Default step count; `t` is the diffusion horizon for methods that
    /// walk the full schedule.
    pub fn default_steps(self, t: usize) -> usize {
        match self {
            Method::Ancestral => t,
            Method::Lcm => 4,
            _ => 30,
        }
    }

    /// Which training objective the method drives.
    pub fn objective(self) -> Objective {
        match self {
            Method::FmEuler => Objective::Velocity,
            _ => Objective::Noise,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddim => "ddim",
            Method::Ancestral => "ancestral",
            Method::Lcm => "lcm",
            Method::EdmHeun => "edm_heun",
            Method::PfEuler => "pf_euler",
            Method::PfHeun => "pf_heun",
            Method::FmEuler => "fm_euler",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown sampling method '{s}'")))
    }
}

/// Sampling request: algorithm, step budget, base seed, DDIM stochasticity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerSpec {
    pub method: Method,
    pub steps: usize,
    pub seed: u64,
    pub eta: f64,
}

impl SamplerSpec {
    pub fn new(method: Method, t: usize, seed: u64) -> SamplerSpec {
        SamplerSpec { method, steps: method.default_steps(t), seed, eta: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Parameter("steps must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Parameter(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Exact network-evaluation count of one sampler run.
pub fn expected_evals(method: Method, steps: usize, t: usize) -> usize {
    match method {
        Method::Ddim | Method::Lcm | Method::PfEuler | Method::FmEuler => steps,
        Method::Ancestral => t,
        Method::EdmHeun => 2 * steps - 1,
        Method::PfHeun => 2 * steps,
    }
}

fn clamp_signed(x: &mut [f32]) {
    for v in x.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
}

/// DDIM over a subset timestep ladder: repeatedly form the data estimate
/// and re-noise it at the next (lower) level; the final step emits the
/// data estimate itself. eta > 0 injects the standard stochastic term.
pub fn ddim_core<M>(
    model: &mut M,
    sched: &NoiseSchedule,
    mut x: Vec<f32>,
    steps: usize,
    eta: f64,
    rng: &mut Stream,
) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let taus = schedule::subset_timesteps(sched.steps, steps)?;
    for (i, &tau) in taus.iter().enumerate() {
        let ab = sched.alpha_bar_t(tau);
        let eps = model(&x, tau as f32)?;
        let (sa, sb) = ((ab.sqrt()) as f32, ((1.0 - ab).sqrt()) as f32);
        let x0: Vec<f32> = x.iter().zip(&eps).map(|(&xv, &e)| (xv - sb * e) / sa).collect();
        if i + 1 == taus.len() {
            x = x0;
        } else {
            let ab2 = sched.alpha_bar_t(taus[i + 1]);
            let sigma = eta * ((1.0 - ab2) / (1.0 - ab) * (1.0 - ab / ab2)).sqrt();
            let dir = (1.0 - ab2 - sigma * sigma).sqrt() as f32;
            let (sa2, sg) = (ab2.sqrt() as f32, sigma as f32);
            x = x0
                .iter()
                .zip(&eps)
                .map(|(&x0v, &e)| {
                    let mut v = sa2 * x0v + dir * e;
                    if sigma > 0.0 {
                        v += sg * rng::normal_f32(rng);
                    }
                    v
                })
                .collect();
        }
    }
    Ok(x)
}

/// Ancestral (posterior) sampling over every timestep; the final step
/// (t = 1) adds no noise.
pub fn ancestral_core<M>(
    model: &mut M,
    sched: &NoiseSchedule,
    mut x: Vec<f32>,
    rng: &mut Stream,
) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    for t in (1..=sched.steps).rev() {
        let eps = model(&x, t as f32)?;
        let beta = sched.beta_t(t);
        let ab = sched.alpha_bar_t(t);
        let inv_sqrt_a = (1.0 / (1.0 - beta).sqrt()) as f32;
        let coef = (beta / (1.0 - ab).sqrt()) as f32;
        for (xv, &e) in x.iter_mut().zip(&eps) {
            *xv = inv_sqrt_a * (*xv - coef * e);
        }
        if t > 1 {
            let ab_prev = sched.alpha_bar_t(t - 1);
            let sd = ((1.0 - ab_prev) / (1.0 - ab) * beta).sqrt() as f32;
            for xv in x.iter_mut() {
                *xv += sd * rng::normal_f32(rng);
            }
        }
    }
    Ok(x)
}

/// Few-step consistency-style sampling: predict the data estimate, clamp,
/// and re-noise at the next subset timestep with fresh noise.
pub fn lcm_core<M>(
    model: &mut M,
    sched: &NoiseSchedule,
    mut x: Vec<f32>,
    k: usize,
    rng: &mut Stream,
) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let taus = schedule::subset_timesteps(sched.steps, k)?;
    let mut x0 = Vec::new();
    for (i, &tau) in taus.iter().enumerate() {
        let ab = sched.alpha_bar_t(tau);
        let eps = model(&x, tau as f32)?;
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        x0 = x.iter().zip(&eps).map(|(&xv, &e)| ((xv - sb * e) / sa).clamp(-1.0, 1.0)).collect();
        if i + 1 < taus.len() {
            let ab2 = sched.alpha_bar_t(taus[i + 1]);
            let (sa2, sb2) = (ab2.sqrt() as f32, (1.0 - ab2).sqrt() as f32);
            x = x0.iter().map(|&v| sa2 * v + sb2 * rng::normal_f32(rng)).collect();
        }
    }
    Ok(x0)
}

/// EDM sampling on a Karras sigma ladder with a Heun corrector everywhere
/// except the final (sigma = 0) step. The epsilon model is reached through
/// the variance-preserving reparameterization x / sqrt(1 + sigma^2).
pub fn edm_heun_core<M>(
    model: &mut M,
    sched: &NoiseSchedule,
    sigmas: &KarrasSigmas,
    mut x: Vec<f32>,
) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let denoise = |x: &[f32], sigma: f64, model: &mut M| -> Result<Vec<f32>> {
        let t = schedule::nearest_timestep(sched, sigma)?;
        let ab = sched.alpha_bar_t(t);
        let scale = (1.0 / (1.0 + sigma * sigma).sqrt()) as f32;
        let x_vp: Vec<f32> = x.iter().map(|&v| v * scale).collect();
        let eps = model(&x_vp, t as f32)?;
        let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
        Ok(x_vp.iter().zip(&eps).map(|(&xv, &e)| (xv - sb * e) / sa).collect())
    };
    for i in 0..sigmas.n_steps {
        let (s0, s1) = (sigmas.sigma[i], sigmas.sigma[i + 1]);
        let d0 = denoise(&x, s0, model)?;
        let d: Vec<f32> = x.iter().zip(&d0).map(|(&xv, &dv)| (xv - dv) / s0 as f32).collect();
        let h = (s1 - s0) as f32;
        let xp: Vec<f32> = x.iter().zip(&d).map(|(&xv, &dv)| xv + h * dv).collect();
        if s1 > 0.0 {
            let d1 = denoise(&xp, s1, model)?;
            for i in 0..x.len() {
                let d2 = (xp[i] - d1[i]) / s1 as f32;
                x[i] += h * 0.5 * (d[i] + d2);
            }
        } else {
            x = xp;
        }
    }
    Ok(x)
}

/// VP probability-flow drift at normalized time `s` (1 → 0), using the
/// piecewise-constant rate T·beta at timestep max(1, round(s·T)).
fn pf_drift<M>(model: &mut M, sched: &NoiseSchedule, x: &[f32], s: f64) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let t = ((s * sched.steps as f64).round() as usize).max(1);
    let rate = (sched.steps as f64 * sched.beta_t(t)) as f32;
    let ab = sched.alpha_bar_t(t);
    let inv_sb = (1.0 / (1.0 - ab).sqrt()) as f32;
    let eps = model(x, t as f32)?;
    Ok(x.iter().zip(&eps).map(|(&xv, &e)| -0.5 * rate * (xv - e * inv_sb)).collect())
}

/// Probability-flow ODE integrated backward with explicit Euler.
pub fn pf_euler_core<M>(model: &mut M, sched: &NoiseSchedule, mut x: Vec<f32>, steps: usize) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let ds = 1.0 / steps as f64;
    for k in 0..steps {
        let s = 1.0 - k as f64 * ds;
        let drift = pf_drift(model, sched, &x, s)?;
        for (xv, &dv) in x.iter_mut().zip(&drift) {
            *xv -= ds as f32 * dv;
        }
    }
    Ok(x)
}

/// Probability-flow ODE with a Heun (trapezoidal) corrector on every step.
pub fn pf_heun_core<M>(model: &mut M, sched: &NoiseSchedule, mut x: Vec<f32>, steps: usize) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let ds = 1.0 / steps as f64;
    for k in 0..steps {
        let s = 1.0 - k as f64 * ds;
        let d0 = pf_drift(model, sched, &x, s)?;
        let xp: Vec<f32> = x.iter().zip(&d0).map(|(&xv, &dv)| xv - ds as f32 * dv).collect();
        let d1 = pf_drift(model, sched, &xp, s - ds)?;
        for i in 0..x.len() {
            x[i] -= ds as f32 * 0.5 * (d0[i] + d1[i]);
        }
    }
    Ok(x)
}

/// Flow-matching Euler: integrate the learned velocity from t = 1 to 0.
pub fn fm_euler_core<M>(model: &mut M, mut x: Vec<f32>, steps: usize) -> Result<Vec<f32>>
where
    M: FnMut(&[f32], f32) -> Result<Vec<f32>>,
{
    let dt = 1.0 / steps as f32;
    for k in 0..steps {
        let t = 1.0 - k as f32 * dt;
        let v = model(&x, t)?;
        for (xv, &vv) in x.iter_mut().zip(&v) {
            *xv -= dt * vv;
        }
    }
    Ok(x)
}

/// Samples one signed patch conditioned on `y`, starting from seed-derived
/// Gaussian noise and clamping the result to [-1, 1].
pub fn sample_patch(
    ckpt: &Checkpoint,
    y: &[f32],
    spec: &SamplerSpec,
    mode: PrecisionMode,
) -> Result<Vec<f32>> {
    spec.validate()?;
    if ckpt.config.objective != spec.method.objective() {
        return Err(Error::Spec(format!(
            "{} requires a {:?}-objective checkpoint, got {:?}",
            spec.method,
            spec.method.objective(),
            ckpt.config.objective
        )));
    }
    let sched = ckpt.config.schedule.build()?;
    let npix = (ckpt.config.net.patch * ckpt.config.net.patch) as usize;
    if y.len() != npix {
        return Err(Error::Shape(format!("condition holds {} pixels, expected {npix}", y.len())));
    }
    let mut rng = rng::labeled_stream(spec.seed, "sample", 0);
    let x = rng::normal_vec(&mut rng, npix);
    let mut model = |xt: &[f32], t: f32| network::forward(ckpt, xt, y, t, mode);
    let mut out = match spec.method {
        Method::Ddim => ddim_core(&mut model, &sched, x, spec.steps, spec.eta, &mut rng)?,
        Method::Ancestral => ancestral_core(&mut model, &sched, x, &mut rng)?,
        Method::Lcm => lcm_core(&mut model, &sched, x, spec.steps, &mut rng)?,
        Method::EdmHeun => {
            let sigmas = schedule::make_karras(spec.steps, EDM_RHO, EDM_SIGMA_MIN, EDM_SIGMA_MAX)?;
            let x: Vec<f32> = x.iter().map(|&v| v * sigmas.sigma[0] as f32).collect();
            edm_heun_core(&mut model, &sched, &sigmas, x)?
        }
        Method::PfEuler => pf_euler_core(&mut model, &sched, x, spec.steps)?,
        Method::PfHeun => pf_heun_core(&mut model, &sched, x, spec.steps)?,
        Method::FmEuler => fm_euler_core(&mut model, x, spec.steps)?,
    };
    clamp_signed(&mut out);
    Ok(out)
}

/// Fuses a full conditioning grid: signed-normalizes, tiles into patches,
/// samples every tile with a seed derived from the tile index, stitches in
/// raster order, and denormalizes to the 0-63 DN range. Partial edge tiles
/// are cropped away, matching patch extraction.
pub fn fuse_full(cond: &Grid, ckpt: &Checkpoint, spec: &SamplerSpec, mode: PrecisionMode) -> Result<Grid> {
    let patch = ckpt.config.net.patch;
    if cond.width < patch || cond.height < patch {
        return Err(Error::Shape(format!(
            "grid {}x{} smaller than one {patch}x{patch} patch",
            cond.width, cond.height
        )));
    }
    let signed = match cond.units {
        Units::Signed => cond.clone(),
        Units::Dn => raster::normalize_signed(cond)?,
        other => {
            return Err(Error::Units(format!(
                "cannot fuse {} units directly; rescale to dn first",
                other.name()
            )))
        }
    };
    let (tw, th) = (cond.width / patch, cond.height / patch);
    let (ow, oh) = (tw * patch, th * patch);
    let npix = (patch * patch) as usize;
    let tiles: Vec<Result<Vec<f32>>> = (0..(tw * th) as usize)
        .into_par_iter()
        .map(|ti| {
            let (tr, tc) = (ti as u32 / tw, ti as u32 % tw);
            let mut y = Vec::with_capacity(npix);
            for r in 0..patch {
                for c in 0..patch {
                    let v = signed.at(tr * patch + r, tc * patch + c);
                    if v.is_nan() {
                        return Err(Error::Parameter(format!(
                            "missing value inside tile ({tr},{tc})"
                        )));
                    }
                    y.push(v);
                }
            }
            let tile_spec = SamplerSpec { seed: spec.seed ^ ti as u64, ..*spec };
            sample_patch(ckpt, &y, &tile_spec, mode)
        })
        .collect();
    let mut values = vec![0.0f32; (ow * oh) as usize];
    for (ti, tile) in tiles.into_iter().enumerate() {
        let tile = tile?;
        let (tr, tc) = (ti as u32 / tw, ti as u32 % tw);
        for r in 0..patch {
            for c in 0..patch {
                values[((tr * patch + r) * ow + tc * patch + c) as usize] = tile[(r * patch + c) as usize];
            }
        }
    }
    let signed_out = Grid::new(ow, oh, Units::Signed, values)?;
    raster::denormalize_dn(&signed_out)
}

/// Per-pixel mean and population standard deviation over repeated fusions.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub mean: Grid,
    pub std: Grid,
    pub n: usize,
}

/// Runs `fuse_full` n times with seeds spec.seed + 0..n-1.
pub fn ensemble(
    cond: &Grid,
    ckpt: &Checkpoint,
    spec: &SamplerSpec,
    n: usize,
    mode: PrecisionMode,
) -> Result<EnsembleResult> {
    if n < 1 {
        return Err(Error::Parameter("ensemble needs n >= 1".into()));
    }
    let members: Vec<Grid> = (0..n)
        .map(|i| fuse_full(cond, ckpt, &SamplerSpec { seed: spec.seed + i as u64, ..*spec }, mode))
        .collect::<Result<_>>()?;
    let len = members[0].values.len();
    let mut mean = vec![0.0f64; len];
    for m in &members {
        for (a, &v) in mean.iter_mut().zip(&m.values) {
            *a += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n as f64);
    let mut var = vec![0.0f64; len];
    for m in &members {
        for (a, (&v, &mu)) in var.iter_mut().zip(m.values.iter().zip(&mean)) {
            let d = v as f64 - mu;
            *a += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= n as f64);
    let (w, h) = (members[0].width, members[0].height);
    Ok(EnsembleResult {
        mean: Grid::new(w, h, Units::Dn, mean.into_iter().map(|v| v as f32).collect())?,
        std: Grid::new(w, h, Units::Dn, var.into_iter().map(|v| (v.sqrt()) as f32).collect())?,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::test_support::tiny_checkpoint;
    use crate::schedule::ScheduleConfig;
    use std::cell::Cell;

    fn sched100() -> NoiseSchedule {
        ScheduleConfig { steps: 100, ..Default::default() }.build().unwrap()
    }

    /// Stub model returning zero predictions while counting calls.
    fn counting_zero(counter: &Cell<usize>, n: usize) -> impl FnMut(&[f32], f32) -> Result<Vec<f32>> + '_ {
        move |_x, _t| {
            counter.set(counter.get() + 1);
            Ok(vec![0.0; n])
        }
    }

    #[test]
    fn evaluation_counts_are_exact() {
        let sched = sched100();
        let x = vec![0.3f32; 4];
        let count = Cell::new(0usize);
        {
            let mut m = counting_zero(&count, 4);
            let mut r = rng::stream(1);
            ddim_core(&mut m, &sched, x.clone(), 10, 0.0, &mut r).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::Ddim, 10, 100));
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            let mut r = rng::stream(1);
            ancestral_core(&mut m, &sched, x.clone(), &mut r).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::Ancestral, 0, 100));
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            let mut r = rng::stream(1);
            lcm_core(&mut m, &sched, x.clone(), 4, &mut r).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::Lcm, 4, 100));
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            let sig = schedule::make_karras(30, EDM_RHO, EDM_SIGMA_MIN, EDM_SIGMA_MAX).unwrap();
            edm_heun_core(&mut m, &sched, &sig, x.clone()).unwrap();
        }
        assert_eq!(count.get(), 59);
        assert_eq!(expected_evals(Method::EdmHeun, 30, 100), 59);
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            pf_euler_core(&mut m, &sched, x.clone(), 30).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::PfEuler, 30, 100));
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            pf_heun_core(&mut m, &sched, x.clone(), 30).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::PfHeun, 30, 100));
        count.set(0);
        {
            let mut m = counting_zero(&count, 4);
            fm_euler_core(&mut m, x, 30).unwrap();
        }
        assert_eq!(count.get(), expected_evals(Method::FmEuler, 30, 100));
    }

    #[test]
    fn ddim_zero_model_is_pure_scaling() {
        let sched = sched100();
        let x = vec![0.5f32, -0.25];
        let mut m = |_x: &[f32], _t: f32| Ok(vec![0.0f32; 2]);
        let mut r = rng::stream(0);
        // two-step run: first update scales by sqrt(ab(tau1)/ab(tau0)),
        // second emits x0 = x / sqrt(ab(tau1))
        let out = ddim_core(&mut m, &sched, x.clone(), 2, 0.0, &mut r).unwrap();
        let taus = schedule::subset_timesteps(100, 2).unwrap();
        let scale = ((sched.alpha_bar_t(taus[1]) / sched.alpha_bar_t(taus[0])).sqrt()
            / sched.alpha_bar_t(taus[1]).sqrt()) as f32;
        for (o, xv) in out.iter().zip(&x) {
            assert!((o - xv * scale).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_single_step_is_data_estimate() {
        let sched = sched100();
        let x = vec![0.5f32; 3];
        let eps = 0.2f32;
        let mut m = |_x: &[f32], t: f32| {
            assert_eq!(t, 100.0);
            Ok(vec![eps; 3])
        };
        let mut r = rng::stream(0);
        let out = ddim_core(&mut m, &sched, x, 1, 0.0, &mut r).unwrap();
        let ab = sched.alpha_bar_t(100);
        let want = (0.5 - (1.0 - ab).sqrt() as f32 * eps) / ab.sqrt() as f32;
        assert!((out[0] - want).abs() < 1e-6);
    }

    #[test]
    fn lcm_single_step_matches_ddim_single_step_clamped() {
        let sched = sched100();
        let x = vec![0.5f32; 3];
        let mut m = |_x: &[f32], _t: f32| Ok(vec![0.2f32; 3]);
        let mut r = rng::stream(0);
        let ddim = ddim_core(&mut m, &sched, x.clone(), 1, 0.0, &mut r).unwrap();
        let lcm = lcm_core(&mut m, &sched, x, 1, &mut r).unwrap();
        for (a, b) in ddim.iter().zip(&lcm) {
            assert!((a.clamp(-1.0, 1.0) - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ancestral_final_step_adds_no_noise() {
        // T = 2 with a zero model: replay the two posterior updates by hand
        // from the same noise stream; noise enters at t = 2 only.
        let sched = ScheduleConfig { steps: 2, ..Default::default() }.build().unwrap();
        let x = vec![0.7f32, -0.1];
        let mut m = |_x: &[f32], _t: f32| Ok(vec![0.0f32; 2]);
        let out = ancestral_core(&mut m, &sched, x.clone(), &mut rng::stream(1)).unwrap();
        let mut r = rng::stream(1);
        let sd2 = ((1.0 - sched.alpha_bar_t(1)) / (1.0 - sched.alpha_bar_t(2)) * sched.beta_t(2)).sqrt() as f32;
        let inv2 = (1.0 / (1.0 - sched.beta_t(2)).sqrt()) as f32;
        let inv1 = (1.0 / (1.0 - sched.beta_t(1)).sqrt()) as f32;
        let mut exp: Vec<f32> = x.iter().map(|&v| inv2 * v).collect();
        for v in exp.iter_mut() {
            *v += sd2 * rng::normal_f32(&mut r);
        }
        for v in exp.iter_mut() {
            *v = inv1 * *v;
        }
        assert_eq!(out, exp);
    }

    #[test]
    fn edm_fixed_point_when_denoiser_is_identity() {
        let sched = sched100();
        let sig = schedule::make_karras(10, EDM_RHO, EDM_SIGMA_MIN, EDM_SIGMA_MAX).unwrap();
        let x0 = vec![0.4f32, -0.6];
        // epsilon chosen so that D(x, sigma) == x0 exactly
        let sc = sched.clone();
        let x0c = x0.clone();
        let mut m = move |xvp: &[f32], t: f32| {
            let ab = sc.alpha_bar_t(t as usize);
            let (sa, sb) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            Ok(xvp.iter().zip(&x0c).map(|(&v, &o)| (v - sa * o) / sb).collect())
        };
        let out = edm_heun_core(&mut m, &sched, &sig, x0.clone()).unwrap();
        for (o, xv) in out.iter().zip(&x0) {
            assert!((o - xv).abs() < 1e-4, "{o} vs {xv}");
        }
    }

    #[test]
    fn pf_state_constant_when_drift_vanishes() {
        let sched = sched100();
        let sc = sched.clone();
        let mut m = move |x: &[f32], t: f32| {
            let sb = (1.0 - sc.alpha_bar_t(t as usize)).sqrt() as f32;
            Ok(x.iter().map(|&v| v * sb).collect())
        };
        let x = vec![0.3f32, -0.9];
        let e = pf_euler_core(&mut m, &sched, x.clone(), 20).unwrap();
        let h = pf_heun_core(&mut m, &sched, x.clone(), 20).unwrap();
        for i in 0..2 {
            assert!((e[i] - x[i]).abs() < 1e-6);
            assert!((h[i] - x[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn fm_euler_recovers_data_on_constant_velocity() {
        let x0 = vec![0.25f32, -0.5, 0.75];
        let eps = vec![1.0f32, -1.0, 0.5];
        let u: Vec<f32> = eps.iter().zip(&x0).map(|(&e, &a)| e - a).collect();
        for steps in [1, 7, 30] {
            let mut m = |_x: &[f32], _t: f32| Ok(u.clone());
            let out = fm_euler_core(&mut m, eps.clone(), steps).unwrap();
            for (o, &want) in out.iter().zip(&x0) {
                assert!((o - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sampler_objective_compatibility_is_enforced() {
        let noise_ckpt = tiny_checkpoint(Objective::Noise, 1);
        let fm_ckpt = tiny_checkpoint(Objective::Velocity, 1);
        let y = vec![0.0f32; 256];
        let spec = SamplerSpec::new(Method::FmEuler, 100, 0);
        assert!(matches!(sample_patch(&noise_ckpt, &y, &spec, PrecisionMode::Full32), Err(Error::Spec(_))));
        let spec = SamplerSpec::new(Method::Ddim, 100, 0);
        assert!(matches!(sample_patch(&fm_ckpt, &y, &spec, PrecisionMode::Full32), Err(Error::Spec(_))));
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let ckpt = tiny_checkpoint(Objective::Noise, 2);
        let y = vec![0.1f32; 256];
        for method in [Method::Ddim, Method::Lcm, Method::EdmHeun, Method::PfEuler] {
            let spec = SamplerSpec { steps: 4, ..SamplerSpec::new(method, 100, 7) };
            let a = sample_patch(&ckpt, &y, &spec, PrecisionMode::Full32).unwrap();
            let b = sample_patch(&ckpt, &y, &spec, PrecisionMode::Full32).unwrap();
            assert_eq!(a, b, "{method}");
            assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)), "{method}");
        }
    }

    #[test]
    fn ancestral_seeds_differ() {
        let ckpt = tiny_checkpoint(Objective::Noise, 2);
        let y = vec![0.1f32; 256];
        let a = sample_patch(&ckpt, &y, &SamplerSpec::new(Method::Ancestral, 100, 1), PrecisionMode::Full32).unwrap();
        let b = sample_patch(&ckpt, &y, &SamplerSpec::new(Method::Ancestral, 100, 2), PrecisionMode::Full32).unwrap();
        let maxd = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(maxd > 0.0);
    }

    #[test]
    fn fuse_full_tiles_and_denormalizes() {
        let ckpt = tiny_checkpoint(Objective::Noise, 3);
        let cond = Grid::new(32, 32, Units::Dn, vec![10.0; 1024]).unwrap();
        let spec = SamplerSpec { steps: 2, ..SamplerSpec::new(Method::Ddim, 100, 5) };
        let out = fuse_full(&cond, &ckpt, &spec, PrecisionMode::Full32).unwrap();
        assert_eq!((out.width, out.height), (32, 32));
        assert_eq!(out.units, Units::Dn);
        assert!(out.values.iter().all(|&v| (0.0..=63.0).contains(&v)));
        let again = fuse_full(&cond, &ckpt, &spec, PrecisionMode::Full32).unwrap();
        assert_eq!(out.values, again.values);
        // too-small grid
        let small = Grid::new(8, 8, Units::Dn, vec![0.0; 64]).unwrap();
        assert!(matches!(fuse_full(&small, &ckpt, &spec, PrecisionMode::Full32), Err(Error::Shape(_))));
    }

    #[test]
    fn ensemble_statistics() {
        let ckpt = tiny_checkpoint(Objective::Noise, 3);
        let cond = Grid::new(16, 16, Units::Dn, vec![5.0; 256]).unwrap();
        let spec = SamplerSpec { steps: 2, ..SamplerSpec::new(Method::Ddim, 100, 1) };
        let one = ensemble(&cond, &ckpt, &spec, 1, PrecisionMode::Full32).unwrap();
        assert!(one.std.values.iter().all(|&v| v == 0.0));
        let many = ensemble(&cond, &ckpt, &spec, 3, PrecisionMode::Full32).unwrap();
        assert!(many.std.values.iter().all(|&v| v >= 0.0));
        assert!(many.std.values.iter().any(|&v| v > 0.0));
    }
}
