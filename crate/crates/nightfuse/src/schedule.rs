//! Noise-level ladders: discrete beta/alpha-bar schedules (linear, cosine),
//! the Karras sigma ladder for the EDM sampler, the VP sigma <-> timestep
//! bridge, and timestep subset selection for DDIM/LCM.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Which discrete variance schedule to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Serializable schedule configuration; the full ladder is reproducible
/// from this and is what checkpoints record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    /// Linear: (beta_1, beta_T). Cosine: (s offset, beta_max clip).
    pub a: f64,
    pub b: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { kind: ScheduleKind::Linear, steps: 1000, a: 1e-4, b: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self.kind {
            ScheduleKind::Linear => make_linear(self.steps, self.a, self.b),
            ScheduleKind::Cosine => make_cosine(self.steps, self.a, self.b),
        }
    }
}

/// Discrete variance schedule {beta_t, alpha_t, alpha_bar_t}, t = 1..=T.
/// Vectors are 0-indexed: `beta[t-1]` is beta_t.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.steps
    }

    /// beta_t for 1-indexed t.
    pub fn beta_t(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// alpha_bar_t for 1-indexed t.
    pub fn alpha_bar_t(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn validate(&self) -> Result<()> {
        for (i, &b) in self.beta.iter().enumerate() {
            if !(b > 0.0 && b <= 0.999) {
                return Err(Error::Parameter(format!("beta_{} = {b} outside (0, 0.999]", i + 1)));
            }
        }
        for w in self.alpha_bar.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::Parameter("alpha_bar not strictly decreasing".into()));
            }
        }
        Ok(())
    }
}

fn finish(kind: ScheduleKind, beta: Vec<f64>) -> Result<NoiseSchedule> {
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(alpha.len());
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    let sched = NoiseSchedule { kind, steps: beta.len(), beta, alpha, alpha_bar };
    sched.validate()?;
    Ok(sched)
}

/// Linear schedule: beta_t interpolates b1..bT over T steps.
pub fn make_linear(t_steps: usize, b1: f64, b_t: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Parameter(format!("T = {t_steps} must be >= 2")));
    }
    if !(b1 > 0.0 && b1 <= b_t && b_t < 1.0) {
        return Err(Error::Parameter(format!("invalid beta bounds ({b1}, {b_t})")));
    }
    let beta = (0..t_steps)
        .map(|i| b1 + (i as f64) / (t_steps as f64 - 1.0) * (b_t - b1))
        .collect();
    finish(ScheduleKind::Linear, beta)
}

/// Cosine schedule: alpha_bar from f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
/// betas from consecutive alpha_bar ratios, clipped at `beta_max`, then
/// alpha_bar recomputed from the clipped betas.
pub fn make_cosine(t_steps: usize, s: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if t_steps < 2 {
        return Err(Error::Parameter(format!("T = {t_steps} must be >= 2")));
    }
    if !(s > 0.0) || !(beta_max > 0.0 && beta_max < 1.0) {
        return Err(Error::Parameter(format!("invalid cosine parameters s={s} beta_max={beta_max}")));
    }
    let f = |t: f64| {
        let x = ((t / t_steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let mut beta = Vec::with_capacity(t_steps);
    let mut prev = 1.0f64; // f(0)/f(0)
    for t in 1..=t_steps {
        let cur = f(t as f64) / f0;
        beta.push((1.0 - cur / prev).min(beta_max));
        prev = cur;
    }
    finish(ScheduleKind::Cosine, beta)
}

/// Descending Karras sigma ladder sigma_0..sigma_N with sigma_N = 0.
#[derive(Debug, Clone)]
pub struct KarrasSigmas {
    pub n_steps: usize,
    pub rho: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Length n_steps + 1; final entry is 0.
    pub sigma: Vec<f64>,
}

/// sigma_i = (max^(1/rho) + (i/(N-1)) (min^(1/rho) - max^(1/rho)))^rho.
pub fn make_karras(n: usize, rho: f64, sigma_min: f64, sigma_max: f64) -> Result<KarrasSigmas> {
    if n < 2 {
        return Err(Error::Parameter(format!("N = {n} must be >= 2")));
    }
    if !(sigma_min > 0.0 && sigma_min < sigma_max) {
        return Err(Error::Parameter(format!("invalid sigma bounds ({sigma_min}, {sigma_max})")));
    }
    if !(rho > 0.0) {
        return Err(Error::Parameter(format!("rho = {rho} must be positive")));
    }
    let inv = 1.0 / rho;
    let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
    let mut sigma: Vec<f64> = (0..n)
        .map(|i| (hi + (i as f64) / (n as f64 - 1.0) * (lo - hi)).powf(rho))
        .collect();
    sigma.push(0.0);
    Ok(KarrasSigmas { n_steps: n, rho, sigma_min, sigma_max, sigma })
}

/// VP-process noise level sqrt((1 - alpha_bar_t) / alpha_bar_t).
pub fn vp_sigma(sched: &NoiseSchedule, t: usize) -> Result<f64> {
    if t < 1 || t > sched.steps {
        return Err(Error::Parameter(format!("t = {t} outside 1..={}", sched.steps)));
    }
    let ab = sched.alpha_bar_t(t);
    Ok(((1.0 - ab) / ab).sqrt())
}

/// Timestep whose VP sigma is closest to `sigma`; ties go to the smaller t.
pub fn nearest_timestep(sched: &NoiseSchedule, sigma: f64) -> Result<usize> {
    if sigma < 0.0 {
        return Err(Error::Parameter(format!("sigma = {sigma} must be >= 0")));
    }
    let mut best_t = 1;
    let mut best_d = f64::INFINITY;
    for t in 1..=sched.steps {
        let d = (vp_sigma(sched, t)? - sigma).abs();
        if d < best_d {
            best_d = d;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// n unique timesteps, evenly spaced by floor(T/n) starting from T,
/// strictly descending, last >= 1.
pub fn subset_timesteps(t_steps: usize, n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > t_steps {
        return Err(Error::Parameter(format!("n = {n} outside 1..={t_steps}")));
    }
    let stride = t_steps / n;
    let out: Vec<usize> = (0..n).map(|i| t_steps - i * stride).collect();
    debug_assert!(*out.last().unwrap() >= 1);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn self_consistent(sched: &NoiseSchedule) {
        let mut prod = 1.0f64;
        for t in 1..=sched.steps {
            prod *= sched.alpha[t - 1];
            let rel = ((sched.alpha_bar_t(t) - prod) / prod).abs();
            assert!(rel < 1e-12, "alpha_bar inconsistent at t={t}: rel {rel}");
        }
    }

    #[test]
    fn linear_endpoints() {
        let s = make_linear(1000, 1e-4, 0.02).unwrap();
        assert!((s.beta_t(1) - 1e-4).abs() < 1e-16);
        assert!((s.beta_t(1000) - 0.02).abs() < 1e-16);
        self_consistent(&s);
    }

    #[test]
    fn linear_two_steps() {
        let s = make_linear(2, 1e-4, 0.02).unwrap();
        assert_eq!(s.beta, vec![1e-4, 0.02]);
    }

    #[test]
    fn linear_rejects_bad_bounds() {
        assert!(make_linear(1, 1e-4, 0.02).is_err());
        assert!(make_linear(10, 0.02, 1e-4).is_err());
        assert!(make_linear(10, 0.0, 0.02).is_err());
    }

    #[test]
    fn cosine_clip_and_tail() {
        let s = make_cosine(1000, 0.008, 0.999).unwrap();
        // clip active at the end since f(T) = cos^2(pi/2) ~ 0
        assert!((s.beta_t(1000) - 0.999).abs() < 1e-15);
        for w in s.beta.windows(2) {
            assert!(w[1] >= w[0] - 1e-15, "cosine beta not nondecreasing");
        }
        // derived: alpha_bar_T < 1e-3 for T = 1000 (numerically ~2.4e-9)
        assert!(s.alpha_bar_t(1000) < 1e-3);
        self_consistent(&s);
    }

    #[test]
    fn karras_endpoints_and_monotone() {
        let k = make_karras(30, 7.0, 0.002, 80.0).unwrap();
        assert_eq!(k.sigma.len(), 31);
        assert!((k.sigma[0] - 80.0).abs() < 1e-12);
        assert!((k.sigma[29] - 0.002).abs() < 1e-12);
        assert_eq!(k.sigma[30], 0.0);
        for w in k.sigma.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn karras_rho_one_is_linear() {
        let k = make_karras(5, 1.0, 0.002, 80.0).unwrap();
        for i in 0..5 {
            let expect = 80.0 + (i as f64) / 4.0 * (0.002 - 80.0);
            assert!((k.sigma[i] - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn karras_larger_rho_pushes_interior_down() {
        let a = make_karras(10, 3.0, 0.002, 80.0).unwrap();
        let b = make_karras(10, 7.0, 0.002, 80.0).unwrap();
        for i in 1..9 {
            assert!(b.sigma[i] < a.sigma[i]);
        }
    }

    #[test]
    fn vp_bridge_roundtrip() {
        let s = make_linear(100, 1e-4, 0.02).unwrap();
        let mut prev = 0.0;
        for t in 1..=100 {
            let sig = vp_sigma(&s, t).unwrap();
            assert!(sig > prev, "vp_sigma not strictly increasing");
            prev = sig;
            assert_eq!(nearest_timestep(&s, sig).unwrap(), t);
        }
        assert!(vp_sigma(&s, 0).is_err());
        assert!(vp_sigma(&s, 101).is_err());
    }

    #[test]
    fn subset_shapes() {
        let taus = subset_timesteps(1000, 30).unwrap();
        assert_eq!(taus.len(), 30);
        assert_eq!(taus[0], 1000);
        assert_eq!(taus[29], 1000 - 29 * 33);
        for w in taus.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert_eq!(subset_timesteps(5, 5).unwrap(), vec![5, 4, 3, 2, 1]);
        assert_eq!(subset_timesteps(1000, 1).unwrap(), vec![1000]);
        assert!(subset_timesteps(10, 11).is_err());
    }
}
