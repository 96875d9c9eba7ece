//! Training: diffusion noise-prediction and flow-matching velocity losses,
//! Adam with cosine learning-rate decay, early stopping on validation loss,
//! and finite-difference gradient verification.

use crate::dataset::PatchPair;
use crate::error::{Error, Result};
use crate::network::{self, Checkpoint, NetConfig, Objective, ParamLayout, Scalar};
use crate::rng::{self, Stream};
use crate::schedule::NoiseSchedule;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Number of deterministic reduction chunks for per-batch parallelism.
/// Fixed (not thread-count dependent) so gradient sums are reproducible.
const GRAD_CHUNKS: usize = 8;

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub lr0: f64,
    pub lr_min: f64,
    pub max_epochs: u32,
    pub batch: usize,
    pub patience: u32,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: Objective::Noise,
            lr0: 1e-3,
            lr_min: 1e-6,
            max_epochs: 1500,
            batch: 32,
            patience: 200,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr0) {
            return Err(Error::Parameter(format!("lr_min {} must be < lr0 {}", self.lr_min, self.lr0)));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Parameter(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::Parameter("invalid Adam moments".into()));
        }
        Ok(())
    }
}

/// Cosine decay from lr0 at epoch 0 to lr_min at max_epochs.
pub fn lr_at(epoch: u32, cfg: &TrainConfig) -> f64 {
    let frac = epoch as f64 / cfg.max_epochs as f64;
    cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// One epoch row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Full per-epoch record plus the early-stopping outcome.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: u32,
    pub best_val_loss: f64,
}

/// The random draws consumed by one batch item: a timestep and a
/// per-pixel noise field.
#[derive(Debug, Clone)]
pub struct NoiseDraw {
    pub t: f32,
    pub eps: Vec<f32>,
}

/// Draws the per-item randomness for a batch up front (sequentially), so
/// loss evaluation can be parallelized without changing the result.
pub fn draw_noise(
    objective: Objective,
    steps: usize,
    items: usize,
    npix: usize,
    rng: &mut Stream,
) -> Vec<NoiseDraw> {
    (0..items)
        .map(|_| {
            let t = match objective {
                Objective::Noise => rng.gen_range(1..=steps) as f32,
                Objective::Velocity => rng.gen_range(0.0..1.0f32),
            };
            NoiseDraw { t, eps: rng::normal_vec(rng, npix) }
        })
        .collect()
}

/// Loss and parameter gradients over a batch slice with fixed draws,
/// computed sequentially at the given precision. Returns the mean loss
/// scaled for the stated total batch size.
#[allow(clippy::too_many_arguments)]
fn loss_grads_seq<T: Scalar>(
    net: &NetConfig,
    layout: &ParamLayout,
    params: &[T],
    objective: Objective,
    sched: Option<&NoiseSchedule>,
    batch: &[PatchPair],
    draws: &[NoiseDraw],
    total_items: usize,
    grads: Option<&mut [T]>,
) -> Result<f64> {
    let npix = (net.patch * net.patch) as usize;
    let mut grads = grads;
    let mut loss_sum = 0.0f64;
    for (pair, draw) in batch.iter().zip(draws) {
        if pair.cond.len() != npix || pair.target.len() != npix {
            return Err(Error::Shape(format!(
                "patch pair holds {} pixels, network expects {npix}",
                pair.target.len()
            )));
        }
        let x0: Vec<T> = pair.target.iter().map(|&v| T::from_f32c(v)).collect();
        let eps: Vec<T> = draw.eps.iter().map(|&v| T::from_f32c(v)).collect();
        // forward process sample and regression target
        let (x_t, target): (Vec<T>, Vec<T>) = match objective {
            Objective::Noise => {
                let sched = sched.expect("noise objective needs a schedule");
                let ab = sched.alpha_bar_t(draw.t as usize);
                let (sa, sb) = (T::from_f64c(ab.sqrt()), T::from_f64c((1.0 - ab).sqrt()));
                let x_t = x0.iter().zip(&eps).map(|(&a, &e)| sa * a + sb * e).collect();
                (x_t, eps.clone())
            }
            Objective::Velocity => {
                let t = T::from_f32c(draw.t);
                let x_t = x0.iter().zip(&eps).map(|(&a, &e)| (T::one() - t) * a + t * e).collect();
                let u = eps.iter().zip(&x0).map(|(&e, &a)| e - a).collect();
                (x_t, u)
            }
        };
        let mut input = x_t;
        input.extend(pair.cond.iter().map(|&v| T::from_f32c(v)));
        let t_embed = network::embed_time(objective, draw.t);
        let (pred, trace) = crate::network::unet::forward_trace(net, layout, params, &input, t_embed, false)?;
        let resid: Vec<T> = pred.iter().zip(&target).map(|(&p, &u)| p - u).collect();
        let item_loss: f64 =
            resid.iter().map(|&r| (r * r).to_f64().unwrap_or(f64::NAN)).sum::<f64>() / npix as f64;
        if !item_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {item_loss}")));
        }
        loss_sum += item_loss;
        if let Some(g) = grads.as_deref_mut() {
            let scale = T::from_f64c(2.0 / (npix * total_items) as f64);
            let d_out: Vec<T> = resid.iter().map(|&r| r * scale).collect();
            crate::network::unet::backward(net, layout, params, &trace, &d_out, g);
        }
    }
    Ok(loss_sum)
}

/// Batch loss and gradients with explicit draws, parallelized over a fixed
/// number of chunks whose partial gradients are summed in chunk order.
pub fn batch_loss_with_draws(
    ckpt: &Checkpoint,
    sched: Option<&NoiseSchedule>,
    batch: &[PatchPair],
    draws: &[NoiseDraw],
    want_grads: bool,
) -> Result<(f64, Vec<f32>)> {
    if batch.is_empty() {
        return Err(Error::Parameter("empty batch".into()));
    }
    debug_assert_eq!(batch.len(), draws.len());
    let net = &ckpt.config.net;
    let layout = ckpt.layout();
    let total = batch.len();
    let chunk = total.div_ceil(GRAD_CHUNKS);
    let parts: Vec<Result<(f64, Vec<f32>)>> = batch
        .par_chunks(chunk)
        .zip(draws.par_chunks(chunk))
        .map(|(b, d)| {
            let mut g = if want_grads { vec![0.0f32; layout.total] } else { Vec::new() };
            let loss = loss_grads_seq(
                net,
                layout,
                &ckpt.params,
                ckpt.config.objective,
                sched,
                b,
                d,
                total,
                if want_grads { Some(&mut g) } else { None },
            )?;
            Ok((loss, g))
        })
        .collect();
    let mut loss = 0.0f64;
    let mut grads = vec![0.0f32; if want_grads { layout.total } else { 0 }];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += *b;
        }
    }
    Ok((loss / total as f64, grads))
}

/// Diffusion noise-prediction loss over one batch: per item, a uniform
/// timestep and Gaussian noise produce x_t, and the network regresses
/// the noise under mean squared error.
pub fn diffusion_batch_loss(
    ckpt: &Checkpoint,
    sched: &NoiseSchedule,
    batch: &[PatchPair],
    rng: &mut Stream,
) -> Result<(f64, Vec<f32>)> {
    let npix = (ckpt.config.net.patch * ckpt.config.net.patch) as usize;
    let draws = draw_noise(Objective::Noise, sched.steps, batch.len(), npix, rng);
    batch_loss_with_draws(ckpt, Some(sched), batch, &draws, true)
}

/// Flow-matching velocity loss: straight-line interpolation between data
/// and noise, regressing u = noise − data.
pub fn fm_batch_loss(ckpt: &Checkpoint, batch: &[PatchPair], rng: &mut Stream) -> Result<(f64, Vec<f32>)> {
    let npix = (ckpt.config.net.patch * ckpt.config.net.patch) as usize;
    let draws = draw_noise(Objective::Velocity, 0, batch.len(), npix, rng);
    batch_loss_with_draws(ckpt, None, batch, &draws, true)
}

/// Adam optimizer state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl Adam {
    pub fn new(n: usize, cfg: &TrainConfig) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: cfg.beta1, beta2: cfg.beta2, epsilon: cfg.epsilon }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] as f64 / bc1;
            let vhat = self.v[i] as f64 / bc2;
            params[i] -= (lr * mhat / (vhat.sqrt() + self.epsilon)) as f32;
        }
    }
}

/// Full training loop: shuffled mini-batches, Adam at the cosine-decayed
/// rate, per-epoch validation with noise draws that are identical across
/// epochs, and early stopping with the best-epoch snapshot returned.
pub fn train(
    ckpt: &Checkpoint,
    train_set: &[PatchPair],
    val_set: &[PatchPair],
    cfg: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Parameter("training and validation sets must be nonempty".into()));
    }
    if cfg.objective != ckpt.config.objective {
        return Err(Error::Parameter("checkpoint and train config disagree on the objective".into()));
    }
    let sched = match cfg.objective {
        Objective::Noise => Some(ckpt.config.schedule.build()?),
        Objective::Velocity => None,
    };
    let npix = (ckpt.config.net.patch * ckpt.config.net.patch) as usize;
    let layout_total = ckpt.layout().total;
    let mut params = ckpt.params.clone();
    let mut adam = Adam::new(layout_total, cfg);
    let mut history = TrainHistory { best_val_loss: f64::INFINITY, ..Default::default() };
    let mut best_params = params.clone();
    let mut since_best = 0u32;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle = rng::labeled_stream(cfg.seed, "shuffle", epoch as u64);
        for i in (1..order.len()).rev() {
            let j = shuffle.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut noise = rng::labeled_stream(cfg.seed, "train-noise", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<PatchPair> = idx.iter().map(|&i| train_set[i].clone()).collect();
            let draws = draw_noise(cfg.objective, sched.as_ref().map_or(0, |s| s.steps), batch.len(), npix, &mut noise);
            let view = checkpoint_view(ckpt, &params)?;
            let (loss, grads) = batch_loss_with_draws(&view, sched.as_ref(), &batch, &draws, true)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            adam.step(&mut params, &grads, lr);
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;

        // validation with draws that repeat identically every epoch
        let mut val_noise = rng::labeled_stream(cfg.seed, "val-noise", 0);
        let val_draws = draw_noise(cfg.objective, sched.as_ref().map_or(0, |s| s.steps), val_set.len(), npix, &mut val_noise);
        let view = checkpoint_view(ckpt, &params)?;
        let (val_loss, _) = batch_loss_with_draws(&view, sched.as_ref(), val_set, &val_draws, false)
            .map_err(|e| Error::Numeric(format!("epoch {epoch} validation: {e}")))?;

        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, lr });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_params.copy_from_slice(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let mut best = ckpt.with_params(best_params)?;
    best.meta.seed = cfg.seed;
    best.meta.epochs_trained = history.epochs.len() as u32;
    best.meta.best_epoch = history.best_epoch;
    best.meta.best_val_loss = history.best_val_loss;
    Ok((best, history))
}

fn checkpoint_view(ckpt: &Checkpoint, params: &[f32]) -> Result<Checkpoint> {
    ckpt.with_params(params.to_vec())
}

/// Writes the per-epoch log as CSV (epoch, train_loss, val_loss, lr).
pub fn write_history_csv(history: &TrainHistory, path: &Path) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss,lr\n");
    for r in &history.epochs {
        out.push_str(&format!("{},{:.9e},{:.9e},{:.9e}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
    }
    Ok(std::fs::write(path, out)?)
}

/// Result of the finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Verifies analytic gradients against central finite differences
/// (step 1e-3) on at least 100 randomly chosen parameters of a small
/// network. Runs in f64 so the difference quotient itself is trustworthy.
pub fn check_gradients(net: NetConfig, objective: Objective, seed: u64) -> Result<GradCheckReport> {
    let layout = ParamLayout::build(&net)?;
    let sched = crate::schedule::ScheduleConfig { steps: 50, ..Default::default() }.build()?;
    let mut rng = rng::labeled_stream(seed, "gradcheck", 0);
    // fully random parameters (including the normally zero output head)
    let params: Vec<f64> = (0..layout.total).map(|_| rng::normal_f32(&mut rng) as f64 * 0.05).collect();
    let npix = (net.patch * net.patch) as usize;
    let batch: Vec<PatchPair> = (0..2)
        .map(|i| PatchPair {
            cond: rng::normal_vec(&mut rng, npix).iter().map(|v| v * 0.5).collect(),
            target: rng::normal_vec(&mut rng, npix).iter().map(|v| v * 0.5).collect(),
            row0: 0,
            col0: i,
            patch: net.patch,
        })
        .collect();
    let draws = draw_noise(objective, sched.steps, batch.len(), npix, &mut rng);
    let sched_opt = match objective {
        Objective::Noise => Some(&sched),
        Objective::Velocity => None,
    };

    let loss_at = |p: &[f64]| -> Result<f64> {
        let l = loss_grads_seq(&net, &layout, p, objective, sched_opt, &batch, &draws, batch.len(), None)?;
        Ok(l / batch.len() as f64)
    };
    let mut grads = vec![0.0f64; layout.total];
    loss_grads_seq(&net, &layout, &params, objective, sched_opt, &batch, &draws, batch.len(), Some(&mut grads))?;

    let n_checked = 120.max(100);
    let mut max_rel = 0.0f64;
    let mut pick = rng::labeled_stream(seed, "gradcheck-pick", 1);
    let h = 1e-3;
    for _ in 0..n_checked {
        let i = pick.gen_range(0..layout.total);
        let mut p = params.clone();
        p[i] = params[i] + h;
        let lp = loss_at(&p)?;
        p[i] = params[i] - h;
        let lm = loss_at(&p)?;
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = grads[i];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    if max_rel >= 1e-3 {
        return Err(Error::Numeric(format!("gradient check failed: max relative error {max_rel:.3e}")));
    }
    Ok(GradCheckReport { checked: n_checked, max_rel_err: max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::test_support::{tiny_checkpoint, tiny_net};

    fn random_pairs(n: usize, patch: u32, seed: u64) -> Vec<PatchPair> {
        let mut rng = rng::stream(seed);
        let npix = (patch * patch) as usize;
        (0..n)
            .map(|i| PatchPair {
                cond: rng::normal_vec(&mut rng, npix).iter().map(|v| v * 0.3).collect(),
                target: rng::normal_vec(&mut rng, npix).iter().map(|v| v * 0.3).collect(),
                row0: 0,
                col0: i as u32,
                patch,
            })
            .collect()
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 1e-3);
        assert!((lr_at(cfg.max_epochs, &cfg) - 1e-6).abs() < 1e-15);
        assert!((lr_at(750, &cfg) - 5.005e-4).abs() < 1e-9);
        // monotonically nonincreasing
        let mut prev = f64::INFINITY;
        for e in 0..=cfg.max_epochs {
            let lr = lr_at(e, &cfg);
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn zero_network_diffusion_loss_near_one() {
        let ckpt = tiny_checkpoint(Objective::Noise, 1);
        let sched = ckpt.config.schedule.build().unwrap();
        let pairs = random_pairs(40, 16, 2); // 40 * 256 = 10240 pixels
        let mut rng = rng::stream(3);
        let (loss, _) = diffusion_batch_loss(&ckpt, &sched, &pairs, &mut rng).unwrap();
        assert!((0.97..=1.03).contains(&loss), "loss {loss}");
    }

    #[test]
    fn zero_network_fm_loss_near_one_on_zero_targets() {
        let ckpt = tiny_checkpoint(Objective::Velocity, 1);
        let mut pairs = random_pairs(40, 16, 4);
        for p in &mut pairs {
            p.target.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = rng::stream(5);
        let (loss, _) = fm_batch_loss(&ckpt, &pairs, &mut rng).unwrap();
        assert!((0.97..=1.03).contains(&loss), "loss {loss}");
    }

    #[test]
    fn loss_is_invariant_under_batch_permutation() {
        let ckpt = tiny_checkpoint(Objective::Velocity, 6);
        let pairs = random_pairs(5, 16, 7);
        let mut rng = rng::stream(8);
        let draws = draw_noise(Objective::Velocity, 0, 5, 256, &mut rng);
        let (a, _) = batch_loss_with_draws(&ckpt, None, &pairs, &draws, false).unwrap();
        let perm = [3usize, 1, 4, 0, 2];
        let pp: Vec<PatchPair> = perm.iter().map(|&i| pairs[i].clone()).collect();
        let dd: Vec<NoiseDraw> = perm.iter().map(|&i| draws[i].clone()).collect();
        let (b, _) = batch_loss_with_draws(&ckpt, None, &pp, &dd, false).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn adam_step_at_zero_lr_is_identity() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(4, &cfg);
        let mut params = vec![0.5f32, -1.25, 0.0, 3.75];
        let orig = params.clone();
        adam.step(&mut params, &[0.1, -0.2, 0.3, 0.0], 0.0);
        assert_eq!(params.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   orig.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn gradients_match_finite_differences_noise() {
        let report = check_gradients(tiny_net(), Objective::Noise, 21).unwrap();
        assert!(report.checked >= 100);
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradients_match_finite_differences_velocity() {
        let report = check_gradients(tiny_net(), Objective::Velocity, 22).unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn fixed_batch_overfits() {
        let ckpt = tiny_checkpoint(Objective::Noise, 30);
        let sched = ckpt.config.schedule.build().unwrap();
        let pairs = random_pairs(2, 16, 31);
        let mut rng = rng::stream(32);
        let draws = draw_noise(Objective::Noise, sched.steps, 2, 256, &mut rng);
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(ckpt.layout().total, &cfg);
        let mut params = ckpt.params.clone();
        let mut first_50 = Vec::new();
        let mut reached = false;
        for step in 0..2000 {
            let view = ckpt.with_params(params.clone()).unwrap();
            let (loss, grads) = batch_loss_with_draws(&view, Some(&sched), &pairs, &draws, true).unwrap();
            if step < 50 {
                first_50.push(loss);
            }
            if loss < 0.01 {
                reached = true;
                break;
            }
            adam.step(&mut params, &grads, 1e-3);
        }
        assert!(first_50.last().unwrap() < first_50.first().unwrap(), "loss did not decrease over first steps");
        assert!(reached, "fixed batch never reached loss < 0.01");
    }

    #[test]
    fn training_is_deterministic_and_early_stops() {
        let ckpt = tiny_checkpoint(Objective::Noise, 40);
        let pairs = random_pairs(12, 16, 41);
        let (tr, va) = (&pairs[..8], &pairs[8..]);
        let cfg = TrainConfig { max_epochs: 12, patience: 4, batch: 4, seed: 9, ..Default::default() };
        let (best_a, hist_a) = train(&ckpt, tr, va, &cfg).unwrap();
        let (best_b, hist_b) = train(&ckpt, tr, va, &cfg).unwrap();
        assert_eq!(best_a.params, best_b.params);
        assert_eq!(hist_a, hist_b);
        let min_val = hist_a.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(hist_a.best_val_loss, min_val);
        assert!(hist_a.epochs.len() <= cfg.max_epochs as usize);
    }

    #[test]
    fn rejects_bad_config_and_empty_split() {
        let ckpt = tiny_checkpoint(Objective::Noise, 1);
        let pairs = random_pairs(2, 16, 1);
        let bad = TrainConfig { lr_min: 1.0, ..Default::default() };
        assert!(train(&ckpt, &pairs, &pairs, &bad).is_err());
        let cfg = TrainConfig { max_epochs: 1, patience: 1, ..Default::default() };
        assert!(train(&ckpt, &[], &pairs, &cfg).is_err());
    }

    #[test]
    fn config_roundtrips_through_json() {
        let cfg = TrainConfig { objective: Objective::Velocity, seed: 5, ..Default::default() };
        let s = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
        assert!(serde_json::from_str::<TrainConfig>("{\"bogus\":1}").is_err());
    }
}
