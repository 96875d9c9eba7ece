//! Conditional U-Net predictor: configuration, parameter container,
//! initialization, inference at several precisions, and checkpoint I/O.

pub mod checkpoint;
pub mod layers;
pub mod quant;
pub mod unet;

pub use layers::Scalar;
pub use quant::QuantTensor;
pub use unet::{NetConfig, ParamKind, ParamLayout, ParamSpec};

use crate::error::{Error, Result};
use crate::rng;
use crate::schedule::ScheduleConfig;
use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// What the network is trained to predict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Added noise of the diffusion forward process.
    Noise,
    /// Flow-matching velocity (noise minus data).
    Velocity,
}

/// Numeric mode used for inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    Full32,
    Half16,
    WeightsInt8,
}

impl PrecisionMode {
    /// Whether this mode runs as an emulation on the current build
    /// (no native 16-bit arithmetic; values are rounded through binary16
    /// but computed in f32).
    pub fn emulated(self) -> bool {
        matches!(self, PrecisionMode::Half16)
    }
}

impl fmt::Display for PrecisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecisionMode::Full32 => "full32",
            PrecisionMode::Half16 => "half16",
            PrecisionMode::WeightsInt8 => "weights_int8",
        })
    }
}

impl FromStr for PrecisionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full32" => Ok(PrecisionMode::Full32),
            "half16" => Ok(PrecisionMode::Half16),
            "weights_int8" => Ok(PrecisionMode::WeightsInt8),
            other => Err(Error::Parameter(format!(
                "unknown precision '{other}' (expected full32, half16, or weights_int8)"
            ))),
        }
    }
}

/// Everything needed to rebuild the model and its noise process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    pub objective: Objective,
}

/// Training provenance carried alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub epochs_trained: u32,
    pub best_epoch: u32,
    pub best_val_loss: f64,
}

/// Immutable parameter container. `forward` may be called concurrently;
/// derived precision views are computed once and cached.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub meta: CheckpointMeta,
    /// Flat f32 parameter vector (dequantized values when `quant` is set).
    pub params: Vec<f32>,
    /// Present on weight-quantized checkpoints: codes and per-channel scales.
    pub quant: Option<Vec<QuantTensor>>,
    layout: ParamLayout,
    half_params: OnceCell<Vec<f32>>,
    int8_params: OnceCell<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(
        config: CheckpointConfig,
        meta: CheckpointMeta,
        params: Vec<f32>,
        quant: Option<Vec<QuantTensor>>,
    ) -> Result<Checkpoint> {
        config.schedule.build()?;
        let layout = ParamLayout::build(&config.net)?;
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "parameter vector holds {} values but the architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Checkpoint { config, meta, params, quant, layout, half_params: OnceCell::new(), int8_params: OnceCell::new() })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Parameter name → value slice.
    pub fn tensor(&self, name: &str) -> &[f32] {
        &self.params[self.layout.range(name)]
    }

    /// Replaces the parameter vector, invalidating cached precision views.
    pub fn with_params(&self, params: Vec<f32>) -> Result<Checkpoint> {
        Checkpoint::new(self.config, self.meta, params, None)
    }

    fn params_for(&self, mode: PrecisionMode) -> &[f32] {
        match mode {
            PrecisionMode::Full32 => &self.params,
            PrecisionMode::Half16 => self.half_params.get_or_init(|| {
                let mut p = self.params.clone();
                layers::round_f16(&mut p);
                p
            }),
            PrecisionMode::WeightsInt8 => {
                if self.quant.is_some() {
                    // already stored dequantized
                    &self.params
                } else {
                    self.int8_params.get_or_init(|| {
                        let mut p = self.params.clone();
                        quant::quantize_weights(&self.layout, &mut p);
                        p
                    })
                }
            }
        }
    }
}

/// Deterministic parameter initialization: He-normal weights, zero biases,
/// unit norm gains, and a zero final projection so the untrained network
/// predicts exactly 0.
pub fn init(
    net: NetConfig,
    schedule: ScheduleConfig,
    objective: Objective,
    seed: u64,
) -> Result<Checkpoint> {
    let layout = ParamLayout::build(&net)?;
    let mut rng = rng::labeled_stream(seed, "init", 0);
    let mut params = vec![0.0f32; layout.total];
    for spec in &layout.specs {
        match spec.kind {
            ParamKind::Weight => {
                let fan_in: usize = spec.shape[1..].iter().product();
                let sd = (2.0 / fan_in as f32).sqrt();
                for v in &mut params[spec.range()] {
                    *v = rng::normal_f32(&mut rng) * sd;
                }
            }
            ParamKind::Gamma => params[spec.range()].fill(1.0),
            ParamKind::ZeroWeight | ParamKind::Bias | ParamKind::Beta => {}
        }
    }
    Checkpoint::new(
        CheckpointConfig { net, schedule, objective },
        CheckpointMeta { seed, ..Default::default() },
        params,
        None,
    )
}

/// Maps a timestep to the raw embedding argument. Diffusion checkpoints
/// take integer timesteps directly; flow-matching time on [0,1] is scaled
/// onto a comparable range.
pub fn embed_time(objective: Objective, t: f32) -> f64 {
    match objective {
        Objective::Noise => t as f64,
        Objective::Velocity => t as f64 * 1000.0,
    }
}

fn check_t(ckpt: &Checkpoint, t: f32) -> Result<()> {
    match ckpt.config.objective {
        Objective::Noise => {
            let tmax = ckpt.config.schedule.steps as f32;
            if !(1.0..=tmax).contains(&t) {
                return Err(Error::Parameter(format!("timestep {t} outside 1..={tmax}")));
            }
        }
        Objective::Velocity => {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Parameter(format!("flow time {t} outside [0, 1]")));
            }
        }
    }
    Ok(())
}

/// Single-patch prediction: concatenates the noisy target and the condition
/// channel-wise and runs the network in the requested precision.
pub fn forward(
    ckpt: &Checkpoint,
    x_t: &[f32],
    y: &[f32],
    t: f32,
    mode: PrecisionMode,
) -> Result<Vec<f32>> {
    let net = &ckpt.config.net;
    let n = (net.patch * net.patch) as usize;
    if x_t.len() != n || y.len() != n {
        return Err(Error::Shape(format!(
            "patch inputs must hold {n} values, got {} and {}",
            x_t.len(),
            y.len()
        )));
    }
    check_t(ckpt, t)?;
    let mut input = Vec::with_capacity(2 * n);
    input.extend_from_slice(x_t);
    input.extend_from_slice(y);
    let params = ckpt.params_for(mode);
    let round16 = matches!(mode, PrecisionMode::Half16);
    let t_embed = embed_time(ckpt.config.objective, t);
    let (out, _) = unet::forward_trace(net, &ckpt.layout, params, &input, t_embed, round16)?;
    if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("network produced a non-finite output ({bad})")));
    }
    Ok(out)
}

/// Produces the 8-bit-weight variant of a checkpoint: conv/dense weights are
/// stored as signed codes with per-output-channel scales and replaced by
/// their dequantized values for inference.
pub fn quantize_int8(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let mut params = ckpt.params.clone();
    let table = quant::quantize_weights(&ckpt.layout, &mut params);
    Checkpoint::new(ckpt.config, ckpt.meta, params, Some(table))
}


#[cfg(test)]
mod tests {
    use super::test_support::*;
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let a = tiny_checkpoint(Objective::Noise, 7);
        let b = tiny_checkpoint(Objective::Noise, 7);
        assert_eq!(a.params, b.params);
        let c = tiny_checkpoint(Objective::Noise, 8);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn fresh_network_predicts_zero() {
        let ckpt = tiny_checkpoint(Objective::Noise, 1);
        let mut rng = crate::rng::stream(2);
        let n = 16 * 16;
        let x = crate::rng::normal_vec(&mut rng, n);
        let y = crate::rng::normal_vec(&mut rng, n);
        for mode in [PrecisionMode::Full32, PrecisionMode::Half16, PrecisionMode::WeightsInt8] {
            let out = forward(&ckpt, &x, &y, 10.0, mode).unwrap();
            assert_eq!(out.len(), n);
            assert!(out.iter().all(|&v| v == 0.0), "{mode}");
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        // Independent arithmetic over the default architecture.
        let cfg = NetConfig::default();
        let layout = ParamLayout::build(&cfg).unwrap();
        let (c0, c1, c2) = (64usize, 128, 256);
        let te = 128usize;
        let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
        let lin = |no: usize, ni: usize| no * ni + no;
        let gn = |c: usize| 2 * c;
        let res = |ci: usize, co: usize| {
            gn(ci) + conv(co, ci, 3) + lin(co, te) + gn(co) + conv(co, co, 3)
                + if ci != co { conv(co, ci, 1) } else { 0 }
        };
        let attn = |c: usize| gn(c) + conv(3 * c, c, 1) + conv(c, c, 1);
        let expected = lin(te, te) * 2
            + conv(c0, 2, 3)
            + 2 * res(c0, c0)                                   // enc0
            + conv(c0, c0, 3)                                   // down0
            + res(c0, c1) + res(c1, c1) + 2 * attn(c1)          // enc1
            + conv(c1, c1, 3)                                   // down1
            + res(c1, c2) + res(c2, c2)                         // mid
            + conv(c1, c2, 3)                                   // up1
            + res(2 * c1, c1) + res(c1, c1) + 2 * attn(c1)      // dec1
            + conv(c0, c1, 3)                                   // up0
            + res(2 * c0, c0) + res(c0, c0)                     // dec0
            + gn(c0)
            + conv(1, c0, 3);
        assert_eq!(layout.total, expected);
    }

    #[test]
    fn forward_rejects_bad_timestep() {
        let ckpt = tiny_checkpoint(Objective::Noise, 1);
        let x = vec![0.0; 256];
        assert!(forward(&ckpt, &x, &x, 0.0, PrecisionMode::Full32).is_err());
        assert!(forward(&ckpt, &x, &x, 101.0, PrecisionMode::Full32).is_err());
        let fm = tiny_checkpoint(Objective::Velocity, 1);
        assert!(forward(&fm, &x, &x, 1.5, PrecisionMode::Full32).is_err());
        assert!(forward(&fm, &x, &x, 0.5, PrecisionMode::Full32).is_ok());
    }

    #[test]
    fn forward_rejects_bad_shape() {
        let ckpt = tiny_checkpoint(Objective::Noise, 1);
        let x = vec![0.0; 255];
        assert!(matches!(forward(&ckpt, &x, &x, 1.0, PrecisionMode::Full32), Err(Error::Shape(_))));
    }

    #[test]
    fn half16_stays_close_to_full32() {
        let ckpt = tiny_checkpoint(Objective::Noise, 3);
        // give the zero head some weight so outputs are non-trivial
        let mut params = ckpt.params.clone();
        let mut rng = crate::rng::stream(4);
        for v in &mut params[ckpt.layout().range("conv_out.weight")] {
            *v = crate::rng::normal_f32(&mut rng) * 0.05;
        }
        let ckpt = ckpt.with_params(params).unwrap();
        let x = crate::rng::normal_vec(&mut rng, 256);
        let y = crate::rng::normal_vec(&mut rng, 256);
        let full = forward(&ckpt, &x, &y, 50.0, PrecisionMode::Full32).unwrap();
        let half = forward(&ckpt, &x, &y, 50.0, PrecisionMode::Half16).unwrap();
        let maxdiff = full.iter().zip(&half).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        assert!(maxdiff < 1e-2, "max half16 deviation {maxdiff}");
        assert!(maxdiff > 0.0);
    }

    #[test]
    fn quantized_checkpoint_is_stable() {
        let ckpt = tiny_checkpoint(Objective::Noise, 5);
        let q1 = quantize_int8(&ckpt).unwrap();
        let q2 = quantize_int8(&q1).unwrap();
        assert_eq!(q1.quant, q2.quant);
        assert_eq!(q1.params, q2.params);
        // quantized mode on a quantized checkpoint uses the stored values
        let x = vec![0.25f32; 256];
        let a = forward(&q1, &x, &x, 10.0, PrecisionMode::WeightsInt8).unwrap();
        let b = forward(&ckpt, &x, &x, 10.0, PrecisionMode::WeightsInt8).unwrap();
        assert_eq!(a, b);
    }
}
