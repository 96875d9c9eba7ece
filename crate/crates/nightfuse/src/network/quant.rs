//! Per-output-channel 8-bit weight quantization.
//!
//! Convolution and dense weights are mapped to signed 8-bit codes with one
//! scale per output channel (`scale = max|w| / 127`, zero-point fixed at 0);
//! biases and normalization parameters stay in f32. A channel that is
//! entirely zero gets the degenerate scale 1 with all-zero codes so it
//! dequantizes to exact zeros.

use super::unet::{ParamKind, ParamLayout};

/// Quantized form of one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    pub name: String,
    /// One scale per output channel (first tensor dimension).
    pub scales: Vec<f32>,
    /// Row-major signed codes; dequantized value = code * scale[channel].
    pub codes: Vec<i8>,
}

/// Quantizes every conv/dense weight in the flat parameter vector,
/// returning the code table and overwriting the weights in `params`
/// with their dequantized values.
pub fn quantize_weights(layout: &ParamLayout, params: &mut [f32]) -> Vec<QuantTensor> {
    let mut table = Vec::new();
    for spec in &layout.specs {
        if !matches!(spec.kind, ParamKind::Weight | ParamKind::ZeroWeight) {
            continue;
        }
        let cout = spec.shape[0];
        let per_ch = spec.len() / cout;
        let w = &mut params[spec.range()];
        let mut scales = Vec::with_capacity(cout);
        let mut codes = Vec::with_capacity(spec.len());
        for c in 0..cout {
            let row = &mut w[c * per_ch..(c + 1) * per_ch];
            let maxabs = row.iter().fold(0f32, |m, v| m.max(v.abs()));
            let scale = if maxabs == 0.0 { 1.0 } else { maxabs / 127.0 };
            scales.push(scale);
            for v in row.iter_mut() {
                let code = (*v / scale).round().clamp(-127.0, 127.0) as i8;
                codes.push(code);
                *v = code as f32 * scale;
            }
        }
        table.push(QuantTensor { name: spec.name.clone(), scales, codes });
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use super::super::unet::{NetConfig, ParamLayout};

    fn tiny_layout() -> ParamLayout {
        ParamLayout::build(&NetConfig {
            patch: 16,
            base_width: 8,
            attention_resolution: 8,
            t_embed_dim: 16,
            norm_groups: 4,
            blocks_per_level: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn roundoff_bounded_by_half_scale() {
        let layout = tiny_layout();
        let mut rng = crate::rng::stream(11);
        let orig: Vec<f32> = (0..layout.total).map(|_| crate::rng::normal_f32(&mut rng)).collect();
        let mut deq = orig.clone();
        let table = quantize_weights(&layout, &mut deq);
        let mut ti = 0;
        for spec in &layout.specs {
            if !matches!(spec.kind, ParamKind::Weight | ParamKind::ZeroWeight) {
                // untouched
                assert_eq!(&deq[spec.range()], &orig[spec.range()]);
                continue;
            }
            let t = &table[ti];
            ti += 1;
            let cout = spec.shape[0];
            let per_ch = spec.len() / cout;
            for c in 0..cout {
                let scale = t.scales[c];
                for i in 0..per_ch {
                    let idx = spec.offset + c * per_ch + i;
                    assert!((orig[idx] - deq[idx]).abs() <= scale / 2.0 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn requantization_is_idempotent() {
        let layout = tiny_layout();
        let mut rng = crate::rng::stream(12);
        let mut params: Vec<f32> = (0..layout.total).map(|_| crate::rng::normal_f32(&mut rng)).collect();
        let t1 = quantize_weights(&layout, &mut params);
        let mut again = params.clone();
        let t2 = quantize_weights(&layout, &mut again);
        assert_eq!(t1, t2);
        assert_eq!(params, again);
    }

    #[test]
    fn zero_channel_gets_unit_scale() {
        let layout = tiny_layout();
        let mut params = vec![0.0f32; layout.total];
        let table = quantize_weights(&layout, &mut params);
        for t in &table {
            assert!(t.scales.iter().all(|&s| s == 1.0));
            assert!(t.codes.iter().all(|&c| c == 0));
        }
        assert!(params.iter().all(|&v| v == 0.0));
    }
}
