//! Numeric primitives for the U-Net: convolution, group normalization,
//! SiLU, linear maps, single-head self-attention, and nearest-neighbor
//! resampling. Every primitive comes as a forward that caches what its
//! backward needs, generic over f32/f64 so the finite-difference gradient
//! oracle can run in double precision.

use num_traits::Float;

/// Float element the network can run in.
pub trait Scalar:
    Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f32c(v: f32) -> Self;
    fn to_f32c(self) -> f32;
    fn from_f64c(v: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f32c(v: f32) -> f32 {
        v
    }
    fn to_f32c(self) -> f32 {
        self
    }
    fn from_f64c(v: f64) -> f32 {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f32c(v: f32) -> f64 {
        v as f64
    }
    fn to_f32c(self) -> f32 {
        self as f32
    }
    fn from_f64c(v: f64) -> f64 {
        v
    }
}

/// Rounds every element through IEEE binary16.
pub fn round_f16<T: Scalar>(buf: &mut [T]) {
    for v in buf.iter_mut() {
        *v = T::from_f32c(half::f16::from_f32(v.to_f32c()).to_f32());
    }
}

const GN_EPS: f64 = 1e-5;

/// 2-D convolution, square kernel, padding k/2. `x` is CHW.
/// Returns the CHW output of spatial size (h/stride, w/stride) for k=3
/// (stride 1 or 2) and (h, w) for k=1.
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    w: &[T],
    b: &[T],
    x: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
) -> Vec<T> {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![T::zero(); cout * oh * ow];
    for o in 0..cout {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        out_o.fill(b[o]);
        for i in 0..cin {
            let x_i = &x[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[((o * cin + i) * k + ky) * k + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_i[iy as usize * wd..(iy as usize + 1) * wd];
                        let o_row = &mut out_o[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let (o_lo, x_lo) = if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
                            let n = (ow - o_lo).min(wd - x_lo);
                            for (ov, xv) in o_row[o_lo..o_lo + n].iter_mut().zip(&x_row[x_lo..x_lo + n]) {
                                *ov += wv * *xv;
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    o_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`]: accumulates dw/db into the given slices and
/// returns dx.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_bwd<T: Scalar>(
    w: &[T],
    x: &[T],
    dy: &[T],
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut dx = vec![T::zero(); cin * h * wd];
    for o in 0..cout {
        let dy_o = &dy[o * oh * ow..(o + 1) * oh * ow];
        db[o] += dy_o.iter().copied().sum();
        for i in 0..cin {
            let x_i = &x[i * h * wd..(i + 1) * h * wd];
            let dx_i = &mut dx[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = w[widx];
                    let mut dw_acc = T::zero();
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_i[iy as usize * wd..(iy as usize + 1) * wd];
                        let dx_row = &mut dx_i[iy as usize * wd..(iy as usize + 1) * wd];
                        let dy_row = &dy_o[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let shift = kx as isize - pad as isize;
                            let (o_lo, x_lo) = if shift < 0 { ((-shift) as usize, 0) } else { (0, shift as usize) };
                            let n = (ow - o_lo).min(wd - x_lo);
                            for idx in 0..n {
                                let g = dy_row[o_lo + idx];
                                dw_acc += g * x_row[x_lo + idx];
                                dx_row[x_lo + idx] += wv * g;
                            }
                        } else {
                            for ox in 0..ow {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix >= 0 && ix < wd as isize {
                                    let g = dy_row[ox];
                                    dw_acc += g * x_row[ix as usize];
                                    dx_row[ix as usize] += wv * g;
                                }
                            }
                        }
                    }
                    dw[widx] += dw_acc;
                }
            }
        }
    }
    dx
}

/// Cache for the group-norm backward pass.
pub struct GnCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Group normalization over CHW with `groups` channel groups.
pub fn group_norm<T: Scalar>(
    gamma: &[T],
    beta: &[T],
    x: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
) -> (Vec<T>, GnCache<T>) {
    debug_assert_eq!(channels % groups, 0);
    let cg = channels / groups;
    let gsize = cg * spatial;
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); groups];
    let eps = T::from_f64c(GN_EPS);
    for g in 0..groups {
        let base = g * gsize;
        let chunk = &x[base..base + gsize];
        let n = T::from_f64c(gsize as f64);
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let istd = (var + eps).sqrt().recip();
        inv_std[g] = istd;
        for c in 0..cg {
            let ch = g * cg + c;
            for s in 0..spatial {
                let idx = base + c * spatial + s;
                let xh = (x[idx] - mean) * istd;
                xhat[idx] = xh;
                out[idx] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    (out, GnCache { xhat, inv_std })
}

/// Backward of [`group_norm`]; accumulates dgamma/dbeta, returns dx.
#[allow(clippy::too_many_arguments)]
pub fn group_norm_bwd<T: Scalar>(
    gamma: &[T],
    cache: &GnCache<T>,
    dy: &[T],
    channels: usize,
    spatial: usize,
    groups: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let cg = channels / groups;
    let gsize = cg * spatial;
    let mut dx = vec![T::zero(); dy.len()];
    for g in 0..groups {
        let base = g * gsize;
        let n = T::from_f64c(gsize as f64);
        // per-group reductions of dxhat and dxhat * xhat
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for c in 0..cg {
            let ch = g * cg + c;
            let mut dg = T::zero();
            let mut db = T::zero();
            for s in 0..spatial {
                let idx = base + c * spatial + s;
                let dxh = dy[idx] * gamma[ch];
                sum_dxhat += dxh;
                sum_dxhat_xhat += dxh * cache.xhat[idx];
                dg += dy[idx] * cache.xhat[idx];
                db += dy[idx];
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        let mean_dxhat = sum_dxhat / n;
        let mean_dxhat_xhat = sum_dxhat_xhat / n;
        let istd = cache.inv_std[g];
        for c in 0..cg {
            let ch = g * cg + c;
            for s in 0..spatial {
                let idx = base + c * spatial + s;
                let dxh = dy[idx] * gamma[ch];
                dx[idx] = istd * (dxh - mean_dxhat - cache.xhat[idx] * mean_dxhat_xhat);
            }
        }
    }
    dx
}

/// SiLU activation x * sigmoid(x).
pub fn silu<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Backward of SiLU given the pre-activation input.
pub fn silu_bwd<T: Scalar>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * s * (T::one() + v * (T::one() - s))
        })
        .collect()
}

fn sigmoid<T: Scalar>(v: T) -> T {
    (T::one() + (-v).exp()).recip()
}

/// Dense layer y = W x + b with W of shape [out, in].
pub fn linear<T: Scalar>(w: &[T], b: &[T], x: &[T], n_in: usize, n_out: usize) -> Vec<T> {
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            b[o] + row.iter().zip(x).map(|(&wv, &xv)| wv * xv).sum::<T>()
        })
        .collect()
}

/// Backward of [`linear`]; accumulates dw/db, returns dx.
pub fn linear_bwd<T: Scalar>(
    w: &[T],
    x: &[T],
    dy: &[T],
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
) -> Vec<T> {
    let mut dx = vec![T::zero(); n_in];
    for o in 0..n_out {
        let g = dy[o];
        db[o] += g;
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            drow[i] += g * x[i];
            dx[i] += row[i] * g;
        }
    }
    dx
}

/// Nearest-neighbor 2x upsample of a CHW buffer.
pub fn upsample2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * 2, w * 2);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[ch * oh * ow + y * ow + xx] = x[ch * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

/// Backward of [`upsample2`]: sums the four contributions per source pixel.
pub fn upsample2_bwd<T: Scalar>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h * 2, w * 2);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                dx[ch * h * w + (y / 2) * w + xx / 2] += dy[ch * oh * ow + y * ow + xx];
            }
        }
    }
    dx
}

/// Cache for the attention backward pass.
pub struct AttnCache<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Row-stochastic attention matrix, [n, n].
    pub a: Vec<T>,
}

/// Single-head self-attention over `n` positions with `c` channels.
/// `qkv` is the concatenated [3c, n] projection output; returns the
/// attended values [c, n].
pub fn attention<T: Scalar>(qkv: &[T], c: usize, n: usize) -> (Vec<T>, AttnCache<T>) {
    let q = qkv[..c * n].to_vec();
    let k = qkv[c * n..2 * c * n].to_vec();
    let v = qkv[2 * c * n..].to_vec();
    let scale = T::from_f64c(1.0 / (c as f64).sqrt());
    let mut a = vec![T::zero(); n * n];
    for i in 0..n {
        let mut maxv = T::neg_infinity();
        for j in 0..n {
            let mut s = T::zero();
            for ch in 0..c {
                s += q[ch * n + i] * k[ch * n + j];
            }
            let s = s * scale;
            a[i * n + j] = s;
            if s > maxv {
                maxv = s;
            }
        }
        let row = &mut a[i * n..(i + 1) * n];
        let mut z = T::zero();
        for s in row.iter_mut() {
            *s = (*s - maxv).exp();
            z += *s;
        }
        for s in row.iter_mut() {
            *s /= z;
        }
    }
    let mut out = vec![T::zero(); c * n];
    for ch in 0..c {
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += a[i * n + j] * v[ch * n + j];
            }
            out[ch * n + i] = acc;
        }
    }
    (out, AttnCache { q, k, v, a })
}

/// Backward of [`attention`]: returns d(qkv).
pub fn attention_bwd<T: Scalar>(cache: &AttnCache<T>, dy: &[T], c: usize, n: usize) -> Vec<T> {
    let scale = T::from_f64c(1.0 / (c as f64).sqrt());
    let (q, k, v, a) = (&cache.q, &cache.k, &cache.v, &cache.a);
    let mut dqkv = vec![T::zero(); 3 * c * n];
    let (dq_rng, dk_rng, dv_rng) = (0..c * n, c * n..2 * c * n, 2 * c * n..3 * c * n);
    // dv[ch,j] = sum_i a[i,j] dy[ch,i]
    for ch in 0..c {
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..n {
                acc += a[i * n + j] * dy[ch * n + i];
            }
            dqkv[dv_rng.start + ch * n + j] = acc;
        }
    }
    // da[i,j] = sum_ch dy[ch,i] v[ch,j], then softmax backward per row
    let mut ds = vec![T::zero(); n * n];
    for i in 0..n {
        let mut dot = T::zero();
        for j in 0..n {
            let mut da = T::zero();
            for ch in 0..c {
                da += dy[ch * n + i] * v[ch * n + j];
            }
            ds[i * n + j] = da;
            dot += a[i * n + j] * da;
        }
        for j in 0..n {
            ds[i * n + j] = a[i * n + j] * (ds[i * n + j] - dot);
        }
    }
    // dq[ch,i] = scale * sum_j ds[i,j] k[ch,j]; dk[ch,j] = scale * sum_i ds[i,j] q[ch,i]
    for ch in 0..c {
        for i in 0..n {
            let mut acc = T::zero();
            for j in 0..n {
                acc += ds[i * n + j] * k[ch * n + j];
            }
            dqkv[dq_rng.start + ch * n + i] = acc * scale;
        }
        for j in 0..n {
            let mut acc = T::zero();
            for i in 0..n {
                acc += ds[i * n + j] * q[ch * n + i];
            }
            dqkv[dk_rng.start + ch * n + j] = acc * scale;
        }
    }
    dqkv
}

/// Sinusoidal timestep embedding with frequencies 10000^(-2i/dim).
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / half as f64);
        out[i] = T::from_f64c((t * freq).sin());
        out[half + i] = T::from_f64c((t * freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 is identity
        let x: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let y = conv2d(&[1.0], &[0.0], &x, 1, 4, 4, 1, 1, 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv3x3_known_value() {
        // all-ones 3x3 kernel over all-ones 3x3 input, zero pad:
        // center sees 9, edges see 6, corners see 4
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let y = conv2d(&w, &[0.0], &x, 1, 3, 3, 1, 3, 1);
        assert_eq!(y, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_stride2_shape() {
        let x = vec![1.0f32; 2 * 8 * 8];
        let w = vec![0.1f32; 3 * 2 * 9];
        let y = conv2d(&w, &[0.0; 3], &x, 2, 8, 8, 3, 3, 2);
        assert_eq!(y.len(), 3 * 4 * 4);
    }

    // Finite-difference checks of each primitive's backward, in f64.
    fn fd_check<F>(n_in: usize, n_grad: usize, loss: F)
    where
        F: Fn(&[f64]) -> (f64, Vec<f64>),
    {
        let mut x: Vec<f64> = (0..n_in).map(|i| ((i * 37 % 17) as f64 - 8.0) * 0.13).collect();
        let (_, grad) = loss(&x);
        assert_eq!(grad.len(), n_in);
        let eps = 1e-5;
        for i in (0..n_in).step_by((n_in / n_grad).max(1)) {
            let orig = x[i];
            x[i] = orig + eps;
            let (lp, _) = loss(&x);
            x[i] = orig - eps;
            let (lm, _) = loss(&x);
            x[i] = orig;
            let num = (lp - lm) / (2.0 * eps);
            let denom = grad[i].abs().max(num.abs()).max(1e-8);
            assert!(
                ((grad[i] - num) / denom).abs() < 1e-6,
                "fd mismatch at {i}: analytic {} numeric {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn conv_bwd_matches_fd() {
        let (cin, h, w, cout, k) = (2, 5, 5, 3, 3);
        let wlen = cout * cin * k * k;
        let xlen = cin * h * w;
        // check input gradient
        let weights: Vec<f64> = (0..wlen).map(|i| ((i % 11) as f64 - 5.0) * 0.07).collect();
        let bias = vec![0.1; cout];
        fd_check(xlen, 12, |x| {
            let y = conv2d(&weights, &bias, x, cin, h, w, cout, k, 1);
            let l: f64 = y.iter().map(|v| v * v).sum();
            let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; cout];
            let dx = conv2d_bwd(&weights, x, &dy, cin, h, w, cout, k, 1, &mut dw, &mut db);
            (l, dx)
        });
        // check weight gradient
        let x0: Vec<f64> = (0..xlen).map(|i| ((i % 13) as f64 - 6.0) * 0.05).collect();
        fd_check(wlen, 12, |wv| {
            let y = conv2d(wv, &bias, &x0, cin, h, w, cout, k, 2);
            let l: f64 = y.iter().map(|v| v * v).sum();
            let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let mut dw = vec![0.0; wlen];
            let mut db = vec![0.0; cout];
            conv2d_bwd(wv, &x0, &dy, cin, h, w, cout, k, 2, &mut dw, &mut db);
            (l, dw)
        });
    }

    #[test]
    fn group_norm_bwd_matches_fd() {
        let (c, s, g) = (4, 6, 2);
        let gamma: Vec<f64> = (0..c).map(|i| 1.0 + 0.1 * i as f64).collect();
        let beta: Vec<f64> = (0..c).map(|i| 0.05 * i as f64).collect();
        fd_check(c * s, 10, |x| {
            let (y, cache) = group_norm(&gamma, &beta, x, c, s, g);
            let l: f64 = y.iter().enumerate().map(|(i, v)| v * v * (1.0 + i as f64 * 0.01)).sum();
            let dy: Vec<f64> =
                y.iter().enumerate().map(|(i, v)| 2.0 * v * (1.0 + i as f64 * 0.01)).collect();
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            let dx = group_norm_bwd(&gamma, &cache, &dy, c, s, g, &mut dg, &mut db);
            (l, dx)
        });
    }

    #[test]
    fn attention_bwd_matches_fd() {
        let (c, n) = (3, 5);
        fd_check(3 * c * n, 15, |qkv| {
            let (y, cache) = attention(qkv, c, n);
            let l: f64 = y.iter().map(|v| v * v).sum();
            let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let dqkv = attention_bwd(&cache, &dy, c, n);
            (l, dqkv)
        });
    }

    #[test]
    fn silu_and_linear_bwd_match_fd() {
        fd_check(10, 10, |x| {
            let y = silu(x);
            let l: f64 = y.iter().map(|v| v * v).sum();
            let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            (l, silu_bwd(x, &dy))
        });
        let w: Vec<f64> = (0..12).map(|i| (i as f64 - 6.0) * 0.1).collect();
        let b = vec![0.2; 3];
        fd_check(4, 4, |x| {
            let y = linear(&w, &b, x, 4, 3);
            let l: f64 = y.iter().map(|v| v * v).sum();
            let dy: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
            let mut dw = vec![0.0; 12];
            let mut db = vec![0.0; 3];
            (l, linear_bwd(&w, x, &dy, 4, 3, &mut dw, &mut db))
        });
    }

    #[test]
    fn upsample_roundtrip_gradient() {
        let x: Vec<f32> = (0..8).map(|v| v as f32).collect();
        let y = upsample2(&x, 2, 2, 2);
        assert_eq!(y.len(), 2 * 4 * 4);
        assert_eq!(y[0], x[0]);
        assert_eq!(y[1], x[0]);
        let dy = vec![1.0f32; y.len()];
        let dx = upsample2_bwd(&dy, 2, 2, 2);
        assert!(dx.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn sinusoidal_shape() {
        let e: Vec<f64> = sinusoidal_embedding(10.0, 8);
        assert_eq!(e.len(), 8);
        assert!((e[0] - (10.0f64).sin()).abs() < 1e-12);
        assert!((e[4] - (10.0f64).cos()).abs() < 1e-12);
    }
}
