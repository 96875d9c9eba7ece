//! Conditional U-Net assembly: parameter layout, traced forward pass, and
//! the matching reverse-mode backward pass.
//!
//! Three resolution levels (patch, patch/2, patch/4) with self-attention
//! exactly at the middle resolution. The condition enters by channel-wise
//! concatenation at the input; the timestep enters every residual block
//! through a sinusoidal embedding passed through a two-layer MLP.

use super::layers::{self as nn, AttnCache, GnCache, Scalar};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::ops::Range;

/// Network architecture configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub patch: u32,
    /// Noisy target plus condition, concatenated channel-wise.
    pub in_channels: u32,
    pub out_channels: u32,
    pub base_width: u32,
    pub level_multipliers: [u32; 3],
    pub attention_resolution: u32,
    pub t_embed_dim: u32,
    pub norm_groups: u32,
    pub blocks_per_level: u32,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch: 32,
            in_channels: 2,
            out_channels: 1,
            base_width: 64,
            level_multipliers: [1, 2, 4],
            attention_resolution: 16,
            t_embed_dim: 128,
            norm_groups: 8,
            blocks_per_level: 2,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch < 8 || self.patch % 4 != 0 {
            return Err(Error::Parameter(format!("patch {} must be >= 8 and divisible by 4", self.patch)));
        }
        if self.attention_resolution != self.patch / 2 {
            return Err(Error::Parameter(format!(
                "attention resolution {} must be the middle level {}",
                self.attention_resolution,
                self.patch / 2
            )));
        }
        if self.in_channels < 2 || self.out_channels == 0 {
            return Err(Error::Parameter("need >= 2 input channels and >= 1 output channel".into()));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::Parameter("blocks_per_level must be >= 1".into()));
        }
        if self.t_embed_dim % 2 != 0 || self.t_embed_dim == 0 {
            return Err(Error::Parameter("t_embed_dim must be even and positive".into()));
        }
        for m in self.level_multipliers {
            let c = self.base_width * m;
            if c == 0 || c % self.norm_groups != 0 {
                return Err(Error::Parameter(format!(
                    "channel count {c} must be a positive multiple of norm_groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Channel widths of the three resolution levels.
    pub fn channels(&self) -> [usize; 3] {
        [
            (self.base_width * self.level_multipliers[0]) as usize,
            (self.base_width * self.level_multipliers[1]) as usize,
            (self.base_width * self.level_multipliers[2]) as usize,
        ]
    }
}

/// How a parameter tensor is initialized and whether it is quantizable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv/linear weight, He-normal init, int8-quantizable.
    Weight,
    /// Final projection weight, zero init, int8-quantizable.
    ZeroWeight,
    Bias,
    Gamma,
    Beta,
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: ParamKind,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered map of all network parameters onto one flat vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub total: usize,
    by_name: HashMap<String, usize>,
}

impl ParamLayout {
    pub fn build(cfg: &NetConfig) -> Result<ParamLayout> {
        cfg.validate()?;
        let mut b = LayoutBuilder::default();
        let [c0, c1, c2] = cfg.channels();
        let te = cfg.t_embed_dim as usize;
        let bpl = cfg.blocks_per_level as usize;

        b.linear("time_mlp.fc1", te, te);
        b.linear("time_mlp.fc2", te, te);
        b.conv("conv_in", c0, cfg.in_channels as usize, 3);
        for i in 0..bpl {
            b.res_block(&format!("enc0.block{i}"), c0, c0, te);
        }
        b.conv("down0", c0, c0, 3);
        for i in 0..bpl {
            b.res_block(&format!("enc1.block{i}"), if i == 0 { c0 } else { c1 }, c1, te);
            b.attn(&format!("enc1.attn{i}"), c1);
        }
        b.conv("down1", c1, c1, 3);
        for i in 0..bpl {
            b.res_block(&format!("mid.block{i}"), if i == 0 { c1 } else { c2 }, c2, te);
        }
        b.conv("up1.conv", c1, c2, 3);
        for i in 0..bpl {
            b.res_block(&format!("dec1.block{i}"), if i == 0 { 2 * c1 } else { c1 }, c1, te);
            b.attn(&format!("dec1.attn{i}"), c1);
        }
        b.conv("up0.conv", c0, c1, 3);
        for i in 0..bpl {
            b.res_block(&format!("dec0.block{i}"), if i == 0 { 2 * c0 } else { c0 }, c0, te);
        }
        b.gn("out_norm", c0);
        b.push("conv_out.weight", vec![cfg.out_channels as usize, c0, 3, 3], ParamKind::ZeroWeight);
        b.push("conv_out.bias", vec![cfg.out_channels as usize], ParamKind::Bias);
        Ok(b.finish())
    }

    pub fn spec(&self, name: &str) -> &ParamSpec {
        &self.specs[self.by_name[name]]
    }

    pub fn range(&self, name: &str) -> Range<usize> {
        self.spec(name).range()
    }
}

#[derive(Default)]
struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: &str, shape: Vec<usize>, kind: ParamKind) {
        let len: usize = shape.iter().product();
        self.specs.push(ParamSpec { name: name.to_string(), shape, offset: self.offset, kind });
        self.offset += len;
    }

    fn conv(&mut self, prefix: &str, cout: usize, cin: usize, k: usize) {
        self.push(&format!("{prefix}.weight"), vec![cout, cin, k, k], ParamKind::Weight);
        self.push(&format!("{prefix}.bias"), vec![cout], ParamKind::Bias);
    }

    fn linear(&mut self, prefix: &str, nout: usize, nin: usize) {
        self.push(&format!("{prefix}.weight"), vec![nout, nin], ParamKind::Weight);
        self.push(&format!("{prefix}.bias"), vec![nout], ParamKind::Bias);
    }

    fn gn(&mut self, prefix: &str, c: usize) {
        self.push(&format!("{prefix}.gamma"), vec![c], ParamKind::Gamma);
        self.push(&format!("{prefix}.beta"), vec![c], ParamKind::Beta);
    }

    fn res_block(&mut self, prefix: &str, cin: usize, cout: usize, te: usize) {
        self.gn(&format!("{prefix}.norm1"), cin);
        self.conv(&format!("{prefix}.conv1"), cout, cin, 3);
        self.linear(&format!("{prefix}.temb"), cout, te);
        self.gn(&format!("{prefix}.norm2"), cout);
        self.conv(&format!("{prefix}.conv2"), cout, cout, 3);
        if cin != cout {
            self.conv(&format!("{prefix}.skip"), cout, cin, 1);
        }
    }

    fn attn(&mut self, prefix: &str, c: usize) {
        self.gn(&format!("{prefix}.norm"), c);
        self.conv(&format!("{prefix}.qkv"), 3 * c, c, 1);
        self.conv(&format!("{prefix}.proj"), c, c, 1);
    }

    fn finish(self) -> ParamLayout {
        let by_name = self.specs.iter().enumerate().map(|(i, s)| (s.name.clone(), i)).collect();
        ParamLayout { specs: self.specs, total: self.offset, by_name }
    }
}

/// Read-only view of the flat parameter vector.
struct P<'a, T> {
    layout: &'a ParamLayout,
    data: &'a [T],
}

impl<'a, T> P<'a, T> {
    fn s(&self, name: &str) -> &'a [T] {
        &self.data[self.layout.range(name)]
    }
}

/// Mutable gradient accumulator over the same layout.
struct G<'a, T> {
    layout: &'a ParamLayout,
    data: &'a mut [T],
}

impl<T> G<'_, T> {
    /// Disjoint weight/bias (or gamma/beta) slices for one layer; the two
    /// tensors are registered adjacently so the first range ends before
    /// the second starts.
    fn pair(&mut self, first: &str, second: &str) -> (&mut [T], &mut [T]) {
        let r1 = self.layout.range(first);
        let r2 = self.layout.range(second);
        debug_assert!(r1.end <= r2.start);
        let (a, b) = self.data.split_at_mut(r2.start);
        (&mut a[r1], &mut b[..r2.end - r2.start])
    }
}

struct ResCache<T> {
    x: Vec<T>,
    gn1: GnCache<T>,
    n1: Vec<T>,
    s1: Vec<T>,
    gn2: GnCache<T>,
    n2: Vec<T>,
    s2: Vec<T>,
}

struct AttnBlockCache<T> {
    gn: GnCache<T>,
    ng: Vec<T>,
    att: AttnCache<T>,
    att_out: Vec<T>,
}

/// All intermediate activations of one forward pass.
pub struct Trace<T> {
    input: Vec<T>,
    temb0: Vec<T>,
    t1: Vec<T>,
    t1s: Vec<T>,
    temb: Vec<T>,
    st: Vec<T>,
    enc0: Vec<ResCache<T>>,
    skip0: Vec<T>,
    enc1: Vec<(ResCache<T>, AttnBlockCache<T>)>,
    skip1: Vec<T>,
    mid: Vec<ResCache<T>>,
    up1_in: Vec<T>,
    dec1: Vec<(ResCache<T>, AttnBlockCache<T>)>,
    up0_in: Vec<T>,
    dec0: Vec<ResCache<T>>,
    out_gn: GnCache<T>,
    out_n: Vec<T>,
    out_s: Vec<T>,
}

/// Spatial sizes of the three levels.
fn levels(cfg: &NetConfig) -> [usize; 3] {
    let p = cfg.patch as usize;
    [p, p / 2, p / 4]
}

fn res_forward<T: Scalar>(
    p: &P<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    side: usize,
    groups: usize,
    st: &[T],
    x: Vec<T>,
) -> (Vec<T>, ResCache<T>) {
    let sp = side * side;
    let (n1, gn1) = nn::group_norm(p.s(&format!("{prefix}.norm1.gamma")), p.s(&format!("{prefix}.norm1.beta")), &x, cin, sp, groups);
    let s1 = nn::silu(&n1);
    let mut h = nn::conv2d(p.s(&format!("{prefix}.conv1.weight")), p.s(&format!("{prefix}.conv1.bias")), &s1, cin, side, side, cout, 3, 1);
    let te = st.len();
    let tproj = nn::linear(p.s(&format!("{prefix}.temb.weight")), p.s(&format!("{prefix}.temb.bias")), st, te, cout);
    for c in 0..cout {
        let add = tproj[c];
        for v in &mut h[c * sp..(c + 1) * sp] {
            *v += add;
        }
    }
    let (n2, gn2) = nn::group_norm(p.s(&format!("{prefix}.norm2.gamma")), p.s(&format!("{prefix}.norm2.beta")), &h, cout, sp, groups);
    let s2 = nn::silu(&n2);
    let mut out = nn::conv2d(p.s(&format!("{prefix}.conv2.weight")), p.s(&format!("{prefix}.conv2.bias")), &s2, cout, side, side, cout, 3, 1);
    if cin == cout {
        for (o, xv) in out.iter_mut().zip(&x) {
            *o += *xv;
        }
    } else {
        let skip = nn::conv2d(p.s(&format!("{prefix}.skip.weight")), p.s(&format!("{prefix}.skip.bias")), &x, cin, side, side, cout, 1, 1);
        for (o, sv) in out.iter_mut().zip(&skip) {
            *o += *sv;
        }
    }
    (out, ResCache { x, gn1, n1, s1, gn2, n2, s2 })
}

#[allow(clippy::too_many_arguments)]
fn res_backward<T: Scalar>(
    p: &P<T>,
    g: &mut G<T>,
    prefix: &str,
    cache: &ResCache<T>,
    cin: usize,
    cout: usize,
    side: usize,
    groups: usize,
    st: &[T],
    d_st: &mut [T],
    d_out: &[T],
) -> Vec<T> {
    let sp = side * side;
    let te = st.len();
    let d_s2 = {
        let (dw, db) = g.pair(&format!("{prefix}.conv2.weight"), &format!("{prefix}.conv2.bias"));
        nn::conv2d_bwd(p.s(&format!("{prefix}.conv2.weight")), &cache.s2, d_out, cout, side, side, cout, 3, 1, dw, db)
    };
    let d_n2 = nn::silu_bwd(&cache.n2, &d_s2);
    let d_h = {
        let (dg, db) = g.pair(&format!("{prefix}.norm2.gamma"), &format!("{prefix}.norm2.beta"));
        nn::group_norm_bwd(p.s(&format!("{prefix}.norm2.gamma")), &cache.gn2, &d_n2, cout, sp, groups, dg, db)
    };
    // timestep injection: broadcast add over spatial positions
    let d_tproj: Vec<T> = (0..cout).map(|c| d_h[c * sp..(c + 1) * sp].iter().copied().sum()).collect();
    {
        let (dw, db) = g.pair(&format!("{prefix}.temb.weight"), &format!("{prefix}.temb.bias"));
        let d = nn::linear_bwd(p.s(&format!("{prefix}.temb.weight")), st, &d_tproj, te, cout, dw, db);
        for (a, b) in d_st.iter_mut().zip(&d) {
            *a += *b;
        }
    }
    let d_s1 = {
        let (dw, db) = g.pair(&format!("{prefix}.conv1.weight"), &format!("{prefix}.conv1.bias"));
        nn::conv2d_bwd(p.s(&format!("{prefix}.conv1.weight")), &cache.s1, &d_h, cin, side, side, cout, 3, 1, dw, db)
    };
    let d_n1 = nn::silu_bwd(&cache.n1, &d_s1);
    let mut d_x = {
        let (dg, db) = g.pair(&format!("{prefix}.norm1.gamma"), &format!("{prefix}.norm1.beta"));
        nn::group_norm_bwd(p.s(&format!("{prefix}.norm1.gamma")), &cache.gn1, &d_n1, cin, sp, groups, dg, db)
    };
    if cin == cout {
        for (a, b) in d_x.iter_mut().zip(d_out) {
            *a += *b;
        }
    } else {
        let (dw, db) = g.pair(&format!("{prefix}.skip.weight"), &format!("{prefix}.skip.bias"));
        let d_skip = nn::conv2d_bwd(p.s(&format!("{prefix}.skip.weight")), &cache.x, d_out, cin, side, side, cout, 1, 1, dw, db);
        for (a, b) in d_x.iter_mut().zip(&d_skip) {
            *a += *b;
        }
    }
    d_x
}

fn attn_forward<T: Scalar>(
    p: &P<T>,
    prefix: &str,
    c: usize,
    side: usize,
    groups: usize,
    x: &[T],
) -> (Vec<T>, AttnBlockCache<T>) {
    let sp = side * side;
    let (ng, gn) = nn::group_norm(p.s(&format!("{prefix}.norm.gamma")), p.s(&format!("{prefix}.norm.beta")), x, c, sp, groups);
    let qkv = nn::conv2d(p.s(&format!("{prefix}.qkv.weight")), p.s(&format!("{prefix}.qkv.bias")), &ng, c, side, side, 3 * c, 1, 1);
    let (att_out, att) = nn::attention(&qkv, c, sp);
    let proj = nn::conv2d(p.s(&format!("{prefix}.proj.weight")), p.s(&format!("{prefix}.proj.bias")), &att_out, c, side, side, c, 1, 1);
    let out: Vec<T> = x.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
    (out, AttnBlockCache { gn, ng, att, att_out })
}

#[allow(clippy::too_many_arguments)]
fn attn_backward<T: Scalar>(
    p: &P<T>,
    g: &mut G<T>,
    prefix: &str,
    cache: &AttnBlockCache<T>,
    c: usize,
    side: usize,
    groups: usize,
    d_out: &[T],
) -> Vec<T> {
    let sp = side * side;
    let d_att_out = {
        let (dw, db) = g.pair(&format!("{prefix}.proj.weight"), &format!("{prefix}.proj.bias"));
        nn::conv2d_bwd(p.s(&format!("{prefix}.proj.weight")), &cache.att_out, d_out, c, side, side, c, 1, 1, dw, db)
    };
    let d_qkv = nn::attention_bwd(&cache.att, &d_att_out, c, sp);
    let d_ng = {
        let (dw, db) = g.pair(&format!("{prefix}.qkv.weight"), &format!("{prefix}.qkv.bias"));
        nn::conv2d_bwd(p.s(&format!("{prefix}.qkv.weight")), &cache.ng, &d_qkv, c, side, side, 3 * c, 1, 1, dw, db)
    };
    let mut d_x = {
        let (dg, db) = g.pair(&format!("{prefix}.norm.gamma"), &format!("{prefix}.norm.beta"));
        nn::group_norm_bwd(p.s(&format!("{prefix}.norm.gamma")), &cache.gn, &d_ng, c, sp, groups, dg, db)
    };
    for (a, b) in d_x.iter_mut().zip(d_out) {
        *a += *b;
    }
    d_x
}

/// Full traced forward pass. `input` is the concatenated
/// [noisy target ; condition] CHW buffer; `t_embed` is the raw value fed
/// to the sinusoidal embedding. With `round16`, activations are rounded
/// through binary16 after every block to emulate half-precision inference.
pub fn forward_trace<T: Scalar>(
    cfg: &NetConfig,
    layout: &ParamLayout,
    params: &[T],
    input: &[T],
    t_embed: f64,
    round16: bool,
) -> Result<(Vec<T>, Trace<T>)> {
    let [c0, c1, c2] = cfg.channels();
    let [r0, r1, r2] = levels(cfg);
    let groups = cfg.norm_groups as usize;
    let bpl = cfg.blocks_per_level as usize;
    let te = cfg.t_embed_dim as usize;
    if input.len() != cfg.in_channels as usize * r0 * r0 {
        return Err(Error::Shape(format!(
            "input length {} != {} channels x {r0}x{r0}",
            input.len(),
            cfg.in_channels
        )));
    }
    if params.len() != layout.total {
        return Err(Error::Shape(format!("params length {} != layout total {}", params.len(), layout.total)));
    }
    let p = P { layout, data: params };
    let rnd = |buf: &mut Vec<T>| {
        if round16 {
            nn::round_f16(buf);
        }
    };

    let temb0: Vec<T> = nn::sinusoidal_embedding(t_embed, te);
    let t1 = nn::linear(p.s("time_mlp.fc1.weight"), p.s("time_mlp.fc1.bias"), &temb0, te, te);
    let t1s = nn::silu(&t1);
    let mut temb = nn::linear(p.s("time_mlp.fc2.weight"), p.s("time_mlp.fc2.bias"), &t1s, te, te);
    rnd(&mut temb);
    let st = nn::silu(&temb);

    let mut h = nn::conv2d(p.s("conv_in.weight"), p.s("conv_in.bias"), input, cfg.in_channels as usize, r0, r0, c0, 3, 1);
    rnd(&mut h);

    let mut enc0 = Vec::with_capacity(bpl);
    for i in 0..bpl {
        let (out, cache) = res_forward(&p, &format!("enc0.block{i}"), c0, c0, r0, groups, &st, h);
        h = out;
        rnd(&mut h);
        enc0.push(cache);
    }
    let skip0 = h.clone();
    h = nn::conv2d(p.s("down0.weight"), p.s("down0.bias"), &h, c0, r0, r0, c0, 3, 2);
    rnd(&mut h);

    let mut enc1 = Vec::with_capacity(bpl);
    for i in 0..bpl {
        let cin = if i == 0 { c0 } else { c1 };
        let (out, rc) = res_forward(&p, &format!("enc1.block{i}"), cin, c1, r1, groups, &st, h);
        h = out;
        rnd(&mut h);
        let (out, ac) = attn_forward(&p, &format!("enc1.attn{i}"), c1, r1, groups, &h);
        h = out;
        rnd(&mut h);
        enc1.push((rc, ac));
    }
    let skip1 = h.clone();
    h = nn::conv2d(p.s("down1.weight"), p.s("down1.bias"), &h, c1, r1, r1, c1, 3, 2);
    rnd(&mut h);

    let mut mid = Vec::with_capacity(bpl);
    for i in 0..bpl {
        let cin = if i == 0 { c1 } else { c2 };
        let (out, cache) = res_forward(&p, &format!("mid.block{i}"), cin, c2, r2, groups, &st, h);
        h = out;
        rnd(&mut h);
        mid.push(cache);
    }

    let up1_in = nn::upsample2(&h, c2, r2, r2);
    h = nn::conv2d(p.s("up1.conv.weight"), p.s("up1.conv.bias"), &up1_in, c2, r1, r1, c1, 3, 1);
    rnd(&mut h);
    h.extend_from_slice(&skip1); // channel concat [up ; skip]

    let mut dec1 = Vec::with_capacity(bpl);
    for i in 0..bpl {
        let cin = if i == 0 { 2 * c1 } else { c1 };
        let (out, rc) = res_forward(&p, &format!("dec1.block{i}"), cin, c1, r1, groups, &st, h);
        h = out;
        rnd(&mut h);
        let (out, ac) = attn_forward(&p, &format!("dec1.attn{i}"), c1, r1, groups, &h);
        h = out;
        rnd(&mut h);
        dec1.push((rc, ac));
    }

    let up0_in = nn::upsample2(&h, c1, r1, r1);
    h = nn::conv2d(p.s("up0.conv.weight"), p.s("up0.conv.bias"), &up0_in, c1, r0, r0, c0, 3, 1);
    rnd(&mut h);
    h.extend_from_slice(&skip0);

    let mut dec0 = Vec::with_capacity(bpl);
    for i in 0..bpl {
        let cin = if i == 0 { 2 * c0 } else { c0 };
        let (out, cache) = res_forward(&p, &format!("dec0.block{i}"), cin, c0, r0, groups, &st, h);
        h = out;
        rnd(&mut h);
        dec0.push(cache);
    }

    let (out_n, out_gn) = nn::group_norm(p.s("out_norm.gamma"), p.s("out_norm.beta"), &h, c0, r0 * r0, groups);
    let out_s = nn::silu(&out_n);
    let mut out = nn::conv2d(p.s("conv_out.weight"), p.s("conv_out.bias"), &out_s, c0, r0, r0, cfg.out_channels as usize, 3, 1);
    rnd(&mut out);

    let trace = Trace {
        input: input.to_vec(),
        temb0,
        t1,
        t1s,
        temb,
        st,
        enc0,
        skip0,
        enc1,
        skip1,
        mid,
        up1_in,
        dec1,
        up0_in,
        dec0,
        out_gn,
        out_n,
        out_s,
    };
    Ok((out, trace))
}

/// Reverse-mode pass: accumulates parameter gradients into `grads`
/// (same flat layout as the parameters).
pub fn backward<T: Scalar>(
    cfg: &NetConfig,
    layout: &ParamLayout,
    params: &[T],
    trace: &Trace<T>,
    d_out: &[T],
    grads: &mut [T],
) {
    let [c0, c1, c2] = cfg.channels();
    let [r0, r1, r2] = levels(cfg);
    let groups = cfg.norm_groups as usize;
    let bpl = cfg.blocks_per_level as usize;
    let te = cfg.t_embed_dim as usize;
    let p = P { layout, data: params };
    let mut g = G { layout, data: grads };
    let mut d_st = vec![T::zero(); te];

    // output head
    let d_os = {
        let (dw, db) = g.pair("conv_out.weight", "conv_out.bias");
        nn::conv2d_bwd(p.s("conv_out.weight"), &trace.out_s, d_out, c0, r0, r0, cfg.out_channels as usize, 3, 1, dw, db)
    };
    let d_on = nn::silu_bwd(&trace.out_n, &d_os);
    let mut d = {
        let (dg, db) = g.pair("out_norm.gamma", "out_norm.beta");
        nn::group_norm_bwd(p.s("out_norm.gamma"), &trace.out_gn, &d_on, c0, r0 * r0, groups, dg, db)
    };

    // dec0 (reverse order)
    for i in (0..bpl).rev() {
        let cin = if i == 0 { 2 * c0 } else { c0 };
        d = res_backward(&p, &mut g, &format!("dec0.block{i}"), &trace.dec0[i], cin, c0, r0, groups, &trace.st, &mut d_st, &d);
    }
    let (d_up0_out, d_skip0) = d.split_at(c0 * r0 * r0);
    let d_up0_in = {
        let (dw, db) = g.pair("up0.conv.weight", "up0.conv.bias");
        nn::conv2d_bwd(p.s("up0.conv.weight"), &trace.up0_in, d_up0_out, c1, r0, r0, c0, 3, 1, dw, db)
    };
    let d_skip0 = d_skip0.to_vec();
    let mut d = nn::upsample2_bwd(&d_up0_in, c1, r1, r1);

    // dec1
    for i in (0..bpl).rev() {
        let cin = if i == 0 { 2 * c1 } else { c1 };
        d = attn_backward(&p, &mut g, &format!("dec1.attn{i}"), &trace.dec1[i].1, c1, r1, groups, &d);
        d = res_backward(&p, &mut g, &format!("dec1.block{i}"), &trace.dec1[i].0, cin, c1, r1, groups, &trace.st, &mut d_st, &d);
    }
    let (d_up1_out, d_skip1) = d.split_at(c1 * r1 * r1);
    let d_up1_in = {
        let (dw, db) = g.pair("up1.conv.weight", "up1.conv.bias");
        nn::conv2d_bwd(p.s("up1.conv.weight"), &trace.up1_in, d_up1_out, c2, r1, r1, c1, 3, 1, dw, db)
    };
    let d_skip1 = d_skip1.to_vec();
    let mut d = nn::upsample2_bwd(&d_up1_in, c2, r2, r2);

    // mid
    for i in (0..bpl).rev() {
        let cin = if i == 0 { c1 } else { c2 };
        d = res_backward(&p, &mut g, &format!("mid.block{i}"), &trace.mid[i], cin, c2, r2, groups, &trace.st, &mut d_st, &d);
    }

    // down1 then encoder level 1; the skip branch joins here
    let mut d = {
        let (dw, db) = g.pair("down1.weight", "down1.bias");
        nn::conv2d_bwd(p.s("down1.weight"), &trace.skip1, &d, c1, r1, r1, c1, 3, 2, dw, db)
    };
    for (a, b) in d.iter_mut().zip(&d_skip1) {
        *a += *b;
    }
    for i in (0..bpl).rev() {
        let cin = if i == 0 { c0 } else { c1 };
        d = attn_backward(&p, &mut g, &format!("enc1.attn{i}"), &trace.enc1[i].1, c1, r1, groups, &d);
        d = res_backward(&p, &mut g, &format!("enc1.block{i}"), &trace.enc1[i].0, cin, c1, r1, groups, &trace.st, &mut d_st, &d);
    }

    // down0 then encoder level 0
    let mut d = {
        let (dw, db) = g.pair("down0.weight", "down0.bias");
        nn::conv2d_bwd(p.s("down0.weight"), &trace.skip0, &d, c0, r0, r0, c0, 3, 2, dw, db)
    };
    for (a, b) in d.iter_mut().zip(&d_skip0) {
        *a += *b;
    }
    for i in (0..bpl).rev() {
        d = res_backward(&p, &mut g, &format!("enc0.block{i}"), &trace.enc0[i], c0, c0, r0, groups, &trace.st, &mut d_st, &d);
    }

    // input projection: input gradients are not needed, weight gradients are
    {
        let (dw, db) = g.pair("conv_in.weight", "conv_in.bias");
        nn::conv2d_bwd(p.s("conv_in.weight"), &trace.input, &d, cfg.in_channels as usize, r0, r0, c0, 3, 1, dw, db);
    }

    // time-embedding MLP, fed by the accumulated broadcast gradients
    let d_temb = nn::silu_bwd(&trace.temb, &d_st);
    let d_t1s = {
        let (dw, db) = g.pair("time_mlp.fc2.weight", "time_mlp.fc2.bias");
        nn::linear_bwd(p.s("time_mlp.fc2.weight"), &trace.t1s, &d_temb, te, te, dw, db)
    };
    let d_t1 = nn::silu_bwd(&trace.t1, &d_t1s);
    {
        let (dw, db) = g.pair("time_mlp.fc1.weight", "time_mlp.fc1.bias");
        nn::linear_bwd(p.s("time_mlp.fc1.weight"), &trace.temb0, &d_t1, te, te, dw, db);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_cfg() -> NetConfig {
        NetConfig {
            patch: 16,
            base_width: 8,
            attention_resolution: 8,
            t_embed_dim: 16,
            norm_groups: 4,
            blocks_per_level: 1,
            ..Default::default()
        }
    }

    #[test]
    fn layout_is_dense_and_unique() {
        let cfg = NetConfig::default();
        let layout = ParamLayout::build(&cfg).unwrap();
        let mut next = 0usize;
        let mut names = std::collections::HashSet::new();
        for s in &layout.specs {
            assert_eq!(s.offset, next, "gap before {}", s.name);
            next += s.len();
            assert!(names.insert(s.name.clone()), "duplicate {}", s.name);
        }
        assert_eq!(next, layout.total);
    }

    #[test]
    fn forward_shape_and_finiteness() {
        let cfg = tiny_cfg();
        let layout = ParamLayout::build(&cfg).unwrap();
        let mut rng = crate::rng::stream(5);
        let params: Vec<f32> = (0..layout.total).map(|_| crate::rng::normal_f32(&mut rng) * 0.05).collect();
        let input: Vec<f32> = (0..2 * 16 * 16).map(|_| crate::rng::normal_f32(&mut rng)).collect();
        let (out, _) = forward_trace(&cfg, &layout, &params, &input, 10.0, false).unwrap();
        assert_eq!(out.len(), 16 * 16);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_bad_input_len() {
        let cfg = tiny_cfg();
        let layout = ParamLayout::build(&cfg).unwrap();
        let params = vec![0.0f32; layout.total];
        assert!(forward_trace(&cfg, &layout, &params, &[0.0; 7], 1.0, false).is_err());
    }

    #[test]
    fn backward_grad_len_matches() {
        let cfg = tiny_cfg();
        let layout = ParamLayout::build(&cfg).unwrap();
        let mut rng = crate::rng::stream(9);
        let params: Vec<f64> =
            (0..layout.total).map(|_| crate::rng::normal_f32(&mut rng) as f64 * 0.05).collect();
        let input: Vec<f64> = (0..2 * 16 * 16).map(|_| crate::rng::normal_f32(&mut rng) as f64).collect();
        let (out, trace) = forward_trace(&cfg, &layout, &params, &input, 3.0, false).unwrap();
        let d_out: Vec<f64> = out.iter().map(|v| 2.0 * v).collect();
        let mut grads = vec![0.0f64; layout.total];
        backward(&cfg, &layout, &params, &trace, &d_out, &mut grads);
        assert!(grads.iter().any(|&v| v != 0.0));
        assert!(grads.iter().all(|v| v.is_finite()));
    }
}
