//! Attention blocks assembled into the full reconstruction network.
//!
//! One stage is a U-shaped transformer: an embedding conv, an encoder that
//! alternates attention blocks with strided conv4x4 downsampling (doubling
//! channels each level), a bottleneck block, and a symmetric decoder built
//! from deconv2x2 upsampling with concat-and-fuse skip connections, closed by
//! a mapping conv and an input residual. The full model cascades `stages`
//! such units between a 3->C input projection and a C->C output projection
//! with a long feature-level identity mapping, reflect-padding inputs to
//! multiples of 8 and cropping afterwards.
//!
//! Channel schedule per stage: C, 2C, 4C with head counts 1, 2, 4 at a fixed
//! head dimension of C.

use crate::attention::{bind_tensor, s_msa_forward, BoundSMsa, SMsaParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, PadMode, Rng, Tensor, Var};

/// FFN hidden expansion factor.
pub const FFN_EXPANSION: usize = 4;

/// Convention used by [`count_flops`]: doubled MACs, normalization and
/// activations excluded.
pub const FLOP_CONVENTION: &str =
    "flops = 2 x MACs over convs, matmuls and attention; normalization/activation excluded";

/// Architecture hyperparameters; defaults give the full-size model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MstConfig {
    pub in_channels: usize,
    /// Channel count of the first level; also the output band count and the
    /// attention head dimension.
    pub base_dim: usize,
    pub stages: usize,
}

impl Default for MstConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            base_dim: 31,
            stages: 3,
        }
    }
}

impl MstConfig {
    /// Reduced configuration for desk-scale tests.
    pub fn tiny(base_dim: usize, stages: usize) -> Self {
        Self {
            in_channels: 3,
            base_dim,
            stages,
        }
    }
}

fn conv_init(rng: &mut Rng, cout: usize, cig: usize, k: usize) -> Tensor {
    let fan_in = cig * k * k;
    let data = (0..cout * cig * k * k).map(|_| rng.fan_in_f32(fan_in)).collect();
    Tensor::new(vec![cout, cig, k, k], data).expect("conv weight shape")
}

fn deconv_init(rng: &mut Rng, cin: usize, cout: usize) -> Tensor {
    // stride-2 kernel-2 transposed conv: each output pixel receives exactly
    // one tap per input channel, so fan-in is C_in
    let data = (0..cin * cout * 4).map(|_| rng.fan_in_f32(cin)).collect();
    Tensor::new(vec![cin, cout, 2, 2], data).expect("deconv weight shape")
}

// ---------------------------------------------------------------------------
// feed-forward network

/// Pointwise expand -> GELU -> depthwise 3x3 -> GELU -> pointwise contract.
#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub wd: Tensor,
    pub bd: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl FfnParams {
    pub fn new(dim: usize, rng: &mut Rng) -> Self {
        let hidden = dim * FFN_EXPANSION;
        Self {
            w1: conv_init(rng, hidden, dim, 1),
            b1: Tensor::zeros(&[hidden]),
            wd: conv_init(rng, hidden, 1, 3),
            bd: Tensor::zeros(&[hidden]),
            w2: conv_init(rng, dim, hidden, 1),
            b2: Tensor::zeros(&[dim]),
        }
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, entries: &mut Vec<(String, Var)>) -> BoundFfn {
        BoundFfn {
            w1: bind_tensor(g, entries, prefix, "0.weight", &self.w1),
            b1: bind_tensor(g, entries, prefix, "0.bias", &self.b1),
            wd: bind_tensor(g, entries, prefix, "1.weight", &self.wd),
            bd: bind_tensor(g, entries, prefix, "1.bias", &self.bd),
            w2: bind_tensor(g, entries, prefix, "2.weight", &self.w2),
            b2: bind_tensor(g, entries, prefix, "2.bias", &self.b2),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.0.weight"), &self.w1);
        f(&format!("{prefix}.0.bias"), &self.b1);
        f(&format!("{prefix}.1.weight"), &self.wd);
        f(&format!("{prefix}.1.bias"), &self.bd);
        f(&format!("{prefix}.2.weight"), &self.w2);
        f(&format!("{prefix}.2.bias"), &self.b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.0.weight"), &mut self.w1);
        f(&format!("{prefix}.0.bias"), &mut self.b1);
        f(&format!("{prefix}.1.weight"), &mut self.wd);
        f(&format!("{prefix}.1.bias"), &mut self.bd);
        f(&format!("{prefix}.2.weight"), &mut self.w2);
        f(&format!("{prefix}.2.bias"), &mut self.b2);
    }
}

pub struct BoundFfn {
    w1: Var,
    b1: Var,
    wd: Var,
    bd: Var,
    w2: Var,
    b2: Var,
}

/// FFN over an NCHW feature map; shape-preserving.
pub fn ffn_forward(g: &mut Graph, p: &BoundFfn, x: &Var) -> Result<Var> {
    let hidden = p.wd.shape()[0];
    let h1 = g.conv2d(x, &p.w1, Some(&p.b1), 1, 0, 1)?;
    let a1 = g.gelu(&h1)?;
    let hd = g.conv2d(&a1, &p.wd, Some(&p.bd), 1, 1, hidden)?;
    let a2 = g.gelu(&hd)?;
    g.conv2d(&a2, &p.w2, Some(&p.b2), 1, 0, 1)
}

// ---------------------------------------------------------------------------
// spectral-wise attention block

/// Pre-norm residual pair: `x + S-MSA(LN(x))`, then `y + FFN(LN(y))`.
#[derive(Clone, Debug)]
pub struct SabParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub smsa: SMsaParams,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub ffn: FfnParams,
}

impl SabParams {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            ln1_gamma: Tensor::ones(&[dim]),
            ln1_beta: Tensor::zeros(&[dim]),
            smsa: SMsaParams::new(dim, heads, rng)?,
            ln2_gamma: Tensor::ones(&[dim]),
            ln2_beta: Tensor::zeros(&[dim]),
            ffn: FfnParams::new(dim, rng),
        })
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, entries: &mut Vec<(String, Var)>) -> BoundSab {
        BoundSab {
            ln1_gamma: bind_tensor(g, entries, prefix, "ln1.gamma", &self.ln1_gamma),
            ln1_beta: bind_tensor(g, entries, prefix, "ln1.beta", &self.ln1_beta),
            smsa: self.smsa.bind(g, &format!("{prefix}.smsa"), entries),
            ln2_gamma: bind_tensor(g, entries, prefix, "ln2.gamma", &self.ln2_gamma),
            ln2_beta: bind_tensor(g, entries, prefix, "ln2.beta", &self.ln2_beta),
            ffn: self.ffn.bind(g, &format!("{prefix}.ffn"), entries),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.ln1.gamma"), &self.ln1_gamma);
        f(&format!("{prefix}.ln1.beta"), &self.ln1_beta);
        self.smsa.visit(&format!("{prefix}.smsa"), f);
        f(&format!("{prefix}.ln2.gamma"), &self.ln2_gamma);
        f(&format!("{prefix}.ln2.beta"), &self.ln2_beta);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.ln1.gamma"), &mut self.ln1_gamma);
        f(&format!("{prefix}.ln1.beta"), &mut self.ln1_beta);
        self.smsa.visit_mut(&format!("{prefix}.smsa"), f);
        f(&format!("{prefix}.ln2.gamma"), &mut self.ln2_gamma);
        f(&format!("{prefix}.ln2.beta"), &mut self.ln2_beta);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

pub struct BoundSab {
    ln1_gamma: Var,
    ln1_beta: Var,
    smsa: BoundSMsa,
    ln2_gamma: Var,
    ln2_beta: Var,
    ffn: BoundFfn,
}

/// Attention block over an NHWC input; both residual branches preserve shape.
pub fn sab_forward(g: &mut Graph, p: &BoundSab, x: &Var) -> Result<Var> {
    let ln1 = g.layernorm(x, &p.ln1_gamma, &p.ln1_beta)?;
    g.push_scope("smsa");
    let attn = s_msa_forward(g, &p.smsa, &ln1)?;
    g.pop_scope();
    let mid = g.add(x, &attn)?;

    let ln2 = g.layernorm(&mid, &p.ln2_gamma, &p.ln2_beta)?;
    let nchw = g.permute(&ln2, &[0, 3, 1, 2])?;
    g.push_scope("ffn");
    let ff = ffn_forward(g, &p.ffn, &nchw)?;
    g.pop_scope();
    let ff_nhwc = g.permute(&ff, &[0, 2, 3, 1])?;
    g.add(&mid, &ff_nhwc)
}

/// [`sab_forward`] with NCHW layout at the boundary.
fn sab_forward_nchw(g: &mut Graph, p: &BoundSab, x: &Var) -> Result<Var> {
    let nhwc = g.permute(x, &[0, 2, 3, 1])?;
    let out = sab_forward(g, p, &nhwc)?;
    g.permute(&out, &[0, 3, 1, 2])
}

// ---------------------------------------------------------------------------
// single U-shaped stage

#[derive(Clone, Debug)]
pub struct SstParams {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub enc_sab0: SabParams,
    pub down1_w: Tensor,
    pub down1_b: Tensor,
    pub enc_sab1: SabParams,
    pub down2_w: Tensor,
    pub down2_b: Tensor,
    pub bottleneck: SabParams,
    pub up1_w: Tensor,
    pub up1_b: Tensor,
    pub fuse1_w: Tensor,
    pub fuse1_b: Tensor,
    pub dec_sab1: SabParams,
    pub up2_w: Tensor,
    pub up2_b: Tensor,
    pub fuse2_w: Tensor,
    pub fuse2_b: Tensor,
    pub dec_sab0: SabParams,
    pub map_w: Tensor,
    pub map_b: Tensor,
}

impl SstParams {
    pub fn new(base: usize, rng: &mut Rng) -> Result<Self> {
        let (c1, c2, c4) = (base, base * 2, base * 4);
        Ok(Self {
            embed_w: conv_init(rng, c1, c1, 3),
            embed_b: Tensor::zeros(&[c1]),
            enc_sab0: SabParams::new(c1, 1, rng)?,
            down1_w: conv_init(rng, c2, c1, 4),
            down1_b: Tensor::zeros(&[c2]),
            enc_sab1: SabParams::new(c2, 2, rng)?,
            down2_w: conv_init(rng, c4, c2, 4),
            down2_b: Tensor::zeros(&[c4]),
            bottleneck: SabParams::new(c4, 4, rng)?,
            up1_w: deconv_init(rng, c4, c2),
            up1_b: Tensor::zeros(&[c2]),
            fuse1_w: conv_init(rng, c2, c4, 1),
            fuse1_b: Tensor::zeros(&[c2]),
            dec_sab1: SabParams::new(c2, 2, rng)?,
            up2_w: deconv_init(rng, c2, c1),
            up2_b: Tensor::zeros(&[c1]),
            fuse2_w: conv_init(rng, c1, c2, 1),
            fuse2_b: Tensor::zeros(&[c1]),
            dec_sab0: SabParams::new(c1, 1, rng)?,
            map_w: conv_init(rng, c1, c1, 3),
            map_b: Tensor::zeros(&[c1]),
        })
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, entries: &mut Vec<(String, Var)>) -> BoundSst {
        BoundSst {
            embed_w: bind_tensor(g, entries, prefix, "embed.weight", &self.embed_w),
            embed_b: bind_tensor(g, entries, prefix, "embed.bias", &self.embed_b),
            enc_sab0: self.enc_sab0.bind(g, &format!("{prefix}.enc_sab0"), entries),
            down1_w: bind_tensor(g, entries, prefix, "down1.weight", &self.down1_w),
            down1_b: bind_tensor(g, entries, prefix, "down1.bias", &self.down1_b),
            enc_sab1: self.enc_sab1.bind(g, &format!("{prefix}.enc_sab1"), entries),
            down2_w: bind_tensor(g, entries, prefix, "down2.weight", &self.down2_w),
            down2_b: bind_tensor(g, entries, prefix, "down2.bias", &self.down2_b),
            bottleneck: self.bottleneck.bind(g, &format!("{prefix}.bottleneck"), entries),
            up1_w: bind_tensor(g, entries, prefix, "up1.weight", &self.up1_w),
            up1_b: bind_tensor(g, entries, prefix, "up1.bias", &self.up1_b),
            fuse1_w: bind_tensor(g, entries, prefix, "fuse1.weight", &self.fuse1_w),
            fuse1_b: bind_tensor(g, entries, prefix, "fuse1.bias", &self.fuse1_b),
            dec_sab1: self.dec_sab1.bind(g, &format!("{prefix}.dec_sab1"), entries),
            up2_w: bind_tensor(g, entries, prefix, "up2.weight", &self.up2_w),
            up2_b: bind_tensor(g, entries, prefix, "up2.bias", &self.up2_b),
            fuse2_w: bind_tensor(g, entries, prefix, "fuse2.weight", &self.fuse2_w),
            fuse2_b: bind_tensor(g, entries, prefix, "fuse2.bias", &self.fuse2_b),
            dec_sab0: self.dec_sab0.bind(g, &format!("{prefix}.dec_sab0"), entries),
            map_w: bind_tensor(g, entries, prefix, "mapping.weight", &self.map_w),
            map_b: bind_tensor(g, entries, prefix, "mapping.bias", &self.map_b),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.embed.weight"), &self.embed_w);
        f(&format!("{prefix}.embed.bias"), &self.embed_b);
        self.enc_sab0.visit(&format!("{prefix}.enc_sab0"), f);
        f(&format!("{prefix}.down1.weight"), &self.down1_w);
        f(&format!("{prefix}.down1.bias"), &self.down1_b);
        self.enc_sab1.visit(&format!("{prefix}.enc_sab1"), f);
        f(&format!("{prefix}.down2.weight"), &self.down2_w);
        f(&format!("{prefix}.down2.bias"), &self.down2_b);
        self.bottleneck.visit(&format!("{prefix}.bottleneck"), f);
        f(&format!("{prefix}.up1.weight"), &self.up1_w);
        f(&format!("{prefix}.up1.bias"), &self.up1_b);
        f(&format!("{prefix}.fuse1.weight"), &self.fuse1_w);
        f(&format!("{prefix}.fuse1.bias"), &self.fuse1_b);
        self.dec_sab1.visit(&format!("{prefix}.dec_sab1"), f);
        f(&format!("{prefix}.up2.weight"), &self.up2_w);
        f(&format!("{prefix}.up2.bias"), &self.up2_b);
        f(&format!("{prefix}.fuse2.weight"), &self.fuse2_w);
        f(&format!("{prefix}.fuse2.bias"), &self.fuse2_b);
        self.dec_sab0.visit(&format!("{prefix}.dec_sab0"), f);
        f(&format!("{prefix}.mapping.weight"), &self.map_w);
        f(&format!("{prefix}.mapping.bias"), &self.map_b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.embed.weight"), &mut self.embed_w);
        f(&format!("{prefix}.embed.bias"), &mut self.embed_b);
        self.enc_sab0.visit_mut(&format!("{prefix}.enc_sab0"), f);
        f(&format!("{prefix}.down1.weight"), &mut self.down1_w);
        f(&format!("{prefix}.down1.bias"), &mut self.down1_b);
        self.enc_sab1.visit_mut(&format!("{prefix}.enc_sab1"), f);
        f(&format!("{prefix}.down2.weight"), &mut self.down2_w);
        f(&format!("{prefix}.down2.bias"), &mut self.down2_b);
        self.bottleneck.visit_mut(&format!("{prefix}.bottleneck"), f);
        f(&format!("{prefix}.up1.weight"), &mut self.up1_w);
        f(&format!("{prefix}.up1.bias"), &mut self.up1_b);
        f(&format!("{prefix}.fuse1.weight"), &mut self.fuse1_w);
        f(&format!("{prefix}.fuse1.bias"), &mut self.fuse1_b);
        self.dec_sab1.visit_mut(&format!("{prefix}.dec_sab1"), f);
        f(&format!("{prefix}.up2.weight"), &mut self.up2_w);
        f(&format!("{prefix}.up2.bias"), &mut self.up2_b);
        f(&format!("{prefix}.fuse2.weight"), &mut self.fuse2_w);
        f(&format!("{prefix}.fuse2.bias"), &mut self.fuse2_b);
        self.dec_sab0.visit_mut(&format!("{prefix}.dec_sab0"), f);
        f(&format!("{prefix}.mapping.weight"), &mut self.map_w);
        f(&format!("{prefix}.mapping.bias"), &mut self.map_b);
    }
}

pub struct BoundSst {
    embed_w: Var,
    embed_b: Var,
    enc_sab0: BoundSab,
    down1_w: Var,
    down1_b: Var,
    enc_sab1: BoundSab,
    down2_w: Var,
    down2_b: Var,
    bottleneck: BoundSab,
    up1_w: Var,
    up1_b: Var,
    fuse1_w: Var,
    fuse1_b: Var,
    dec_sab1: BoundSab,
    up2_w: Var,
    up2_b: Var,
    fuse2_w: Var,
    fuse2_b: Var,
    dec_sab0: BoundSab,
    map_w: Var,
    map_b: Var,
}

/// One U-shaped stage over NCHW features; shape-preserving. Spatial extents
/// must be divisible by 4 (two stride-2 levels); the cascade wrapper pads.
pub fn sst_forward(g: &mut Graph, p: &BoundSst, x: &Var) -> Result<Var> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 4 != 0 || s[3] % 4 != 0 {
        return Err(Error::InvalidArgument {
            op: "sst_forward",
            message: format!("spatial extents of {s:?} must be divisible by 4; pad first"),
        });
    }
    g.push_scope("embed");
    let fea = g.conv2d(x, &p.embed_w, Some(&p.embed_b), 1, 1, 1)?;
    g.pop_scope();

    g.push_scope("enc_sab0");
    let enc0 = sab_forward_nchw(g, &p.enc_sab0, &fea)?;
    g.pop_scope();
    g.push_scope("down1");
    let d1 = g.conv2d(&enc0, &p.down1_w, Some(&p.down1_b), 2, 1, 1)?;
    g.pop_scope();

    g.push_scope("enc_sab1");
    let enc1 = sab_forward_nchw(g, &p.enc_sab1, &d1)?;
    g.pop_scope();
    g.push_scope("down2");
    let d2 = g.conv2d(&enc1, &p.down2_w, Some(&p.down2_b), 2, 1, 1)?;
    g.pop_scope();

    g.push_scope("bottleneck");
    let bott = sab_forward_nchw(g, &p.bottleneck, &d2)?;
    g.pop_scope();

    g.push_scope("up1");
    let u1 = g.deconv2x2(&bott, &p.up1_w, Some(&p.up1_b))?;
    g.pop_scope();
    let cat1 = g.concat(1, &[&u1, &enc1])?;
    g.push_scope("fuse1");
    let f1 = g.conv2d(&cat1, &p.fuse1_w, Some(&p.fuse1_b), 1, 0, 1)?;
    g.pop_scope();
    g.push_scope("dec_sab1");
    let dec1 = sab_forward_nchw(g, &p.dec_sab1, &f1)?;
    g.pop_scope();

    g.push_scope("up2");
    let u2 = g.deconv2x2(&dec1, &p.up2_w, Some(&p.up2_b))?;
    g.pop_scope();
    let cat2 = g.concat(1, &[&u2, &enc0])?;
    g.push_scope("fuse2");
    let f2 = g.conv2d(&cat2, &p.fuse2_w, Some(&p.fuse2_b), 1, 0, 1)?;
    g.pop_scope();
    g.push_scope("dec_sab0");
    let dec0 = sab_forward_nchw(g, &p.dec_sab0, &f2)?;
    g.pop_scope();

    g.push_scope("mapping");
    let mapped = g.conv2d(&dec0, &p.map_w, Some(&p.map_b), 1, 1, 1)?;
    g.pop_scope();
    g.add(&mapped, x)
}

// ---------------------------------------------------------------------------
// full model

/// Full model: input projection, cascaded stages, output projection, long
/// feature-level identity mapping.
#[derive(Clone, Debug)]
pub struct MstPlusPlus {
    pub config: MstConfig,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub stages: Vec<SstParams>,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl MstPlusPlus {
    pub fn new(config: MstConfig, rng: &mut Rng) -> Result<Self> {
        let c = config.base_dim;
        if c == 0 || config.in_channels == 0 {
            return Err(Error::InvalidArgument {
                op: "MstPlusPlus::new",
                message: "channel counts must be positive".into(),
            });
        }
        let in_w = conv_init(rng, c, config.in_channels, 3);
        let in_b = Tensor::zeros(&[c]);
        let mut stages = Vec::with_capacity(config.stages);
        for _ in 0..config.stages {
            stages.push(SstParams::new(c, rng)?);
        }
        Ok(Self {
            config,
            in_w,
            in_b,
            stages,
            out_w: conv_init(rng, c, c, 3),
            out_b: Tensor::zeros(&[c]),
        })
    }

    /// Seeded construction.
    pub fn seeded(config: MstConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut Rng::new(seed))
    }

    pub fn bind(&self, g: &mut Graph) -> BoundMst {
        let mut entries = Vec::new();
        let in_w = bind_tensor(g, &mut entries, "input_proj", "weight", &self.in_w);
        let in_b = bind_tensor(g, &mut entries, "input_proj", "bias", &self.in_b);
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| s.bind(g, &format!("stage{i}"), &mut entries))
            .collect();
        let out_w = bind_tensor(g, &mut entries, "output_proj", "weight", &self.out_w);
        let out_b = bind_tensor(g, &mut entries, "output_proj", "bias", &self.out_b);
        BoundMst {
            in_w,
            in_b,
            stages,
            out_w,
            out_b,
            entries,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("input_proj.weight", &self.in_w);
        f("input_proj.bias", &self.in_b);
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("stage{i}"), f);
        }
        f("output_proj.weight", &self.out_w);
        f("output_proj.bias", &self.out_b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("input_proj.weight", &mut self.in_w);
        f("input_proj.bias", &mut self.in_b);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("stage{i}"), f);
        }
        f("output_proj.weight", &mut self.out_w);
        f("output_proj.bias", &mut self.out_b);
    }

    /// Total learnable scalar count, including attention temperatures, norm
    /// affine parameters, and biases.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Forward pass on a plain tensor through a fresh inference graph.
    pub fn infer(&self, rgb: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g);
        let input = g.constant(rgb.clone());
        let out = mstpp_forward(&mut g, &bound, &input)?;
        Ok(out.tensor().clone())
    }
}

pub struct BoundMst {
    in_w: Var,
    in_b: Var,
    stages: Vec<BoundSst>,
    out_w: Var,
    out_b: Var,
    entries: Vec<(String, Var)>,
}

impl BoundMst {
    /// Bound parameters in canonical traversal order (matches `visit`).
    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Cascade forward: `[B, in_channels, H, W]` to `[B, base_dim, H, W]` for any
/// H, W >= 8; inputs are reflect-padded to multiples of 8 internally and the
/// output is cropped back.
pub fn mstpp_forward(g: &mut Graph, m: &BoundMst, rgb: &Var) -> Result<Var> {
    let s = rgb.shape().to_vec();
    let cin = m.in_w.shape()[1];
    if s.len() != 4 || s[1] != cin {
        return Err(Error::ShapeMismatch {
            op: "mstpp_forward",
            lhs: s,
            rhs: vec![0, cin, 0, 0],
        });
    }
    let (h, w) = (s[2], s[3]);
    if h < 8 || w < 8 {
        return Err(Error::InvalidArgument {
            op: "mstpp_forward",
            message: format!("spatial extents must be at least 8, got {h}x{w}"),
        });
    }
    let (pad_h, pad_w) = ((8 - h % 8) % 8, (8 - w % 8) % 8);
    let padded;
    let x = if pad_h == 0 && pad_w == 0 {
        rgb
    } else {
        padded = g.pad2d(rgb, [0, pad_h, 0, pad_w], PadMode::Reflect)?;
        &padded
    };

    g.push_scope("input_proj");
    let f0 = g.conv2d(x, &m.in_w, Some(&m.in_b), 1, 1, 1)?;
    g.pop_scope();

    let mut fea = f0.clone();
    for (i, stage) in m.stages.iter().enumerate() {
        g.push_scope(&format!("stage{i}"));
        fea = sst_forward(g, stage, &fea)?;
        g.pop_scope();
    }

    g.push_scope("output_proj");
    let out = g.conv2d(&fea, &m.out_w, Some(&m.out_b), 1, 1, 1)?;
    g.pop_scope();
    let long = g.add(&out, &f0)?;

    if pad_h == 0 && pad_w == 0 {
        Ok(long)
    } else {
        g.crop2d(&long, h, w)
    }
}

/// Total learnable scalars of a model.
pub fn count_params(m: &MstPlusPlus) -> usize {
    m.param_count()
}

/// FLOPs of one forward pass at `h x w` under the 2 x MAC convention
/// ([`FLOP_CONVENTION`]); runs a real ledger pass on a zero input.
pub fn count_flops(m: &MstPlusPlus, h: usize, w: usize) -> Result<u64> {
    count_flops_with_ledger(m, h, w).map(|(f, _)| f)
}

/// As [`count_flops`], returning the per-layer ledger too.
pub fn count_flops_with_ledger(
    m: &MstPlusPlus,
    h: usize,
    w: usize,
) -> Result<(u64, crate::tensor::CostLedger)> {
    let mut g = Graph::inference();
    let bound = m.bind(&mut g);
    let input = g.constant(Tensor::zeros(&[1, m.config.in_channels, h, w]));
    let out = mstpp_forward(&mut g, &bound, &input)?;
    debug_assert_eq!(out.shape()[2], h);
    debug_assert_eq!(out.shape()[3], w);
    drop(out);
    Ok((2 * g.ledger().total(), g.ledger().clone()))
}
