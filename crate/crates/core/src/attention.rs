//! Spectral-wise multi-head self-attention and the spatial MSA references.
//!
//! Spectral attention treats each channel's feature map as one token: per
//! head the attention matrix is `d_h x d_h` over channels, so cost stays
//! linear in the number of pixels while the receptive field stays global.
//! Global and window MSA are implemented alongside it with the same MAC
//! instrumentation, so the closed-form cost laws of all three kinds can be
//! checked against measured counts.
//!
//! Attention-core MACs (the score product and the value aggregation, with
//! projections excluded) are recorded under an `attn_core` scope; this is the
//! quantity [`predicted_cost`] models.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Refuse global attention beyond this many tokens unless overridden.
pub const DEFAULT_TOKEN_CAP: usize = 4096;

/// Which attention computation a cost query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsaKind {
    Global,
    Window,
    Spectral,
}

/// Closed-form MAC count of the attention core: score matmul plus value
/// aggregation, projections excluded.
///
/// Global: `2(HW)^2 C`; window: `2 M^2 HW C`; spectral: `2 HW C^2 / N`.
pub fn predicted_cost(
    kind: MsaKind,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    window: usize,
) -> Result<u64> {
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::InvalidArgument {
            op: "predicted_cost",
            message: format!("extents must be positive, got {h}x{w}x{c}"),
        });
    }
    let (h, w, c) = (h as u64, w as u64, c as u64);
    Ok(match kind {
        MsaKind::Global => 2 * (h * w) * (h * w) * c,
        MsaKind::Window => {
            if window == 0 {
                return Err(Error::InvalidArgument {
                    op: "predicted_cost",
                    message: "window size must be positive".into(),
                });
            }
            let m = window as u64;
            2 * m * m * h * w * c
        }
        MsaKind::Spectral => {
            if heads == 0 || c as usize % heads != 0 {
                return Err(Error::InvalidArgument {
                    op: "predicted_cost",
                    message: format!("heads {heads} must divide channels {c}"),
                });
            }
            let dh = c / heads as u64;
            2 * h * w * dh * dh * heads as u64
        }
    })
}

// ---------------------------------------------------------------------------
// parameters

/// Shared query/key/value/output projections, bias-free.
#[derive(Clone, Debug)]
pub struct AttnProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
    pub heads: usize,
}

impl AttnProjections {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument {
                op: "attention",
                message: format!("heads {heads} must divide channel count {dim}"),
            });
        }
        let mut proj = || {
            let data = (0..dim * dim).map(|_| rng.fan_in_f32(dim)).collect();
            Tensor::new(vec![dim, dim], data).expect("square projection")
        };
        Ok(Self {
            w_q: proj(),
            w_k: proj(),
            w_v: proj(),
            w_out: proj(),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    // bind / visit / visit_mut walk fields in the same order.

    pub fn bind(&self, g: &mut Graph, prefix: &str, entries: &mut Vec<(String, Var)>) -> BoundProjections {
        BoundProjections {
            w_q: bind_tensor(g, entries, prefix, "w_q", &self.w_q),
            w_k: bind_tensor(g, entries, prefix, "w_k", &self.w_k),
            w_v: bind_tensor(g, entries, prefix, "w_v", &self.w_v),
            w_out: bind_tensor(g, entries, prefix, "w_out", &self.w_out),
            heads: self.heads,
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w_q"), &self.w_q);
        f(&format!("{prefix}.w_k"), &self.w_k);
        f(&format!("{prefix}.w_v"), &self.w_v);
        f(&format!("{prefix}.w_out"), &self.w_out);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w_q"), &mut self.w_q);
        f(&format!("{prefix}.w_k"), &mut self.w_k);
        f(&format!("{prefix}.w_v"), &mut self.w_v);
        f(&format!("{prefix}.w_out"), &mut self.w_out);
    }
}

pub(crate) fn bind_tensor(
    g: &mut Graph,
    entries: &mut Vec<(String, Var)>,
    prefix: &str,
    name: &str,
    t: &Tensor,
) -> Var {
    let var = g.leaf(t.clone(), true);
    entries.push((format!("{prefix}.{name}"), var.clone()));
    var
}

#[derive(Clone)]
pub struct BoundProjections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_out: Var,
    pub heads: usize,
}

/// Spectral-wise MSA parameters: projections, one learnable temperature per
/// head, and the depthwise-conv position embedding applied to V.
#[derive(Clone, Debug)]
pub struct SMsaParams {
    pub proj: AttnProjections,
    /// One scalar per head, initialized to 1, rescaling the channel score
    /// matrix before the softmax.
    pub sigma: Tensor,
    pub pos_w1: Tensor,
    pub pos_b1: Tensor,
    pub pos_w2: Tensor,
    pub pos_b2: Tensor,
}

impl SMsaParams {
    pub fn new(dim: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        let proj = AttnProjections::new(dim, heads, rng)?;
        let mut dw = || {
            let data = (0..dim * 9).map(|_| rng.fan_in_f32(9)).collect();
            Tensor::new(vec![dim, 1, 3, 3], data).expect("depthwise kernel")
        };
        Ok(Self {
            proj,
            sigma: Tensor::ones(&[heads]),
            pos_w1: dw(),
            pos_b1: Tensor::zeros(&[dim]),
            pos_w2: dw(),
            pos_b2: Tensor::zeros(&[dim]),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.dim()
    }

    pub fn heads(&self) -> usize {
        self.proj.heads
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str, entries: &mut Vec<(String, Var)>) -> BoundSMsa {
        BoundSMsa {
            proj: self.proj.bind(g, prefix, entries),
            sigma: bind_tensor(g, entries, prefix, "sigma", &self.sigma),
            pos_w1: bind_tensor(g, entries, prefix, "pos_emb.0.weight", &self.pos_w1),
            pos_b1: bind_tensor(g, entries, prefix, "pos_emb.0.bias", &self.pos_b1),
            pos_w2: bind_tensor(g, entries, prefix, "pos_emb.1.weight", &self.pos_w2),
            pos_b2: bind_tensor(g, entries, prefix, "pos_emb.1.bias", &self.pos_b2),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(prefix, f);
        f(&format!("{prefix}.sigma"), &self.sigma);
        f(&format!("{prefix}.pos_emb.0.weight"), &self.pos_w1);
        f(&format!("{prefix}.pos_emb.0.bias"), &self.pos_b1);
        f(&format!("{prefix}.pos_emb.1.weight"), &self.pos_w2);
        f(&format!("{prefix}.pos_emb.1.bias"), &self.pos_b2);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(prefix, f);
        f(&format!("{prefix}.sigma"), &mut self.sigma);
        f(&format!("{prefix}.pos_emb.0.weight"), &mut self.pos_w1);
        f(&format!("{prefix}.pos_emb.0.bias"), &mut self.pos_b1);
        f(&format!("{prefix}.pos_emb.1.weight"), &mut self.pos_w2);
        f(&format!("{prefix}.pos_emb.1.bias"), &mut self.pos_b2);
    }
}

#[derive(Clone)]
pub struct BoundSMsa {
    pub proj: BoundProjections,
    pub sigma: Var,
    pub pos_w1: Var,
    pub pos_b1: Var,
    pub pos_w2: Var,
    pub pos_b2: Var,
}

// ---------------------------------------------------------------------------
// forward passes

fn nhwc_dims(x: &Var, op: &'static str, dim: usize) -> Result<(usize, usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[3] != dim {
        return Err(Error::ShapeMismatch {
            op,
            lhs: s.to_vec(),
            rhs: vec![0, 0, 0, dim],
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

/// Spectral-wise attention over an NHWC input; shape-preserving.
pub fn s_msa_forward(g: &mut Graph, p: &BoundSMsa, x: &Var) -> Result<Var> {
    s_msa_forward_detailed(g, p, x).map(|(out, _)| out)
}

/// As [`s_msa_forward`], additionally returning every per-(batch, head)
/// attention matrix for structural checks.
pub fn s_msa_forward_detailed(g: &mut Graph, p: &BoundSMsa, x: &Var) -> Result<(Var, Vec<Var>)> {
    let dim = p.proj.w_q.shape()[0];
    let heads = p.proj.heads;
    let (b, h, w, c) = nhwc_dims(x, "s_msa", dim)?;
    let hw = h * w;
    let dh = c / heads;

    let tokens = g.reshape(x, &[b * hw, c])?;
    let q = g.matmul(&tokens, &p.proj.w_q)?;
    let k = g.matmul(&tokens, &p.proj.w_k)?;
    let v = g.matmul(&tokens, &p.proj.w_v)?;

    let mut attn_mats = Vec::with_capacity(b * heads);
    let mut batch_outs = Vec::with_capacity(b);
    for bi in 0..b {
        let qb = g.narrow(&q, 0, bi * hw, hw)?;
        let kb = g.narrow(&k, 0, bi * hw, hw)?;
        let vb = g.narrow(&v, 0, bi * hw, hw)?;
        let mut heads_out = Vec::with_capacity(heads);
        for j in 0..heads {
            let qj = g.narrow(&qb, 1, j * dh, dh)?;
            let kj = g.narrow(&kb, 1, j * dh, dh)?;
            let vj = g.narrow(&vb, 1, j * dh, dh)?;
            let kjt = g.permute(&kj, &[1, 0])?;
            g.push_scope("attn_core");
            let scores = g.matmul(&kjt, &qj)?; // [dh, dh], contraction over tokens
            g.pop_scope();
            let sigma_j = g.narrow(&p.sigma, 0, j, 1)?;
            let scaled = g.scale(&scores, &sigma_j)?;
            // Normalize over the first index: each column of the attention
            // matrix is a distribution, so V_j * A_j mixes channels convexly.
            let attn = g.softmax(&scaled, 0)?;
            g.push_scope("attn_core");
            let head = g.matmul(&vj, &attn)?; // [hw, dh]
            g.pop_scope();
            attn_mats.push(attn);
            heads_out.push(head);
        }
        let refs: Vec<&Var> = heads_out.iter().collect();
        batch_outs.push(g.concat(1, &refs)?);
    }
    let refs: Vec<&Var> = batch_outs.iter().collect();
    let merged = g.concat(0, &refs)?;
    let projected = g.matmul(&merged, &p.proj.w_out)?;

    // Position embedding: depthwise 3x3 -> GELU -> depthwise 3x3 over V in
    // spatial layout. Channels are wavelength-ordered, so this is where order
    // information enters.
    let v_spatial = g.reshape(&v, &[b, h, w, c])?;
    let v_nchw = g.permute(&v_spatial, &[0, 3, 1, 2])?;
    g.push_scope("pos_emb");
    let p1 = g.conv2d(&v_nchw, &p.pos_w1, Some(&p.pos_b1), 1, 1, c)?;
    let a1 = g.gelu(&p1)?;
    let p2 = g.conv2d(&a1, &p.pos_w2, Some(&p.pos_b2), 1, 1, c)?;
    g.pop_scope();
    let pos_nhwc = g.permute(&p2, &[0, 2, 3, 1])?;
    let pos_tokens = g.reshape(&pos_nhwc, &[b * hw, c])?;

    let summed = g.add(&projected, &pos_tokens)?;
    let out = g.reshape(&summed, &[b, h, w, c])?;
    Ok((out, attn_mats))
}

/// Global spatial attention over all HW tokens, scaled by 1/sqrt(d_h).
/// Refuses inputs beyond [`DEFAULT_TOKEN_CAP`] tokens.
pub fn global_msa_forward(g: &mut Graph, p: &BoundProjections, x: &Var) -> Result<Var> {
    global_msa_forward_capped(g, p, x, DEFAULT_TOKEN_CAP)
}

pub fn global_msa_forward_capped(
    g: &mut Graph,
    p: &BoundProjections,
    x: &Var,
    cap: usize,
) -> Result<Var> {
    let dim = p.w_q.shape()[0];
    let (b, h, w, c) = nhwc_dims(x, "global_msa", dim)?;
    let hw = h * w;
    if hw > cap {
        return Err(Error::TokenCapExceeded { tokens: hw, cap });
    }
    let heads = p.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let tokens = g.reshape(x, &[b * hw, c])?;
    let q = g.matmul(&tokens, &p.w_q)?;
    let k = g.matmul(&tokens, &p.w_k)?;
    let v = g.matmul(&tokens, &p.w_v)?;

    let mut batch_outs = Vec::with_capacity(b);
    for bi in 0..b {
        let qb = g.narrow(&q, 0, bi * hw, hw)?;
        let kb = g.narrow(&k, 0, bi * hw, hw)?;
        let vb = g.narrow(&v, 0, bi * hw, hw)?;
        let mut heads_out = Vec::with_capacity(heads);
        for j in 0..heads {
            let qj = g.narrow(&qb, 1, j * dh, dh)?;
            let kj = g.narrow(&kb, 1, j * dh, dh)?;
            let vj = g.narrow(&vb, 1, j * dh, dh)?;
            let kjt = g.permute(&kj, &[1, 0])?;
            g.push_scope("attn_core");
            let scores = g.matmul(&qj, &kjt)?; // [hw, hw]
            g.pop_scope();
            let scaled = g.scale_const(&scores, scale)?;
            let attn = g.softmax(&scaled, 1)?; // rows are distributions over keys
            g.push_scope("attn_core");
            let head = g.matmul(&attn, &vj)?; // [hw, dh]
            g.pop_scope();
            heads_out.push(head);
        }
        let refs: Vec<&Var> = heads_out.iter().collect();
        batch_outs.push(g.concat(1, &refs)?);
    }
    let refs: Vec<&Var> = batch_outs.iter().collect();
    let merged = g.concat(0, &refs)?;
    let projected = g.matmul(&merged, &p.w_out)?;
    g.reshape(&projected, &[b, h, w, c])
}

/// Global attention applied independently inside each non-overlapping
/// `m x m` window.
pub fn window_msa_forward(g: &mut Graph, p: &BoundProjections, x: &Var, m: usize) -> Result<Var> {
    let dim = p.w_q.shape()[0];
    let (_, h, w, _) = nhwc_dims(x, "window_msa", dim)?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::InvalidArgument {
            op: "window_msa",
            message: format!("window {m} must divide spatial extents {h}x{w}"),
        });
    }
    let mut row_outs = Vec::with_capacity(h / m);
    for wi in 0..h / m {
        let rows = g.narrow(x, 1, wi * m, m)?;
        let mut col_outs = Vec::with_capacity(w / m);
        for wj in 0..w / m {
            let win = g.narrow(&rows, 2, wj * m, m)?;
            col_outs.push(global_msa_forward_capped(g, p, &win, usize::MAX)?);
        }
        let refs: Vec<&Var> = col_outs.iter().collect();
        row_outs.push(g.concat(2, &refs)?);
    }
    let refs: Vec<&Var> = row_outs.iter().collect();
    g.concat(1, &refs)
}

/// MACs recorded under `attn_core` scopes in `ledger`.
pub fn measured_core_macs(ledger: &crate::tensor::CostLedger) -> u64 {
    ledger.total_matching("attn_core")
}

/// Run one forward of the requested attention kind on a random input and
/// return the attention-core MACs its ledger recorded. The counterpart of
/// [`predicted_cost`] for predicted-vs-measured tables.
pub fn measured_cost(
    kind: MsaKind,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    window: usize,
    seed: u64,
) -> Result<u64> {
    let mut rng = Rng::new(seed);
    let n = h * w * c;
    let x = Tensor::new(vec![1, h, w, c], (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect())?;
    let mut g = Graph::inference();
    let mut entries = Vec::new();
    match kind {
        MsaKind::Spectral => {
            let p = SMsaParams::new(c, heads, &mut rng)?;
            let bound = p.bind(&mut g, "p", &mut entries);
            let xv = g.constant(x);
            s_msa_forward(&mut g, &bound, &xv)?;
        }
        MsaKind::Global => {
            let p = AttnProjections::new(c, heads, &mut rng)?;
            let bound = p.bind(&mut g, "p", &mut entries);
            let xv = g.constant(x);
            global_msa_forward_capped(&mut g, &bound, &xv, usize::MAX)?;
        }
        MsaKind::Window => {
            let p = AttnProjections::new(c, heads, &mut rng)?;
            let bound = p.bind(&mut g, "p", &mut entries);
            let xv = g.constant(x);
            window_msa_forward(&mut g, &bound, &xv, window)?;
        }
    }
    Ok(measured_core_macs(g.ledger()))
}
