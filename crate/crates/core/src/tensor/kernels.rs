//! Pure forward and backward kernels.
//!
//! Everything here is a plain function on [`Tensor`] values; the graph layer
//! records which kernel ran and replays the matching backward. All loops are
//! sequential and in a fixed order, so results are bitwise reproducible.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Zero-fill or mirror (no edge repeat) spatial padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

fn dims4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::InvalidArgument {
            op,
            message: format!("expected rank-4 tensor, got shape {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2], s[3]))
}

// ---------------------------------------------------------------------------
// matmul

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose2d(t: &Tensor) -> Tensor {
    permute(t, &[1, 0]).expect("transpose2d on rank-2 tensor")
}

// ---------------------------------------------------------------------------
// elementwise

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn ew_add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn ew_sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn ew_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn ew_abs(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.abs()).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn ew_scale(x: &Tensor, c: f64) -> Tensor {
    let data = x.data().iter().map(|v| v * c).collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

/// Subgradient of |x|; zero at x == 0.
pub fn ew_sign(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn sum_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data().iter().sum())
}

// ---------------------------------------------------------------------------
// softmax

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "softmax",
            axis,
            rank,
        });
    }
    let shape = x.shape();
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            // Per-slice max subtraction keeps exp in range for inputs of any
            // magnitude.
            let mut m = f64::NEG_INFINITY;
            for k in 0..d {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..d {
                let e = (xd[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for k in 0..d {
                out[base + k * inner] *= inv;
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// dx given the softmax output `y` and upstream gradient `g`.
pub fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let shape = y.shape();
    let d = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * d * inner + i;
            let mut dot = 0.0;
            for k in 0..d {
                dot += gd[base + k * inner] * yd[base + k * inner];
            }
            for k in 0..d {
                let idx = base + k * inner;
                out[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation, fixed)

const GELU_A: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_B: f64 = 0.044_715;

pub fn gelu(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_A * (v + GELU_B * v * v * v)).tanh()))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

pub fn gelu_backward(x: &Tensor, g: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let u = GELU_A * (v + GELU_B * v * v * v);
            let t = u.tanh();
            let du = GELU_A * (1.0 + 3.0 * GELU_B * v * v);
            gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("shape preserved")
}

// ---------------------------------------------------------------------------
// layer normalization over the last axis (the channel axis of a token)

/// Returns the normalized output plus per-token (mean, 1/std) saved for the
/// backward pass.
pub fn layernorm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let rank = x.rank();
    if rank == 0 {
        return Err(Error::InvalidArgument {
            op: "layernorm",
            message: "rank-0 input".into(),
        });
    }
    let c = x.shape()[rank - 1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "layernorm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let tokens = x.numel() / c;
    let (xd, gd, bd) = (x.data(), gamma.data(), beta.data());
    let mut out = vec![0.0; xd.len()];
    let mut means = vec![0.0; tokens];
    let mut rstds = vec![0.0; tokens];
    for t in 0..tokens {
        let row = &xd[t * c..(t + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        means[t] = mean;
        rstds[t] = rstd;
        let orow = &mut out[t * c..(t + 1) * c];
        for k in 0..c {
            orow[k] = (row[k] - mean) * rstd * gd[k] + bd[k];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, means, rstds))
}

pub fn layernorm_backward(
    x: &Tensor,
    gamma: &Tensor,
    means: &[f64],
    rstds: &[f64],
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = *x.shape().last().expect("rank >= 1");
    let tokens = x.numel() / c;
    let (xd, gd, gout) = (x.data(), gamma.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for t in 0..tokens {
        let (mean, rstd) = (means[t], rstds[t]);
        let row = &xd[t * c..(t + 1) * c];
        let grow = &gout[t * c..(t + 1) * c];
        let mut sum_dy = 0.0;
        let mut sum_dy_yhat = 0.0;
        for k in 0..c {
            let yhat = (row[k] - mean) * rstd;
            let dy = grow[k] * gd[k];
            dgamma[k] += grow[k] * yhat;
            dbeta[k] += grow[k];
            sum_dy += dy;
            sum_dy_yhat += dy * yhat;
        }
        let inv_c = 1.0 / c as f64;
        let drow = &mut dx[t * c..(t + 1) * c];
        for k in 0..c {
            let yhat = (row[k] - mean) * rstd;
            let dy = grow[k] * gd[k];
            drow[k] = rstd * (dy - inv_c * sum_dy - yhat * inv_c * sum_dy_yhat);
        }
    }
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(vec![c], dgamma).expect("gamma shape"),
        Tensor::new(vec![c], dbeta).expect("beta shape"),
    )
}

// ---------------------------------------------------------------------------
// 2-D convolution, NCHW, zero padding, optional groups

pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

fn conv_checks(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (b, cin, h, wd) = dims4(x, "conv2d")?;
    let (cout, cig, kh, kw) = dims4(w, "conv2d")?;
    let ConvSpec {
        stride,
        padding,
        groups,
    } = *spec;
    if stride == 0 || kh == 0 || kw == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: "stride and kernel extents must be positive".into(),
        });
    }
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: format!("groups {groups} must divide C_in {cin} and C_out {cout}"),
        });
    }
    if cig != cin / groups {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            message: format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            ),
        });
    }
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![cout],
                rhs: bt.shape().to_vec(),
            });
        }
    }
    Ok((b, cin, h, wd, cout, kh, kw))
}

/// MAC count of a conv2d forward with these shapes.
pub fn conv2d_macs(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> u64 {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * spec.padding - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding - kw) / spec.stride + 1;
    (b * cout * ho * wo * kh * kw * (cin / spec.groups)) as u64
}

/// Half-open output range over which `o*stride + k - padding` stays inside
/// `[0, extent)`.
fn valid_out_range(out_len: usize, stride: usize, k: usize, padding: usize, extent: usize) -> (usize, usize, isize) {
    let shift = k as isize - padding as isize;
    let lo = if shift < 0 {
        ((-shift) as usize).div_ceil(stride)
    } else {
        0
    };
    let max_in = extent as isize - 1 - shift;
    let hi = if max_in < 0 {
        0
    } else {
        ((max_in / stride as isize) as usize + 1).min(out_len)
    };
    (lo.min(hi), hi, shift)
}

pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (b, cin, h, wd, cout, kh, kw) = conv_checks(x, w, bias, spec)?;
    let (stride, padding, groups) = (spec.stride, spec.padding, spec.groups);
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let (cig, cog) = (cin / groups, cout / groups);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * cout * ho * wo];

    // Row-blocked loop order: for each output row, every channel and tap
    // reads the same few input rows, which stay cache-resident.
    let mut wo_ranges = Vec::with_capacity(kw);
    for kj in 0..kw {
        wo_ranges.push(valid_out_range(wo, stride, kj, padding, wd));
    }
    for bi in 0..b {
        for oi in 0..ho {
            for co in 0..cout {
                let grp = co / cog;
                let o_row = ((bi * cout + co) * ho + oi) * wo;
                if let Some(bt) = bias {
                    out[o_row..o_row + wo].fill(bt.data()[co]);
                }
                for j in 0..cig {
                    let ci = grp * cig + j;
                    for ki in 0..kh {
                        let hi = (oi * stride + ki) as isize - padding as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let x_row = ((bi * cin + ci) * h + hi as usize) * wd;
                        let w_row = ((co * cig + j) * kh + ki) * kw;
                        for kj in 0..kw {
                            let wv = wdat[w_row + kj];
                            let (wo_lo, wo_hi, wshift) = wo_ranges[kj];
                            if wo_lo >= wo_hi {
                                continue;
                            }
                            if stride == 1 {
                                // contiguous row: plain axpy, vectorizes
                                let xs = (x_row as isize + wshift + wo_lo as isize) as usize;
                                let n = wo_hi - wo_lo;
                                let src = &xd[xs..xs + n];
                                let dst = &mut out[o_row + wo_lo..o_row + wo_lo + n];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                let x_base = x_row as isize + wshift;
                                for oj in wo_lo..wo_hi {
                                    let xi = (x_base + (oj * stride) as isize) as usize;
                                    out[o_row + oj] += wv * xd[xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out)
}

pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    spec: &ConvSpec,
    g: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cig, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (stride, padding, groups) = (spec.stride, spec.padding, spec.groups);
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let cog = cout / groups;
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdat.len()];

    let mut wo_ranges = Vec::with_capacity(kw);
    for kj in 0..kw {
        wo_ranges.push(valid_out_range(wo, stride, kj, padding, wd));
    }
    for bi in 0..b {
        for oi in 0..ho {
            for co in 0..cout {
                let grp = co / cog;
                let o_row = ((bi * cout + co) * ho + oi) * wo;
                for j in 0..cig {
                    let ci = grp * cig + j;
                    for ki in 0..kh {
                        let hi = (oi * stride + ki) as isize - padding as isize;
                        if hi < 0 || hi >= h as isize {
                            continue;
                        }
                        let x_row = ((bi * cin + ci) * h + hi as usize) * wd;
                        let w_row = ((co * cig + j) * kh + ki) * kw;
                        for kj in 0..kw {
                            let widx = w_row + kj;
                            let wv = wdat[widx];
                            let (wo_lo, wo_hi, wshift) = wo_ranges[kj];
                            if wo_lo >= wo_hi {
                                continue;
                            }
                            let mut acc = 0.0;
                            if stride == 1 {
                                let xs = (x_row as isize + wshift + wo_lo as isize) as usize;
                                let n = wo_hi - wo_lo;
                                let grow = &gd[o_row + wo_lo..o_row + wo_lo + n];
                                let xrow = &xd[xs..xs + n];
                                let dxrow = &mut dx[xs..xs + n];
                                for i in 0..n {
                                    let gv = grow[i];
                                    dxrow[i] += wv * gv;
                                    acc += xrow[i] * gv;
                                }
                            } else {
                                let x_base = x_row as isize + wshift;
                                for oj in wo_lo..wo_hi {
                                    let xi = (x_base + (oj * stride) as isize) as usize;
                                    let gv = gd[o_row + oj];
                                    dx[xi] += wv * gv;
                                    acc += xd[xi] * gv;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }

    let db = if has_bias {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for co in 0..cout {
                let out_base = (bi * cout + co) * ho * wo;
                db[co] += gd[out_base..out_base + ho * wo].iter().sum::<f64>();
            }
        }
        Some(Tensor::new(vec![cout], db).expect("bias shape"))
    } else {
        None
    };

    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape preserved"),
        db,
    )
}

// ---------------------------------------------------------------------------
// transposed convolution, fixed kernel 2, stride 2, no padding
// weight layout [C_in, C_out, 2, 2]; output is exactly 2H x 2W

pub fn deconv2x2(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (b, cin, h, wd) = dims4(x, "deconv2x2")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[0] != cin || ws[2] != 2 || ws[3] != 2 {
        return Err(Error::ShapeMismatch {
            op: "deconv2x2",
            lhs: x.shape().to_vec(),
            rhs: ws.to_vec(),
        });
    }
    let cout = ws[1];
    if let Some(bt) = bias {
        if bt.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "deconv2x2",
                lhs: vec![cout],
                rhs: bt.shape().to_vec(),
            });
        }
    }
    let (ho, wo) = (2 * h, 2 * wd);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; b * cout * ho * wo];
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * ho * wo;
            if let Some(bt) = bias {
                out[out_base..out_base + ho * wo].fill(bt.data()[co]);
            }
            for ci in 0..cin {
                let x_base = (bi * cin + ci) * h * wd;
                for ki in 0..2 {
                    for kj in 0..2 {
                        let wv = wdat[((ci * cout + co) * 2 + ki) * 2 + kj];
                        for yi in 0..h {
                            let o_row = out_base + (2 * yi + ki) * wo + kj;
                            let x_row = x_base + yi * wd;
                            for xj in 0..wd {
                                out[o_row + 2 * xj] += wv * xd[x_row + xj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, cout, ho, wo], out)
}

pub fn deconv2x2_macs(x: &Tensor, w: &Tensor) -> u64 {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[1];
    (b * cin * cout * h * wd * 4) as u64
}

pub fn deconv2x2_backward(
    x: &Tensor,
    w: &Tensor,
    has_bias: bool,
    g: &Tensor,
) -> (Tensor, Tensor, Option<Tensor>) {
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[1];
    let (ho, wo) = (2 * h, 2 * wd);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut dx = vec![0.0; xd.len()];
    let mut dw = vec![0.0; wdat.len()];
    for bi in 0..b {
        for co in 0..cout {
            let out_base = (bi * cout + co) * ho * wo;
            for ci in 0..cin {
                let x_base = (bi * cin + ci) * h * wd;
                for ki in 0..2 {
                    for kj in 0..2 {
                        let widx = ((ci * cout + co) * 2 + ki) * 2 + kj;
                        let wv = wdat[widx];
                        let mut acc = 0.0;
                        for yi in 0..h {
                            let o_row = out_base + (2 * yi + ki) * wo + kj;
                            let x_row = x_base + yi * wd;
                            for xj in 0..wd {
                                let gv = gd[o_row + 2 * xj];
                                dx[x_row + xj] += wv * gv;
                                acc += xd[x_row + xj] * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let db = if has_bias {
        let mut db = vec![0.0; cout];
        for bi in 0..b {
            for co in 0..cout {
                let out_base = (bi * cout + co) * ho * wo;
                db[co] += gd[out_base..out_base + ho * wo].iter().sum::<f64>();
            }
        }
        Some(Tensor::new(vec![cout], db).expect("bias shape"))
    } else {
        None
    };
    (
        Tensor::new(x.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(w.shape().to_vec(), dw).expect("shape preserved"),
        db,
    )
}

// ---------------------------------------------------------------------------
// shape ops

pub fn permute(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let rank = t.rank();
    if perm.len() != rank {
        return Err(Error::InvalidArgument {
            op: "permute",
            message: format!("perm {perm:?} does not match rank {rank}"),
        });
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::InvalidArgument {
                op: "permute",
                message: format!("perm {perm:?} is not a permutation of 0..{rank}"),
            });
        }
        seen[p] = true;
    }
    let in_strides = t.strides();
    let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
    let mapped_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = vec![0.0; n];
    let xd = t.data();
    let mut coord = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = xd[src];
        // odometer increment over the output coordinates, last axis fastest
        for k in (0..rank).rev() {
            coord[k] += 1;
            src += mapped_strides[k];
            if coord[k] < out_shape[k] {
                break;
            }
            src -= coord[k] * mapped_strides[k];
            coord[k] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &p) in perm.iter().enumerate() {
        inv[p] = k;
    }
    inv
}

pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let rank = t.rank();
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "narrow",
            axis,
            rank,
        });
    }
    let d = t.shape()[axis];
    if len == 0 || start + len > d {
        return Err(Error::InvalidArgument {
            op: "narrow",
            message: format!("range {start}..{} out of bounds for axis extent {d}", start + len),
        });
    }
    let outer: usize = t.shape()[..axis].iter().product();
    let inner: usize = t.shape()[axis + 1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[axis] = len;
    let xd = t.data();
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = (o * d + start) * inner;
        let dst = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&xd[src..src + len * inner]);
    }
    Tensor::new(shape, out)
}

/// Adjoint of `narrow`: place `g` back into a zero tensor of the input shape.
pub fn narrow_scatter(g: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let d = in_shape[axis];
    let len = g.shape()[axis];
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let gd = g.data();
    let mut out = vec![0.0; in_shape.iter().product()];
    for o in 0..outer {
        let dst = (o * d + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
    }
    Tensor::new(in_shape.to_vec(), out).expect("input shape")
}

pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::InvalidArgument {
            op: "concat",
            message: "no inputs".into(),
        });
    }
    let rank = parts[0].rank();
    if axis >= rank {
        return Err(Error::AxisOutOfRange {
            op: "concat",
            axis,
            rank,
        });
    }
    let mut total = 0;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        for (k, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
            if k != axis && a != b {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        total += p.shape()[axis];
    }
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = total;
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![0.0; shape.iter().product()];
    for o in 0..outer {
        let mut offset = 0;
        for p in parts {
            let dp = p.shape()[axis];
            let src = o * dp * inner;
            let dst = (o * total + offset) * inner;
            out[dst..dst + dp * inner].copy_from_slice(&p.data()[src..src + dp * inner]);
            offset += dp;
        }
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// spatial padding (NCHW)

fn mirror(i: isize, extent: usize) -> usize {
    let n = extent as isize;
    let j = if i < 0 { -i } else if i >= n { 2 * n - 2 - i } else { i };
    debug_assert!(j >= 0 && j < n);
    j as usize
}

/// Pads the two trailing spatial axes; `pads` is (top, bottom, left, right).
pub fn pad2d(x: &Tensor, pads: [usize; 4], mode: PadMode) -> Result<Tensor> {
    let (b, c, h, w) = dims4(x, "pad2d")?;
    let [top, bottom, left, right] = pads;
    if mode == PadMode::Reflect {
        let max_h = top.max(bottom);
        let max_w = left.max(right);
        if (max_h > 0 && max_h > h - 1) || (max_w > 0 && max_w > w - 1) {
            return Err(Error::InvalidArgument {
                op: "pad2d",
                message: format!("reflect padding {pads:?} exceeds input extent {h}x{w}"),
            });
        }
    }
    let (ho, wo) = (h + top + bottom, w + left + right);
    let xd = x.data();
    let mut out = vec![0.0; b * c * ho * wo];
    for bc in 0..b * c {
        let x_base = bc * h * w;
        let o_base = bc * ho * wo;
        for oi in 0..ho {
            let si = oi as isize - top as isize;
            let in_row = match mode {
                PadMode::Zero => {
                    if si < 0 || si >= h as isize {
                        continue; // leave zeros
                    }
                    si as usize
                }
                PadMode::Reflect => mirror(si, h),
            };
            let x_row = x_base + in_row * w;
            let o_row = o_base + oi * wo;
            for oj in 0..wo {
                let sj = oj as isize - left as isize;
                match mode {
                    PadMode::Zero => {
                        if sj >= 0 && sj < w as isize {
                            out[o_row + oj] = xd[x_row + sj as usize];
                        }
                    }
                    PadMode::Reflect => {
                        out[o_row + oj] = xd[x_row + mirror(sj, w)];
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

pub fn pad2d_backward(g: &Tensor, in_shape: &[usize], pads: [usize; 4], mode: PadMode) -> Tensor {
    let (b, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let [top, _, left, _] = pads;
    let (ho, wo) = (g.shape()[2], g.shape()[3]);
    let gd = g.data();
    let mut dx = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        let x_base = bc * h * w;
        let o_base = bc * ho * wo;
        for oi in 0..ho {
            let si = oi as isize - top as isize;
            let in_row = match mode {
                PadMode::Zero => {
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    si as usize
                }
                PadMode::Reflect => mirror(si, h),
            };
            let x_row = x_base + in_row * w;
            let o_row = o_base + oi * wo;
            for oj in 0..wo {
                let sj = oj as isize - left as isize;
                match mode {
                    PadMode::Zero => {
                        if sj >= 0 && sj < w as isize {
                            dx[x_row + sj as usize] += gd[o_row + oj];
                        }
                    }
                    PadMode::Reflect => {
                        dx[x_row + mirror(sj, w)] += gd[o_row + oj];
                    }
                }
            }
        }
    }
    Tensor::new(in_shape.to_vec(), dx).expect("input shape")
}

pub fn matmul_macs(a: &Tensor, b: &Tensor) -> u64 {
    (a.shape()[0] * a.shape()[1] * b.shape()[1]) as u64
}
