//! Operation graph with reverse-mode differentiation.
//!
//! A [`Graph`] records every executed op in topological (append) order
//! together with the saved values its backward needs. [`Graph::backward`]
//! walks the record once in reverse, accumulating gradients additively, so a
//! value used twice receives the sum of both contributions. A graph built
//! with [`Graph::inference`] keeps no record: intermediate tensors are freed
//! as soon as the caller drops their [`Var`]s, while the MAC ledger still
//! ticks.

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, ConvSpec};
use super::{CostLedger, Tensor};
use crate::error::{Error, Result};

pub use super::kernels::PadMode;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value produced inside a [`Graph`].
#[derive(Clone, Debug)]
pub struct Var {
    graph: u64,
    id: usize,
    value: Rc<Tensor>,
    needs_grad: bool,
}

impl Var {
    pub fn tensor(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }
}

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Abs { x: usize },
    ScaleConst { x: usize, c: f64 },
    Scale { x: usize, s: usize },
    SumAll { x: usize },
    Matmul { a: usize, b: usize },
    Softmax { x: usize, axis: usize },
    Gelu { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, means: Vec<f64>, rstds: Vec<f64> },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, padding: usize, groups: usize },
    Deconv2x2 { x: usize, w: usize, bias: Option<usize> },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { axis: usize, parts: Vec<usize> },
    Narrow { x: usize, axis: usize, start: usize },
    Pad2d { x: usize, pads: [usize; 4], mode: PadMode },
}

struct Node {
    op: Op,
    value: Rc<Tensor>,
    needs_grad: bool,
    is_leaf: bool,
}

/// Single-threaded operation recorder with per-graph MAC ledger.
pub struct Graph {
    gid: u64,
    track: bool,
    finished: bool,
    nodes: Vec<Node>,
    next_id: usize,
    grads: Vec<Option<Tensor>>,
    ledger: CostLedger,
    scope: Vec<String>,
}

impl Graph {
    /// Graph that records ops for a later backward pass.
    pub fn new() -> Self {
        Self::with_mode(true)
    }

    /// Forward-only graph: no op record, intermediates freed as their handles
    /// drop, ledger still active.
    pub fn inference() -> Self {
        Self::with_mode(false)
    }

    fn with_mode(track: bool) -> Self {
        Self {
            gid: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            track,
            finished: false,
            nodes: Vec::new(),
            next_id: 0,
            grads: Vec::new(),
            ledger: CostLedger::new(),
            scope: Vec::new(),
        }
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    pub fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    fn record_macs(&mut self, label: &str, macs: u64) {
        let mut path = self.scope.join("/");
        if !path.is_empty() {
            path.push('/');
        }
        path.push_str(label);
        self.ledger.record(&path, macs);
    }

    fn check(&self, op: &'static str, v: &Var) -> Result<()> {
        if v.graph != self.gid {
            return Err(Error::DetachedGraph { op });
        }
        Ok(())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, is_leaf: bool) -> Var {
        let rc = Rc::new(value);
        let id = self.next_id;
        self.next_id += 1;
        if self.track {
            self.nodes.push(Node {
                op,
                value: rc.clone(),
                needs_grad,
                is_leaf,
            });
        }
        Var {
            graph: self.gid,
            id,
            value: rc,
            needs_grad: needs_grad && self.track,
        }
    }

    /// Register a leaf value; `requires_grad` marks it as a tracked parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // -- elementwise ---------------------------------------------------------

    pub fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check("add", a)?;
        self.check("add", b)?;
        let out = kernels::ew_add(a.tensor(), b.tensor())?;
        Ok(self.push(Op::Add { a: a.id, b: b.id }, out, a.needs_grad || b.needs_grad, false))
    }

    pub fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check("sub", a)?;
        self.check("sub", b)?;
        let out = kernels::ew_sub(a.tensor(), b.tensor())?;
        Ok(self.push(Op::Sub { a: a.id, b: b.id }, out, a.needs_grad || b.needs_grad, false))
    }

    pub fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check("mul", a)?;
        self.check("mul", b)?;
        let out = kernels::ew_mul(a.tensor(), b.tensor())?;
        Ok(self.push(Op::Mul { a: a.id, b: b.id }, out, a.needs_grad || b.needs_grad, false))
    }

    pub fn abs(&mut self, x: &Var) -> Result<Var> {
        self.check("abs", x)?;
        let out = kernels::ew_abs(x.tensor());
        Ok(self.push(Op::Abs { x: x.id }, out, x.needs_grad, false))
    }

    pub fn scale_const(&mut self, x: &Var, c: f64) -> Result<Var> {
        self.check("scale_const", x)?;
        let out = kernels::ew_scale(x.tensor(), c);
        Ok(self.push(Op::ScaleConst { x: x.id, c }, out, x.needs_grad, false))
    }

    /// Multiply by a single-element tensor (a learnable scalar).
    pub fn scale(&mut self, x: &Var, s: &Var) -> Result<Var> {
        self.check("scale", x)?;
        self.check("scale", s)?;
        if s.tensor().numel() != 1 {
            return Err(Error::InvalidArgument {
                op: "scale",
                message: format!("scale factor must have one element, got {:?}", s.shape()),
            });
        }
        let out = kernels::ew_scale(x.tensor(), s.tensor().item());
        Ok(self.push(Op::Scale { x: x.id, s: s.id }, out, x.needs_grad || s.needs_grad, false))
    }

    pub fn sum_all(&mut self, x: &Var) -> Result<Var> {
        self.check("sum_all", x)?;
        let out = kernels::sum_all(x.tensor());
        Ok(self.push(Op::SumAll { x: x.id }, out, x.needs_grad, false))
    }

    // -- linear algebra ------------------------------------------------------

    pub fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let out = kernels::matmul(a.tensor(), b.tensor())?;
        self.record_macs("matmul", kernels::matmul_macs(a.tensor(), b.tensor()));
        Ok(self.push(Op::Matmul { a: a.id, b: b.id }, out, a.needs_grad || b.needs_grad, false))
    }

    pub fn softmax(&mut self, x: &Var, axis: usize) -> Result<Var> {
        self.check("softmax", x)?;
        let out = kernels::softmax(x.tensor(), axis)?;
        Ok(self.push(Op::Softmax { x: x.id, axis }, out, x.needs_grad, false))
    }

    pub fn gelu(&mut self, x: &Var) -> Result<Var> {
        self.check("gelu", x)?;
        let out = kernels::gelu(x.tensor());
        Ok(self.push(Op::Gelu { x: x.id }, out, x.needs_grad, false))
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layernorm(&mut self, x: &Var, gamma: &Var, beta: &Var) -> Result<Var> {
        self.check("layernorm", x)?;
        self.check("layernorm", gamma)?;
        self.check("layernorm", beta)?;
        let (out, means, rstds) = kernels::layernorm(x.tensor(), gamma.tensor(), beta.tensor())?;
        let needs = x.needs_grad || gamma.needs_grad || beta.needs_grad;
        Ok(self.push(
            Op::LayerNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                means,
                rstds,
            },
            out,
            needs,
            false,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: &Var,
        w: &Var,
        bias: Option<&Var>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Var> {
        self.check("conv2d", x)?;
        self.check("conv2d", w)?;
        if let Some(b) = bias {
            self.check("conv2d", b)?;
        }
        let spec = ConvSpec {
            stride,
            padding,
            groups,
        };
        let out = kernels::conv2d(x.tensor(), w.tensor(), bias.map(|b| b.tensor()), &spec)?;
        self.record_macs("conv2d", kernels::conv2d_macs(x.tensor(), w.tensor(), &spec));
        let needs = x.needs_grad || w.needs_grad || bias.map(|b| b.needs_grad).unwrap_or(false);
        Ok(self.push(
            Op::Conv2d {
                x: x.id,
                w: w.id,
                bias: bias.map(|b| b.id),
                stride,
                padding,
                groups,
            },
            out,
            needs,
            false,
        ))
    }

    /// Transposed convolution, kernel 2, stride 2: exactly doubles H and W.
    pub fn deconv2x2(&mut self, x: &Var, w: &Var, bias: Option<&Var>) -> Result<Var> {
        self.check("deconv2x2", x)?;
        self.check("deconv2x2", w)?;
        if let Some(b) = bias {
            self.check("deconv2x2", b)?;
        }
        let out = kernels::deconv2x2(x.tensor(), w.tensor(), bias.map(|b| b.tensor()))?;
        self.record_macs("deconv2x2", kernels::deconv2x2_macs(x.tensor(), w.tensor()));
        let needs = x.needs_grad || w.needs_grad || bias.map(|b| b.needs_grad).unwrap_or(false);
        Ok(self.push(
            Op::Deconv2x2 {
                x: x.id,
                w: w.id,
                bias: bias.map(|b| b.id),
            },
            out,
            needs,
            false,
        ))
    }

    // -- shape ---------------------------------------------------------------

    pub fn reshape(&mut self, x: &Var, shape: &[usize]) -> Result<Var> {
        self.check("reshape", x)?;
        let out = x.tensor().reshaped(shape)?;
        Ok(self.push(Op::Reshape { x: x.id }, out, x.needs_grad, false))
    }

    pub fn permute(&mut self, x: &Var, perm: &[usize]) -> Result<Var> {
        self.check("permute", x)?;
        let out = kernels::permute(x.tensor(), perm)?;
        Ok(self.push(
            Op::Permute {
                x: x.id,
                perm: perm.to_vec(),
            },
            out,
            x.needs_grad,
            false,
        ))
    }

    pub fn concat(&mut self, axis: usize, parts: &[&Var]) -> Result<Var> {
        for p in parts {
            self.check("concat", p)?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|p| p.tensor()).collect();
        let out = kernels::concat(axis, &tensors)?;
        let needs = parts.iter().any(|p| p.needs_grad);
        Ok(self.push(
            Op::Concat {
                axis,
                parts: parts.iter().map(|p| p.id).collect(),
            },
            out,
            needs,
            false,
        ))
    }

    pub fn narrow(&mut self, x: &Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check("narrow", x)?;
        let out = kernels::narrow(x.tensor(), axis, start, len)?;
        Ok(self.push(
            Op::Narrow {
                x: x.id,
                axis,
                start,
            },
            out,
            x.needs_grad,
            false,
        ))
    }

    /// Split into `sections` equal parts along `axis`.
    pub fn split(&mut self, x: &Var, axis: usize, sections: usize) -> Result<Vec<Var>> {
        let rank = x.tensor().rank();
        if axis >= rank {
            return Err(Error::AxisOutOfRange {
                op: "split",
                axis,
                rank,
            });
        }
        let d = x.shape()[axis];
        if sections == 0 || d % sections != 0 {
            return Err(Error::InvalidArgument {
                op: "split",
                message: format!("axis extent {d} not divisible into {sections} sections"),
            });
        }
        let len = d / sections;
        (0..sections)
            .map(|s| self.narrow(x, axis, s * len, len))
            .collect()
    }

    pub fn pad2d(&mut self, x: &Var, pads: [usize; 4], mode: PadMode) -> Result<Var> {
        self.check("pad2d", x)?;
        let out = kernels::pad2d(x.tensor(), pads, mode)?;
        Ok(self.push(Op::Pad2d { x: x.id, pads, mode }, out, x.needs_grad, false))
    }

    /// Crop the two trailing spatial axes of an NCHW tensor to `h x w` from
    /// the origin.
    pub fn crop2d(&mut self, x: &Var, h: usize, w: usize) -> Result<Var> {
        let rows = self.narrow(x, 2, 0, h)?;
        self.narrow(&rows, 3, 0, w)
    }

    // -- backward ------------------------------------------------------------

    /// Populate gradients of all tracked leaves reachable from `loss`.
    ///
    /// Consumes the recorded values: a second call errors, and non-leaf
    /// activations are released.
    pub fn backward(&mut self, loss: &Var) -> Result<()> {
        if !self.track {
            return Err(Error::DetachedGraph { op: "backward" });
        }
        self.check("backward", loss)?;
        if self.finished {
            return Err(Error::BackwardConsumed);
        }
        if loss.tensor().numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }
        if !loss.needs_grad {
            return Err(Error::DetachedGraph { op: "backward" });
        }
        self.finished = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            if self.nodes[id].is_leaf {
                self.grads[id] = Some(g);
                continue;
            }
            self.dispatch_backward(id, g);
        }

        // Release recorded activations; leaf grads stay retrievable.
        for node in &mut self.nodes {
            if !node.is_leaf {
                node.value = Rc::new(Tensor::zeros(&[0]));
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: usize, delta: Tensor) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                for (a, d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        self.nodes[id].value.clone()
    }

    fn dispatch_backward(&mut self, id: usize, g: Tensor) {
        // Ops are dispatched exactly once, in reverse topological order.
        match &self.nodes[id].op {
            Op::Leaf => unreachable!("leaves keep their gradient"),
            &Op::Add { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g);
            }
            &Op::Sub { a, b } => {
                self.accumulate(a, g.clone());
                self.accumulate(b, kernels::ew_scale(&g, -1.0));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                self.accumulate(a, kernels::ew_mul(&g, &vb).expect("recorded shapes"));
                self.accumulate(b, kernels::ew_mul(&g, &va).expect("recorded shapes"));
            }
            &Op::Abs { x } => {
                let vx = self.value(x);
                let sign = kernels::ew_sign(&vx);
                self.accumulate(x, kernels::ew_mul(&g, &sign).expect("recorded shapes"));
            }
            &Op::ScaleConst { x, c } => {
                self.accumulate(x, kernels::ew_scale(&g, c));
            }
            &Op::Scale { x, s } => {
                let (vx, vs) = (self.value(x), self.value(s));
                self.accumulate(x, kernels::ew_scale(&g, vs.item()));
                let ds = g
                    .data()
                    .iter()
                    .zip(vx.data())
                    .map(|(gv, xv)| gv * xv)
                    .sum::<f64>();
                self.accumulate(s, Tensor::scalar(ds));
            }
            &Op::SumAll { x } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, Tensor::filled(&shape, g.item()));
            }
            &Op::Matmul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let da = kernels::matmul(&g, &kernels::transpose2d(&vb)).expect("recorded shapes");
                let db = kernels::matmul(&kernels::transpose2d(&va), &g).expect("recorded shapes");
                self.accumulate(a, da);
                self.accumulate(b, db);
            }
            &Op::Softmax { x, axis } => {
                let y = self.value(id);
                self.accumulate(x, kernels::softmax_backward(&y, &g, axis));
            }
            &Op::Gelu { x } => {
                let vx = self.value(x);
                self.accumulate(x, kernels::gelu_backward(&vx, &g));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (means, rstds) = (means.clone(), rstds.clone());
                let (vx, vgamma) = (self.value(x), self.value(gamma));
                let (dx, dgamma, dbeta) =
                    kernels::layernorm_backward(&vx, &vgamma, &means, &rstds, &g);
                self.accumulate(x, dx);
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            &Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
                groups,
            } => {
                let (vx, vw) = (self.value(x), self.value(w));
                let spec = ConvSpec {
                    stride,
                    padding,
                    groups,
                };
                let (dx, dw, db) = kernels::conv2d_backward(&vx, &vw, bias.is_some(), &spec, &g);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                if let (Some(bid), Some(db)) = (bias, db) {
                    self.accumulate(bid, db);
                }
            }
            &Op::Deconv2x2 { x, w, bias } => {
                let (vx, vw) = (self.value(x), self.value(w));
                let (dx, dw, db) = kernels::deconv2x2_backward(&vx, &vw, bias.is_some(), &g);
                self.accumulate(x, dx);
                self.accumulate(w, dw);
                if let (Some(bid), Some(db)) = (bias, db) {
                    self.accumulate(bid, db);
                }
            }
            &Op::Reshape { x } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, g.reshaped(&shape).expect("recorded shapes"));
            }
            Op::Permute { x, perm } => {
                let (x, inv) = (*x, kernels::inverse_perm(perm));
                self.accumulate(x, kernels::permute(&g, &inv).expect("recorded shapes"));
            }
            Op::Concat { axis, parts } => {
                let (axis, parts) = (*axis, parts.clone());
                let mut offset = 0;
                for pid in parts {
                    let len = self.value(pid).shape()[axis];
                    let slice = kernels::narrow(&g, axis, offset, len).expect("recorded shapes");
                    self.accumulate(pid, slice);
                    offset += len;
                }
            }
            &Op::Narrow { x, axis, start } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, kernels::narrow_scatter(&g, &shape, axis, start));
            }
            &Op::Pad2d { x, pads, mode } => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(x, kernels::pad2d_backward(&g, &shape, pads, mode));
            }
        }
    }

    /// Gradient of a tracked leaf after [`Graph::backward`].
    pub fn grad(&self, v: &Var) -> Option<&Tensor> {
        if v.graph != self.gid {
            return None;
        }
        self.grads.get(v.id)?.as_ref()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
