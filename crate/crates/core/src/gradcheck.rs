//! Central finite-difference verification of autodiff gradients.
//!
//! The checker only ever evaluates forward passes, so it stays independent of
//! the backward kernels it validates. Outputs are scalarized through a fixed
//! random weighting, which exercises general upstream gradients instead of
//! the all-ones pattern a plain sum would feed back.

use crate::error::Result;
use crate::tensor::{Graph, Rng, Tensor, Var};

/// Gradients whose analytic and numeric magnitudes both fall below this floor
/// are below finite-difference resolution and auto-pass.
const FLOOR: f64 = 1e-7;

/// Outcome of a finite-difference sweep.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare autodiff gradients of `build`'s output against central finite
/// differences for every element of every input, at step size `h`.
///
/// `build` receives one `Var` per input tensor and returns the op output (any
/// shape); the checker applies the scalarizing weighted sum itself.
pub fn finite_diff_check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let weights = scalarize_weights(out.tensor().shape());
    let loss = scalarize(&mut g, &out, &weights)?;
    g.backward(&loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(v.shape()))
        })
        .collect();

    // Numeric sweep.
    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::inference();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = build(&mut g, &vars)?;
        let loss = scalarize(&mut g, &out, &weights)?;
        Ok(loss.tensor().item())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut checked = 0;
    let mut max_rel = 0.0f64;
    for ti in 0..inputs.len() {
        for ei in 0..inputs[ti].numel() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            checked += 1;
            let denom = a.abs().max(numeric.abs());
            if denom < FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(GradCheck {
        checked,
        max_rel_err: max_rel,
    })
}

fn scalarize_weights(shape: &[usize]) -> Tensor {
    let mut rng = Rng::new(0x5ca1ab1e);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(0.5, 1.5)).collect();
    Tensor::new(shape.to_vec(), data).expect("weights match output shape")
}

fn scalarize(g: &mut Graph, out: &Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, &w)?;
    g.sum_all(&prod)
}
