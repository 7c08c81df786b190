//! Training: relative-error loss, Adam with bias correction, cosine
//! annealing, and the patch-based loop.
//!
//! Every run is a pure function of its seed: patch sampling, shuffling, and
//! augmentation draw from one splitmix stream, and all arithmetic is
//! sequential f64. After each optimizer step parameters are snapped back to
//! the binary32 grid so any checkpoint written mid-run reloads bitwise.

use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport, MRAE_EPS};
use crate::network::{BoundMst, MstPlusPlus};
use crate::synth::{augment, sample_patches, Dihedral, RgbHsiPair, SpectralCube};
use crate::tensor::{Graph, Rng, Tensor, Var};

pub const ADAM_EPS: f64 = 1e-8;

/// Full training recipe. Defaults follow the reference setup: 128-pixel
/// patches, batch 20, Adam(0.9, 0.999) from 4e-4 with cosine annealing over
/// 300 epochs, dihedral augmentation on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub lr0: f64,
    pub lr_floor: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate the held-out pair every this many steps; 0 evaluates only at
    /// the end.
    pub eval_every: u64,
    pub augment: bool,
    /// Patches drawn per source pair when building the epoch manifest.
    pub patches_per_pair: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 128,
            batch_size: 20,
            beta1: 0.9,
            beta2: 0.999,
            lr0: 4e-4,
            lr_floor: 1e-6,
            epochs: 300,
            seed: 0,
            eval_every: 50,
            augment: true,
            patches_per_pair: 8,
        }
    }
}

// ---------------------------------------------------------------------------
// loss

/// Differentiable mean relative absolute error against a fixed target:
/// `mean(|pred - gt| / max(gt, eps))`. Agrees with [`metrics::mrae`] on the
/// same values.
pub fn mrae_loss(g: &mut Graph, pred: &Var, gt: &Tensor) -> Result<Var> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "mrae_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let weights = Tensor::new(
        gt.shape().to_vec(),
        gt.data().iter().map(|&v| 1.0 / v.max(MRAE_EPS)).collect(),
    )?;
    let gt_var = g.constant(gt.clone());
    let w_var = g.constant(weights);
    let diff = g.sub(pred, &gt_var)?;
    let absdiff = g.abs(&diff)?;
    let weighted = g.mul(&absdiff, &w_var)?;
    let total = g.sum_all(&weighted)?;
    g.scale_const(&total, 1.0 / gt.numel() as f64)
}

// ---------------------------------------------------------------------------
// optimizer

/// Bias-corrected Adam on one flat parameter slice. `step` is 1-based.
pub fn adam_update(
    params: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..params.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Per-parameter first/second moment accumulators, aligned with the model's
/// canonical traversal order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &MstPlusPlus) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One optimizer step over every named parameter. `grads` must be in the
/// model's traversal order (as produced by [`collect_grads`]); parameters the
/// loss never reached update with a zero gradient.
pub fn adam_step(
    model: &mut MstPlusPlus,
    grads: &[(String, Option<Tensor>)],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
) -> Result<()> {
    state.step += 1;
    let step = state.step;
    let mut idx = 0;
    let mut failure: Option<Error> = None;
    let (ms, vs) = (&mut state.m, &mut state.v);
    model.visit_mut(&mut |name, t| {
        if failure.is_some() {
            return;
        }
        let (gname, grad) = &grads[idx];
        assert_eq!(gname, name, "gradient order must match traversal order");
        let zeros: Vec<f64>;
        let gslice: &[f64] = match grad {
            Some(gt) => {
                if !gt.is_finite() {
                    failure = Some(Error::NonFiniteGradient {
                        param: name.to_string(),
                        step,
                    });
                    return;
                }
                gt.data()
            }
            None => {
                zeros = vec![0.0; t.numel()];
                &zeros
            }
        };
        adam_update(
            t.data_mut(),
            gslice,
            ms[idx].data_mut(),
            vs[idx].data_mut(),
            step,
            lr,
            beta1,
            beta2,
        );
        idx += 1;
    });
    if let Some(e) = failure {
        state.step -= 1;
        return Err(e);
    }
    Ok(())
}

/// Gradients of every bound parameter after a backward pass, in traversal
/// order.
pub fn collect_grads(g: &Graph, bound: &BoundMst) -> Vec<(String, Option<Tensor>)> {
    bound
        .entries()
        .iter()
        .map(|(name, var)| (name.clone(), g.grad(var).cloned()))
        .collect()
}

// ---------------------------------------------------------------------------
// schedule

/// Cosine annealing: `floor + (lr0 - floor) * (1 + cos(pi * step/total)) / 2`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64, lr_floor: f64) -> Result<f64> {
    if step > total {
        return Err(Error::ScheduleOverrun { step, total });
    }
    if total == 0 {
        return Ok(lr0);
    }
    let progress = step as f64 / total as f64;
    Ok(lr_floor + 0.5 * (lr0 - lr_floor) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Clone, Copy, Debug)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct EvalLog {
    pub step: u64,
    pub report: MetricReport,
}

/// Best model seen at an evaluation point, by MRAE.
#[derive(Clone, Debug)]
pub struct BestCheckpoint {
    pub step: u64,
    pub mrae: f64,
    pub model: MstPlusPlus,
}

#[derive(Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    pub best: Option<BestCheckpoint>,
    /// Set when a non-finite loss aborted the run; the model is left at the
    /// last parameters that still produced a finite loss.
    pub diverged_at: Option<u64>,
}

fn batch_tensors(patches: &[&RgbHsiPair]) -> (Tensor, Tensor) {
    let b = patches.len();
    let (h, w) = (patches[0].hsi.height(), patches[0].hsi.width());
    let bands = patches[0].hsi.bands();
    let mut rgb = Vec::with_capacity(b * 3 * h * w);
    let mut hsi = Vec::with_capacity(b * bands * h * w);
    for p in patches {
        rgb.extend(p.rgb.values().iter().map(|&v| v as f64));
        hsi.extend(p.hsi.values().iter().map(|&v| v as f64));
    }
    (
        Tensor::new(vec![b, 3, h, w], rgb).expect("aligned patches"),
        Tensor::new(vec![b, bands, h, w], hsi).expect("aligned patches"),
    )
}

fn eval_model(model: &MstPlusPlus, pair: &RgbHsiPair) -> Result<MetricReport> {
    let pred = model.infer(&pair.rgb.to_batched_tensor())?;
    let cube = SpectralCube::from_tensor(&pred, pair.hsi.wavelengths().to_vec())?;
    metrics::evaluate(&pair.hsi, &cube)
}

/// Patch-based training. One epoch is one shuffled pass over the patch
/// manifest (`patches_per_pair` crops from every source pair). Evaluates the
/// held-out pair (or the first training pair) periodically, tracks the
/// best-MRAE snapshot, and aborts on non-finite loss keeping the last good
/// parameters.
pub fn train(
    config: &TrainConfig,
    pairs: &[RgbHsiPair],
    holdout: Option<&RgbHsiPair>,
    model: &mut MstPlusPlus,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "train",
            message: "dataset is empty".into(),
        });
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "train",
            message: "batch size must be at least 1".into(),
        });
    }
    if !(config.lr0 > config.lr_floor && config.lr_floor >= 0.0) {
        return Err(Error::InvalidArgument {
            op: "train",
            message: format!(
                "need lr0 > floor >= 0, got lr0={} floor={}",
                config.lr0, config.lr_floor
            ),
        });
    }

    let mut report = TrainReport::default();
    if config.epochs == 0 {
        return Ok(report);
    }

    // Patch manifest: a fixed pool of aligned crops per source pair.
    let mut manifest: Vec<RgbHsiPair> = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let patch_seed = config.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        manifest.extend(sample_patches(
            pair,
            config.patch_size,
            config.patches_per_pair,
            patch_seed,
        )?);
    }

    let eval_pair = holdout.unwrap_or(&pairs[0]);
    let steps_per_epoch = manifest.len().div_ceil(config.batch_size) as u64;
    let total_steps = config.epochs as u64 * steps_per_epoch;

    let mut rng = Rng::new(config.seed);
    let mut adam = AdamState::new(model);
    let mut backup = model.clone(); // params behind the last finite loss
    let mut step = 0u64;

    for _epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let lr = cosine_lr(step, total_steps, config.lr0, config.lr_floor)?;

            let augmented: Vec<RgbHsiPair> = chunk
                .iter()
                .map(|&i| {
                    if config.augment {
                        augment(&manifest[i], Dihedral::ALL[rng.below(8)])
                    } else {
                        manifest[i].clone()
                    }
                })
                .collect();
            let refs: Vec<&RgbHsiPair> = augmented.iter().collect();
            let (rgb, gt) = batch_tensors(&refs);

            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let input = g.constant(rgb);
            let pred = crate::network::mstpp_forward(&mut g, &bound, &input)?;
            let loss = mrae_loss(&mut g, &pred, &gt)?;
            let loss_value = loss.tensor().item();

            if !loss_value.is_finite() {
                *model = backup;
                report.diverged_at = Some(step);
                return Ok(report);
            }
            backup = model.clone();

            g.backward(&loss)?;
            let grads = collect_grads(&g, &bound);
            drop(g);
            adam_step(model, &grads, &mut adam, lr, config.beta1, config.beta2)?;
            // keep parameters exactly representable in the checkpoint format
            model.visit_mut(&mut |_, t| t.snap_f32());

            report.steps.push(StepLog {
                step,
                lr,
                loss: loss_value,
            });
            step += 1;

            if config.eval_every > 0 && step % config.eval_every == 0 {
                let metrics = eval_model(model, eval_pair)?;
                report.evals.push(EvalLog {
                    step,
                    report: metrics,
                });
                let better = report
                    .best
                    .as_ref()
                    .map(|b| metrics.mrae < b.mrae)
                    .unwrap_or(true);
                if better {
                    report.best = Some(BestCheckpoint {
                        step,
                        mrae: metrics.mrae,
                        model: model.clone(),
                    });
                }
            }
        }
    }

    // final evaluation so the best snapshot is always populated
    let metrics = eval_model(model, eval_pair)?;
    report.evals.push(EvalLog {
        step,
        report: metrics,
    });
    let better = report
        .best
        .as_ref()
        .map(|b| metrics.mrae < b.mrae)
        .unwrap_or(true);
    if better {
        report.best = Some(BestCheckpoint {
            step,
            mrae: metrics.mrae,
            model: model.clone(),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::MstConfig;
    use crate::synth::{generate_pair, ResponseMatrix, SceneSpec};

    #[test]
    fn cosine_schedule_endpoints_and_midpoint() {
        let lr0 = 4e-4;
        let floor = 1e-6;
        assert_eq!(cosine_lr(0, 100, lr0, floor).unwrap(), lr0);
        let end = cosine_lr(100, 100, lr0, floor).unwrap();
        assert!((end - floor).abs() < 1e-18);
        let mid = cosine_lr(50, 100, lr0, floor).unwrap();
        assert!((mid - (lr0 + floor) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn cosine_schedule_is_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for step in 0..=200 {
            let lr = cosine_lr(step, 200, 1e-3, 1e-6).unwrap();
            assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn cosine_schedule_rejects_overrun() {
        assert!(matches!(
            cosine_lr(101, 100, 1e-3, 0.0),
            Err(Error::ScheduleOverrun { .. })
        ));
    }

    #[test]
    fn adam_first_step_is_minus_lr() {
        // constant gradient 1: bias correction makes m_hat = v_hat = 1, so
        // the first update is -lr / (1 + eps)
        let mut p = [0.5];
        let mut m = [0.0];
        let mut v = [0.0];
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-3, 0.9, 0.999);
        let delta = p[0] - 0.5;
        assert!((delta + 1e-3 / (1.0 + ADAM_EPS)).abs() < 1e-18, "delta {delta}");
    }

    #[test]
    fn adam_zero_grads_leave_fresh_params_unchanged() {
        let mut p = [0.25, -0.75];
        let mut m = [0.0; 2];
        let mut v = [0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 1e-3, 0.9, 0.999);
        assert_eq!(p, [0.25, -0.75]);
        assert_eq!(m, [0.0; 2]);
    }

    #[test]
    fn adam_zero_lr_is_bitwise_identity() {
        let mut p = [0.123456789, -3.21];
        let before = p;
        let mut m = [0.4, 0.1];
        let mut v = [0.2, 0.3];
        adam_update(&mut p, &[1.0, -2.0], &mut m, &mut v, 3, 0.0, 0.9, 0.999);
        assert_eq!(p[0].to_bits(), before[0].to_bits());
        assert_eq!(p[1].to_bits(), before[1].to_bits());
        // moments still decay toward the new gradient
        assert_ne!(m, [0.4, 0.1]);
    }

    #[test]
    fn adam_matches_reference_scalar_trace() {
        // independent reference transcription of bias-corrected Adam
        let (b1, b2, lr) = (0.9, 0.999, 0.01);
        let grads = [1.0, -0.5, 0.25, 2.0, -1.0, 0.1, 0.0, -0.3, 0.7, 1.5];
        let mut ref_p = 1.0f64;
        let (mut ref_m, mut ref_v) = (0.0f64, 0.0f64);
        let mut trace = Vec::new();
        for (t, &g) in grads.iter().enumerate() {
            ref_m = b1 * ref_m + (1.0 - b1) * g;
            ref_v = b2 * ref_v + (1.0 - b2) * g * g;
            let mh = ref_m / (1.0 - b1.powi(t as i32 + 1));
            let vh = ref_v / (1.0 - b2.powi(t as i32 + 1));
            ref_p -= lr * mh / (vh.sqrt() + ADAM_EPS);
            trace.push(ref_p);
        }

        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        for (t, &g) in grads.iter().enumerate() {
            adam_update(&mut p, &[g], &mut m, &mut v, t as u64 + 1, lr, b1, b2);
            assert!((p[0] - trace[t]).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn mrae_loss_agrees_with_metric() {
        let mut spec = SceneSpec::new(31, 6, 6, 4);
        spec.bands = 5;
        let gt_cube = generate_pair(
            &spec,
            &ResponseMatrix::gaussian_default(&crate::synth::spectral_wavelengths(5)),
        )
        .unwrap()
        .hsi;
        let mut rng = Rng::new(32);
        let pred_vals: Vec<f32> = (0..gt_cube.values().len())
            .map(|_| rng.next_f32())
            .collect();
        let pred_cube = SpectralCube::new(6, 6, 5, gt_cube.wavelengths().to_vec(), pred_vals)
            .unwrap();

        let metric = metrics::mrae(&gt_cube, &pred_cube).unwrap();
        let mut g = Graph::inference();
        let pred = g.constant(pred_cube.to_tensor());
        let loss = mrae_loss(&mut g, &pred, &gt_cube.to_tensor()).unwrap();
        assert!((loss.tensor().item() - metric).abs() < 1e-10);
    }

    #[test]
    fn mrae_loss_scalar_case_and_gradient() {
        // gt=2, pred=1: loss 0.5, d(loss)/d(pred) = -0.5
        let mut g = Graph::new();
        let pred = g.leaf(Tensor::scalar(1.0), true);
        let loss = mrae_loss(&mut g, &pred, &Tensor::scalar(2.0)).unwrap();
        assert!((loss.tensor().item() - 0.5).abs() < 1e-15);
        g.backward(&loss).unwrap();
        assert!((g.grad(&pred).unwrap().item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn mrae_loss_zero_at_match_with_zero_gradient() {
        let gt = Tensor::new(vec![2, 2], vec![0.3, 0.5, 0.9, 0.1]).unwrap();
        let mut g = Graph::new();
        let pred = g.leaf(gt.clone(), true);
        let loss = mrae_loss(&mut g, &pred, &gt).unwrap();
        assert_eq!(loss.tensor().item(), 0.0);
        g.backward(&loss).unwrap();
        assert!(g.grad(&pred).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mrae_loss_gradient_matches_finite_differences() {
        let gt = Tensor::new(
            vec![2, 2, 2],
            vec![0.4, 0.8, 0.2, 0.9, 0.6, 0.3, 0.7, 0.5],
        )
        .unwrap();
        let mut rng = Rng::new(33);
        let pred = Tensor::new(
            vec![2, 2, 2],
            (0..8).map(|_| rng.uniform(0.05, 1.0)).collect(),
        )
        .unwrap();
        let gt2 = gt.clone();
        let check = crate::gradcheck::finite_diff_check(&[pred], 1e-6, move |g, v| {
            mrae_loss(g, &v[0], &gt2)
        })
        .unwrap();
        assert!(check.max_rel_err < 1e-5, "rel err {}", check.max_rel_err);
    }

    fn tiny_dataset(n: usize, size: usize, bands: usize) -> Vec<RgbHsiPair> {
        let m = ResponseMatrix::gaussian_default(&crate::synth::spectral_wavelengths(bands));
        (0..n)
            .map(|i| {
                let mut spec = SceneSpec::new(100 + i as u64, size, size, 5);
                spec.bands = bands;
                spec.noise_scale = 0.0;
                generate_pair(&spec, &m).unwrap()
            })
            .collect()
    }

    fn tiny_config(steps_epochs: usize) -> TrainConfig {
        TrainConfig {
            patch_size: 8,
            batch_size: 2,
            epochs: steps_epochs,
            seed: 5,
            eval_every: 0,
            augment: true,
            patches_per_pair: 2,
            lr0: 1e-3,
            ..TrainConfig::default()
        }
    }

    fn tiny_model() -> MstPlusPlus {
        MstPlusPlus::seeded(MstConfig::tiny(4, 1), 23).unwrap()
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = tiny_dataset(2, 8, 4);
        let mut model = tiny_model();
        let before = crate::checkpoint::to_bytes(&model);
        let report = train(&tiny_config(0), &data, None, &mut model).unwrap();
        assert!(report.steps.is_empty());
        assert_eq!(crate::checkpoint::to_bytes(&model), before);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let data = tiny_dataset(2, 8, 4);
        let run = || {
            let mut model = tiny_model();
            let report = train(&tiny_config(3), &data, None, &mut model).unwrap();
            (
                report
                    .steps
                    .iter()
                    .map(|s| s.loss.to_bits())
                    .collect::<Vec<_>>(),
                crate::checkpoint::to_bytes(&model),
            )
        };
        let (hist1, params1) = run();
        let (hist2, params2) = run();
        assert_eq!(hist1, hist2, "bitwise identical loss history");
        assert_eq!(params1, params2, "bitwise identical parameters");
    }

    #[test]
    fn short_run_reduces_loss_and_tracks_best() {
        let data = tiny_dataset(2, 8, 4);
        let mut config = tiny_config(20);
        config.eval_every = 10;
        let mut model = tiny_model();
        let report = train(&config, &data, Some(&data[0]), &mut model).unwrap();
        assert!(report.diverged_at.is_none());
        let first = report.steps.first().unwrap().loss;
        let last = report.steps.last().unwrap().loss;
        assert!(
            last < first,
            "loss should drop on a short overfit run: {first} -> {last}"
        );
        let best = report.best.as_ref().expect("best tracked");
        assert!(best.mrae.is_finite());
        assert!(!report.evals.is_empty());
    }

    #[test]
    fn divergence_keeps_last_good_parameters() {
        let data = tiny_dataset(1, 8, 4);
        let mut config = tiny_config(5);
        config.lr0 = 1e200; // drives parameters to overflow within a step
        config.lr_floor = 0.0;
        let mut model = tiny_model();
        let report = train(&config, &data, None, &mut model).unwrap();
        assert!(report.diverged_at.is_some());
        let mut all_finite = true;
        model.visit(&mut |_, t| all_finite &= t.is_finite());
        assert!(all_finite, "restored parameters are finite");
    }
}
