//! Reconstruction quality metrics: MRAE, RMSE, PSNR.
//!
//! All three reduce over every value of the cube (pixels and channels alike)
//! in 64-bit accumulation. MRAE clamps its denominator at [`MRAE_EPS`] so
//! exact zeros in ground truth stay finite; PSNR is capped at 100 dB.

use crate::error::{Error, Result};
use crate::synth::SpectralCube;

/// Denominator clamp for MRAE.
pub const MRAE_EPS: f64 = 1e-6;

/// PSNR ceiling for exact (or near-exact) matches.
pub const PSNR_CAP_DB: f64 = 100.0;

/// One evaluation of all three metrics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mrae: f64,
    pub rmse: f64,
    pub psnr: f64,
    /// Number of values reduced over (H * W * C).
    pub values: usize,
}

impl MetricReport {
    /// `key=value` lines, one metric per line.
    pub fn to_key_values(&self) -> String {
        format!(
            "mrae={:.10}\nrmse={:.10}\npsnr={:.6}\nn={}\n",
            self.mrae, self.rmse, self.psnr, self.values
        )
    }

    /// Single CSV row matching the header `mrae,rmse,psnr,n`.
    pub fn to_csv_row(&self) -> String {
        format!(
            "{:.10},{:.10},{:.6},{}",
            self.mrae, self.rmse, self.psnr, self.values
        )
    }
}

fn check_shapes(op: &'static str, gt: &SpectralCube, pred: &SpectralCube) -> Result<()> {
    if gt.shape() != pred.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: gt.shape().to_vec(),
            rhs: pred.shape().to_vec(),
        });
    }
    Ok(())
}

/// Mean over all values of |gt - pred| / max(gt, eps).
pub fn mrae(gt: &SpectralCube, pred: &SpectralCube) -> Result<f64> {
    check_shapes("mrae", gt, pred)?;
    let mut acc = 0.0;
    for (&g, &p) in gt.values().iter().zip(pred.values()) {
        let (g, p) = (g as f64, p as f64);
        acc += (g - p).abs() / g.max(MRAE_EPS);
    }
    Ok(acc / gt.values().len() as f64)
}

/// Root mean squared error over all values.
pub fn rmse(gt: &SpectralCube, pred: &SpectralCube) -> Result<f64> {
    check_shapes("rmse", gt, pred)?;
    let mut acc = 0.0;
    for (&g, &p) in gt.values().iter().zip(pred.values()) {
        let d = g as f64 - p as f64;
        acc += d * d;
    }
    Ok((acc / gt.values().len() as f64).sqrt())
}

/// Peak signal-to-noise ratio in dB against `peak`, capped at 100 dB.
pub fn psnr(gt: &SpectralCube, pred: &SpectralCube, peak: f64) -> Result<f64> {
    check_shapes("psnr", gt, pred)?;
    let mut acc = 0.0;
    for (&g, &p) in gt.values().iter().zip(pred.values()) {
        let d = g as f64 - p as f64;
        acc += d * d;
    }
    let mse = acc / gt.values().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// All three metrics at peak 1.0 (data normalized to [0, 1]).
pub fn evaluate(gt: &SpectralCube, pred: &SpectralCube) -> Result<MetricReport> {
    Ok(MetricReport {
        mrae: mrae(gt, pred)?,
        rmse: rmse(gt, pred)?,
        psnr: psnr(gt, pred, 1.0)?,
        values: gt.values().len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn cube_from(h: usize, w: usize, c: usize, values: Vec<f32>) -> SpectralCube {
        SpectralCube::from_values(h, w, c, values).unwrap()
    }

    fn random_cube(rng: &mut Rng, h: usize, w: usize, c: usize) -> SpectralCube {
        let values = (0..h * w * c).map(|_| rng.next_f32()).collect();
        cube_from(h, w, c, values)
    }

    #[test]
    fn identical_cubes_score_perfectly() {
        let mut rng = Rng::new(81);
        let cube = random_cube(&mut rng, 4, 5, 3);
        assert_eq!(mrae(&cube, &cube).unwrap(), 0.0);
        assert_eq!(rmse(&cube, &cube).unwrap(), 0.0);
        assert_eq!(psnr(&cube, &cube, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn mrae_scalar_hand_oracle() {
        // gt=[1,2], pred=[1.1,1.8] -> (0.1/1 + 0.2/2) / 2 = 0.1
        let gt = cube_from(1, 2, 1, vec![1.0, 2.0]);
        let pred = cube_from(1, 2, 1, vec![1.1, 1.8]);
        let got = mrae(&gt, &pred).unwrap();
        assert!((got - 0.1).abs() < 1e-7, "got {got}");
    }

    #[test]
    fn mrae_clamps_zero_ground_truth() {
        let gt = cube_from(1, 1, 1, vec![0.0]);
        let pred = cube_from(1, 1, 1, vec![1e-6]);
        let got = mrae(&gt, &pred).unwrap();
        // binary32 storage of 1e-6 wobbles in the ninth digit
        assert!((got - 1.0).abs() < 1e-6, "denominator clamps to eps, got {got}");
    }

    #[test]
    fn rmse_scalar_hand_oracle() {
        // gt=[0,0], pred=[3,4] -> sqrt((9+16)/2)
        let gt = cube_from(1, 2, 1, vec![0.0, 0.0]);
        let pred = cube_from(1, 2, 1, vec![3.0, 4.0]);
        let got = rmse(&gt, &pred).unwrap();
        assert!((got - 12.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_is_symmetric() {
        let mut rng = Rng::new(82);
        let a = random_cube(&mut rng, 3, 3, 4);
        let b = random_cube(&mut rng, 3, 3, 4);
        assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
    }

    #[test]
    fn rmse_bounded_by_max_abs_difference() {
        let mut rng = Rng::new(83);
        let a = random_cube(&mut rng, 4, 4, 2);
        let b = random_cube(&mut rng, 4, 4, 2);
        let bound = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max);
        let got = rmse(&a, &b).unwrap();
        assert!(got >= 0.0 && got <= bound + 1e-12);
    }

    #[test]
    fn psnr_closed_forms() {
        // mse 0.01 at peak 1 -> 20 dB (within binary32 rounding of the inputs)
        let gt = cube_from(1, 1, 1, vec![0.5]);
        let pred = cube_from(1, 1, 1, vec![0.6]);
        let got = psnr(&gt, &pred, 1.0).unwrap();
        assert!((got - 20.0).abs() < 1e-5, "got {got}");

        // uniform offset 0.1 from zero gt -> mse 0.01 -> 20 dB
        let gt = cube_from(2, 2, 2, vec![0.0; 8]);
        let pred = cube_from(2, 2, 2, vec![0.1; 8]);
        let got = psnr(&gt, &pred, 1.0).unwrap();
        assert!((got - 20.0).abs() < 1e-5, "got {got}");
    }

    #[test]
    fn metrics_match_naive_loops_on_random_cubes() {
        let mut rng = Rng::new(84);
        let gt = random_cube(&mut rng, 8, 8, 31);
        let pred = random_cube(&mut rng, 8, 8, 31);
        let n = gt.values().len() as f64;

        let mut mrae_ref = 0.0;
        let mut mse_ref = 0.0;
        for i in 0..gt.values().len() {
            let g = gt.values()[i] as f64;
            let p = pred.values()[i] as f64;
            mrae_ref += (g - p).abs() / g.max(1e-6);
            mse_ref += (g - p) * (g - p);
        }
        mrae_ref /= n;
        let rmse_ref = (mse_ref / n).sqrt();
        let psnr_ref = 10.0 * (1.0 / (mse_ref / n)).log10();

        assert!((mrae(&gt, &pred).unwrap() - mrae_ref).abs() < 1e-12);
        assert!((rmse(&gt, &pred).unwrap() - rmse_ref).abs() < 1e-12);
        assert!((psnr(&gt, &pred, 1.0).unwrap() - psnr_ref).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let mut rng = Rng::new(85);
        let gt = random_cube(&mut rng, 4, 4, 3);
        let pred = random_cube(&mut rng, 4, 4, 3);
        let mut idx: Vec<usize> = (0..gt.values().len()).collect();
        rng.shuffle(&mut idx);
        let gt_p = cube_from(4, 4, 3, idx.iter().map(|&i| gt.values()[i]).collect());
        let pred_p = cube_from(4, 4, 3, idx.iter().map(|&i| pred.values()[i]).collect());
        assert!((mrae(&gt, &pred).unwrap() - mrae(&gt_p, &pred_p).unwrap()).abs() < 1e-12);
        assert!((rmse(&gt, &pred).unwrap() - rmse(&gt_p, &pred_p).unwrap()).abs() < 1e-12);
        assert!(
            (psnr(&gt, &pred, 1.0).unwrap() - psnr(&gt_p, &pred_p, 1.0).unwrap()).abs() < 1e-12
        );
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = cube_from(2, 2, 1, vec![0.0; 4]);
        let b = cube_from(2, 2, 2, vec![0.0; 8]);
        assert!(mrae(&a, &b).is_err());
        assert!(rmse(&a, &b).is_err());
        assert!(psnr(&a, &b, 1.0).is_err());
    }
}
