//! Central finite-difference checks for every differentiable primitive.
//!
//! Composite checks (attention blocks, full stages, the training loss) live
//! in the acceptance suite; these pin each op in isolation at 64-bit
//! precision.

use spectraformer::gradcheck::finite_diff_check;
use spectraformer::tensor::{PadMode, Rng, Tensor};

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rand(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

#[test]
fn fd_matmul() {
    let mut rng = Rng::new(21);
    let a = rand(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand(&mut rng, &[4, 5], -1.0, 1.0);
    let check = finite_diff_check(&[a, b], H, |g, vars| g.matmul(&vars[0], &vars[1])).unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_add_sub_mul_chain() {
    let mut rng = Rng::new(22);
    let a = rand(&mut rng, &[2, 3], -1.0, 1.0);
    let b = rand(&mut rng, &[2, 3], -1.0, 1.0);
    let c = rand(&mut rng, &[2, 3], -1.0, 1.0);
    let check = finite_diff_check(&[a, b, c], H, |g, v| {
        let s = g.add(&v[0], &v[1])?;
        let d = g.sub(&s, &v[2])?;
        g.mul(&d, &v[0])
    })
    .unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_abs_away_from_zero() {
    let mut rng = Rng::new(23);
    // keep inputs off the kink at 0 where |x| is not differentiable
    let n = 12;
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v = rng.uniform(0.2, 1.0);
            if rng.next_f64() < 0.5 {
                -v
            } else {
                v
            }
        })
        .collect();
    let x = Tensor::new(vec![3, 4], data).unwrap();
    let check = finite_diff_check(&[x], H, |g, v| g.abs(&v[0])).unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_scale_by_learnable_scalar() {
    let mut rng = Rng::new(24);
    let x = rand(&mut rng, &[2, 5], -1.0, 1.0);
    let s = Tensor::scalar(0.7);
    let check = finite_diff_check(&[x, s], H, |g, v| g.scale(&v[0], &v[1])).unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_softmax() {
    let mut rng = Rng::new(25);
    let x = rand(&mut rng, &[3, 4], -2.0, 2.0);
    for axis in 0..2 {
        let check =
            finite_diff_check(&[x.clone()], H, |g, v| g.softmax(&v[0], axis)).unwrap();
        assert!(
            check.max_rel_err < TOL,
            "axis {axis} rel err {}",
            check.max_rel_err
        );
    }
}

#[test]
fn fd_gelu() {
    let mut rng = Rng::new(26);
    let x = rand(&mut rng, &[4, 4], -3.0, 3.0);
    let check = finite_diff_check(&[x], H, |g, v| g.gelu(&v[0])).unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_layernorm() {
    let mut rng = Rng::new(27);
    let x = rand(&mut rng, &[2, 3, 6], -1.5, 1.5);
    let gamma = rand(&mut rng, &[6], 0.5, 1.5);
    let beta = rand(&mut rng, &[6], -0.3, 0.3);
    let check = finite_diff_check(&[x, gamma, beta], H, |g, v| {
        g.layernorm(&v[0], &v[1], &v[2])
    })
    .unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_conv2d_plain_strided_grouped() {
    let mut rng = Rng::new(28);
    for &(cin, cout, groups, stride, padding, k) in &[
        (2usize, 3usize, 1usize, 1usize, 1usize, 3usize),
        (4, 4, 4, 1, 1, 3), // depthwise
        (2, 4, 1, 2, 1, 4), // strided downsample
        (3, 2, 1, 1, 0, 1), // pointwise
    ] {
        let x = rand(&mut rng, &[1, cin, 5, 6], -1.0, 1.0);
        let w = rand(&mut rng, &[cout, cin / groups, k, k], -0.8, 0.8);
        let b = rand(&mut rng, &[cout], -0.3, 0.3);
        let check = finite_diff_check(&[x, w, b], H, |g, v| {
            g.conv2d(&v[0], &v[1], Some(&v[2]), stride, padding, groups)
        })
        .unwrap();
        assert!(
            check.max_rel_err < TOL,
            "config ({cin},{cout},{groups},{stride},{padding},{k}) rel err {}",
            check.max_rel_err
        );
    }
}

#[test]
fn fd_deconv2x2() {
    let mut rng = Rng::new(29);
    let x = rand(&mut rng, &[1, 3, 3, 4], -1.0, 1.0);
    let w = rand(&mut rng, &[3, 2, 2, 2], -0.8, 0.8);
    let b = rand(&mut rng, &[2], -0.3, 0.3);
    let check =
        finite_diff_check(&[x, w, b], H, |g, v| g.deconv2x2(&v[0], &v[1], Some(&v[2]))).unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_pad_crop_both_modes() {
    let mut rng = Rng::new(30);
    let x = rand(&mut rng, &[1, 2, 4, 5], -1.0, 1.0);
    for mode in [PadMode::Zero, PadMode::Reflect] {
        let check = finite_diff_check(&[x.clone()], H, move |g, v| {
            let p = g.pad2d(&v[0], [1, 2, 2, 1], mode)?;
            g.crop2d(&p, 5, 6)
        })
        .unwrap();
        assert!(
            check.max_rel_err < TOL,
            "mode {mode:?} rel err {}",
            check.max_rel_err
        );
    }
}

#[test]
fn fd_shape_ops_composite() {
    let mut rng = Rng::new(31);
    let x = rand(&mut rng, &[2, 4, 3], -1.0, 1.0);
    let y = rand(&mut rng, &[2, 2, 3], -1.0, 1.0);
    let check = finite_diff_check(&[x, y], H, |g, v| {
        let p = g.permute(&v[0], &[1, 0, 2])?; // [4,2,3]
        let n = g.narrow(&p, 0, 1, 2)?; // [2,2,3]
        let c = g.concat(1, &[&n, &v[1]])?; // [2,4,3]
        g.reshape(&c, &[4, 6])
    })
    .unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}

#[test]
fn fd_softmax_after_matmul_reuse() {
    // one tensor feeding two paths, checking gradient accumulation through a
    // softmax bottleneck
    let mut rng = Rng::new(32);
    let x = rand(&mut rng, &[3, 3], -1.0, 1.0);
    let check = finite_diff_check(&[x], H, |g, v| {
        let prod = g.matmul(&v[0], &v[0])?;
        let sm = g.softmax(&prod, 0)?;
        g.mul(&sm, &v[0])
    })
    .unwrap();
    assert!(check.max_rel_err < TOL, "rel err {}", check.max_rel_err);
}
