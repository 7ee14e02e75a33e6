//! DMS-SSIM against a direct nested-loop evaluation, plus finite-difference
//! checks of the analytic gradient.

mod common;

use common::*;

use dssinet_core::dms_ssim::{dms_ssim_grad, dms_ssim_loss, receptive_fields, DmsSsimConfig};
use dssinet_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn receptive_field_table() {
    assert_eq!(
        receptive_fields(5, &[1, 2, 3, 6, 9]),
        vec![5, 13, 25, 49, 85]
    );
    assert_eq!(
        receptive_fields(5, &[1, 1, 1, 1, 1]),
        vec![5, 9, 13, 17, 21]
    );
}

#[test]
fn loss_matches_nested_loop_oracle_on_96x96() {
    let cfg = DmsSsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..20 {
        let (x, y) = if trial % 2 == 0 {
            (random_map(96, 96, &mut rng), random_map(96, 96, &mut rng))
        } else {
            (blobby_map(96, 96, &mut rng), blobby_map(96, 96, &mut rng))
        };
        let expect = oracle(&x, &y, &cfg);
        let got = dms_ssim_loss(&to_tensor(&x), &to_tensor(&y), &cfg)
            .unwrap()
            .loss;
        assert!(
            (got - expect).abs() < 1e-9,
            "trial {trial}: {got} vs {expect}"
        );
    }
}

#[test]
fn general_c3_matches_oracle() {
    let cfg = DmsSsimConfig {
        c3: 3e-4,
        ..DmsSsimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = (blobby_map(40, 48, &mut rng), blobby_map(40, 48, &mut rng));
    let got = dms_ssim_loss(&to_tensor(&x), &to_tensor(&y), &cfg)
        .unwrap()
        .loss;
    assert!((got - oracle(&x, &y, &cfg)).abs() < 1e-9);
}

/// With one scale the loss reduces to 1 − mean SSIM in Wang's combined form.
#[test]
fn single_scale_is_plain_ssim() {
    let cfg = DmsSsimConfig {
        m: 1,
        dilations: vec![1],
        alphas: vec![1.0],
        ..DmsSsimConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (x, y) = (blobby_map(24, 30, &mut rng), blobby_map(24, 30, &mut rng));
    let (h, w) = (24usize, 30usize);
    let win = gaussian(5, 1.0);
    let mut total = 0.0;
    for py in 0..h {
        for px in 0..w {
            let (mut ux, mut uy, mut exx, mut eyy, mut exy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for oy in -2isize..=2 {
                for ox in -2isize..=2 {
                    let wt = win[(oy + 2) as usize][(ox + 2) as usize];
                    let a = x[mirror(py as isize + oy, h)][mirror(px as isize + ox, w)];
                    let b = y[mirror(py as isize + oy, h)][mirror(px as isize + ox, w)];
                    ux += wt * a;
                    uy += wt * b;
                    exx += wt * a * a;
                    eyy += wt * b * b;
                    exy += wt * a * b;
                }
            }
            let (vx, vy, cxy) = (exx - ux * ux, eyy - uy * uy, exy - ux * uy);
            let (c1, c2) = (cfg.c1, cfg.c2);
            total += (2.0 * ux * uy + c1) * (2.0 * cxy + c2)
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
    }
    let expect = 1.0 - total / (h * w) as f64;
    let out = dms_ssim_loss(&to_tensor(&x), &to_tensor(&y), &cfg).unwrap();
    assert!(
        (out.loss - expect).abs() < 1e-10,
        "{} vs {expect}",
        out.loss
    );
    assert_eq!(out.per_scale.len(), 1);
}

#[test]
fn symmetric_and_zero_on_identical_maps() {
    let cfg = DmsSsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..20 {
        let x = to_tensor(&random_map(96, 96, &mut rng));
        let y = to_tensor(&blobby_map(96, 96, &mut rng));
        let a = dms_ssim_loss(&x, &y, &cfg).unwrap().loss;
        let b = dms_ssim_loss(&y, &x, &cfg).unwrap().loss;
        assert!((a - b).abs() < 1e-9);
        assert!(dms_ssim_loss(&x, &x, &cfg).unwrap().loss.abs() < 1e-9);
    }
}

#[test]
fn five_scales_reported() {
    let x = Tensor::full(&[32, 32], 0.2);
    let out = dms_ssim_loss(&x, &x, &DmsSsimConfig::default()).unwrap();
    assert_eq!(out.per_scale.len(), 5);
    assert!(out.per_scale.iter().all(|&s| (s - 1.0).abs() < 1e-12));
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let cfg = DmsSsimConfig::default();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = to_tensor(&random_map(32, 32, &mut rng));
        let y = to_tensor(&random_map(32, 32, &mut rng));
        let g = dms_ssim_grad(&x, &y, &cfg).unwrap();
        let err = relative_error(&g, &central_differences(&x, &y, &cfg, 1e-5));
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn gradient_on_smooth_maps() {
    // Smooth pairs give gradients down near 1e-10, below what a 1e-5 step
    // resolves, so allow the difference quotient its own rounding error.
    let cfg = DmsSsimConfig::default();
    let h = 1e-5;
    for seed in 0..6u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let x = to_tensor(&blobby_map(32, 32, &mut rng));
        let y = to_tensor(&blobby_map(32, 32, &mut rng));
        let g = dms_ssim_grad(&x, &y, &cfg).unwrap();
        let fd = central_differences(&x, &y, &cfg, h);
        let noise = 64.0 * f64::EPSILON / h;
        for (k, (a, b)) in g.data().iter().zip(fd.data()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-4 * a.abs().max(b.abs()) + noise,
                "seed {seed}, pixel {k}: {a} vs {b}"
            );
        }
    }
}

#[test]
fn gradient_of_other_sizes() {
    let cfg = DmsSsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (hh, ww) in [(20, 27), (48, 33)] {
        let x = to_tensor(&blobby_map(hh, ww, &mut rng));
        let y = to_tensor(&blobby_map(hh, ww, &mut rng));
        let g = dms_ssim_grad(&x, &y, &cfg).unwrap();
        for k in [0, 7, hh * ww / 2, hh * ww - 1] {
            let mut xp = x.clone();
            xp.data_mut()[k] += 1e-5;
            let mut xm = x.clone();
            xm.data_mut()[k] -= 1e-5;
            let fd = (dms_ssim_loss(&xp, &y, &cfg).unwrap().loss
                - dms_ssim_loss(&xm, &y, &cfg).unwrap().loss)
                / 2e-5;
            let scale = g.max_abs();
            assert!(
                (fd - g.data()[k]).abs()
                    <= 1e-4 * fd.abs().max(g.data()[k].abs()).max(1e-6 * scale)
            );
        }
    }
}

fn gaussian_blob(n: usize, sigma: f64, count: f64) -> Tensor {
    let c = n as f64 / 2.0;
    let z = 2.0 * std::f64::consts::PI * sigma * sigma;
    Tensor::from_fn(&[n, n], |k| {
        let (r, col) = ((k / n) as f64, (k % n) as f64);
        count / z * (-((r - c).powi(2) + (col - c).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

#[test]
fn dilation_penalizes_a_large_smooth_miscount() {
    // one wide blob, estimated at 60% of its true count
    let truth = gaussian_blob(96, 12.0, 20.0);
    let estimate = gaussian_blob(96, 12.0, 12.0);
    let dilated = dms_ssim_loss(&estimate, &truth, &DmsSsimConfig::default())
        .unwrap()
        .loss;
    let plain_cfg = DmsSsimConfig {
        dilations: vec![1; 5],
        ..DmsSsimConfig::default()
    };
    let plain = dms_ssim_loss(&estimate, &truth, &plain_cfg).unwrap().loss;
    assert!(dilated > plain, "dilated {dilated} vs undilated {plain}");
}
