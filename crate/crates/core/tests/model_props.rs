mod common;

use common::end_to_end_gradient_errors;
use dssinet_core::model::{self, forward, topdown_fuse, BackboneConfig, ModelParams};
use dssinet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, h, w], |_| rng.random_range(0.0..1.0))
}

#[test]
fn shape_contract_at_224() {
    let params = ModelParams::init(
        &BackboneConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let out = forward(&image(224, 224, 1), &params).unwrap();
    assert_eq!(out.density.shape(), &[224, 224]);
    let sides: Vec<&[usize]> = out.side_outputs.iter().map(Tensor::shape).collect();
    assert_eq!(
        sides,
        vec![&[224, 224][..], &[112, 112], &[56, 56], &[28, 28]]
    );
    assert_eq!(out.coarse.shape(), &[14, 14]);
    assert!(out.density.max_abs() < 1e-3);
    assert!(out.side_outputs.iter().all(|s| s.max_abs() < 1e-3));
}

#[test]
fn backbone_is_stored_once() {
    let cfg = BackboneConfig::default();
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let backbone: Vec<&str> = params
        .names()
        .filter(|n| n.starts_with("backbone."))
        .collect();
    // four stages × two convs × (weight, bias), whatever the number of branches
    assert_eq!(backbone.len(), 16);
    let mut unique = backbone.clone();
    unique.sort_unstable();
    unique.dedup();
    assert_eq!(unique.len(), backbone.len());
    assert_eq!(params.names().filter(|n| n.starts_with("sfem")).count(), 16);
    assert_eq!(params.names().filter(|n| n.starts_with("fuse.")).count(), 5);
    assert_eq!(
        params
            .names()
            .filter(|n| n.ends_with(".regress.weight"))
            .count(),
        5
    );
}

#[test]
fn perturbing_a_shared_stage_moves_every_output() {
    let cfg = BackboneConfig {
        init_std: 0.1,
        ..BackboneConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let img = image(32, 32, 5);
    let before = forward(&img, &params).unwrap();
    let mut bumped = params.clone();
    for v in bumped
        .get_mut("backbone.stage2.conv1.weight")
        .unwrap()
        .data_mut()
    {
        *v *= 1.5;
    }
    let after = forward(&img, &bumped).unwrap();
    for (i, (a, b)) in before
        .side_outputs
        .iter()
        .zip(&after.side_outputs)
        .enumerate()
    {
        assert!(
            a.sub(b).unwrap().max_abs() > 1e-9,
            "side output {i} did not move"
        );
    }
    assert!(before.coarse.sub(&after.coarse).unwrap().max_abs() > 1e-9);
}

#[test]
fn forward_is_deterministic() {
    let params = ModelParams::init(
        &BackboneConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let img = image(48, 64, 3);
    let a = forward(&img, &params).unwrap();
    let b = forward(&img, &params).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.density), bits(&b.density));
}

#[test]
fn rejects_sizes_off_the_grid() {
    let params = ModelParams::init(
        &BackboneConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(2),
    )
    .unwrap();
    let err = forward(&image(40, 48, 0), &params).unwrap_err().to_string();
    assert!(err.contains("multiples of 16"), "{err}");
}

fn conv3(map: &[Vec<f64>], k: &[f64]) -> Vec<Vec<f64>> {
    let (h, w) = (map.len() as isize, map[0].len() as isize);
    (0..h)
        .map(|r| {
            (0..w)
                .map(|c| {
                    let mut acc = 0.0;
                    for i in 0..3isize {
                        for j in 0..3isize {
                            let (y, x) = (r + i - 1, c + j - 1);
                            if y >= 0 && x >= 0 && y < h && x < w {
                                acc += k[(i * 3 + j) as usize] * map[y as usize][x as usize];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn up2(map: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (h, w) = (map.len(), map[0].len());
    let tap = |j: usize, n: usize| {
        let s = ((j as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..2 * h)
        .map(|r| {
            let (y0, y1, fy) = tap(r, h);
            (0..2 * w)
                .map(|c| {
                    let (x0, x1, fx) = tap(c, w);
                    let top = map[y0][x0] * (1.0 - fx) + map[y0][x1] * fx;
                    let bot = map[y1][x0] * (1.0 - fx) + map[y1][x1] * fx;
                    top * (1.0 - fy) + bot * fy
                })
                .collect()
        })
        .collect()
}

#[test]
fn fusion_matches_hand_unrolled_recurrence() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut rand_map = |n: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    };
    let sides: Vec<Vec<Vec<f64>>> = (0..4).map(|i| rand_map(32 >> i)).collect();
    let m4 = rand_map(2);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let ws: Vec<Vec<f64>> = (0..5)
        .map(|_| (0..9).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let add = |a: Vec<Vec<f64>>, b: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.into_iter()
            .zip(b)
            .map(|(ra, rb)| ra.into_iter().zip(rb).map(|(x, y)| x + y).collect())
            .collect()
    };
    let m3 = add(conv3(&sides[3], &ws[3]), conv3(&up2(&m4), &ws[4]));
    let m2 = add(conv3(&sides[2], &ws[2]), conv3(&up2(&m3), &ws[3]));
    let m1 = add(conv3(&sides[1], &ws[1]), conv3(&up2(&m2), &ws[2]));
    let m0 = add(conv3(&sides[0], &ws[0]), conv3(&up2(&m1), &ws[1]));

    let t = |m: &Vec<Vec<f64>>| {
        let n = m.len();
        Tensor::new(
            vec![1, n, m[0].len()],
            m.iter().flatten().copied().collect(),
        )
        .unwrap()
    };
    let side_t: Vec<Tensor> = sides.iter().map(t).collect();
    let w_t: Vec<Tensor> = ws
        .iter()
        .map(|k| Tensor::new(vec![1, 1, 3, 3], k.clone()).unwrap())
        .collect();
    let got = topdown_fuse(&side_t, &t(&m4), &w_t).unwrap();
    for (a, b) in got.data().iter().zip(m0.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    for (name, analytic, numeric, rel) in end_to_end_gradient_errors(21) {
        assert!(
            rel < 1e-3,
            "{name}: analytic {analytic} vs numeric {numeric} (relative error {rel})"
        );
    }
}

#[test]
fn count_is_the_sum() {
    assert_eq!(model::count(&Tensor::zeros(&[4, 4])), 0.0);
    let a = Tensor::from_fn(&[3, 5], |i| i as f64 * 0.1);
    let b = Tensor::from_fn(&[3, 5], |i| 1.0 - i as f64 * 0.03);
    let both = a.add(&b).unwrap();
    assert!((model::count(&both) - model::count(&a) - model::count(&b)).abs() < 1e-12);
}
