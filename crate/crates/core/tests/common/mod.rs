//! Independent oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use dssinet_core::dms_ssim::{dms_ssim_loss, DmsSsimConfig};
use dssinet_core::{FeatureGroup, SfemParams, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn mirror(i: isize, n: usize) -> usize {
    // -1 -> 1, n -> n-2
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

pub fn gaussian(size: usize, std: f64) -> Vec<Vec<f64>> {
    let r = (size / 2) as isize;
    let mut w = vec![vec![0.0; size]; size];
    let mut total = 0.0;
    for dy in -r..=r {
        for dx in -r..=r {
            let v = (-((dy * dy + dx * dx) as f64) / (2.0 * std * std)).exp();
            w[(dy + r) as usize][(dx + r) as usize] = v;
            total += v;
        }
    }
    for row in &mut w {
        for v in row {
            *v /= total;
        }
    }
    w
}

/// Straight transcription: local moments by explicit deviation sums,
/// separate L, C and S factors, per-scale mean, floored product.
pub fn oracle(x0: &[Vec<f64>], y0: &[Vec<f64>], cfg: &DmsSsimConfig) -> f64 {
    let (h, w) = (x0.len(), x0[0].len());
    let win = gaussian(cfg.window_size, cfg.window_std);
    let r = (cfg.window_size / 2) as isize;
    let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
    let mut dms = 1.0;
    for (i, &d) in cfg.dilations.iter().enumerate() {
        let d = d as isize;
        let at = |m: &Vec<Vec<f64>>, py: usize, px: usize, oy: isize, ox: isize| {
            m[mirror(py as isize + d * oy, h)][mirror(px as isize + d * ox, w)]
        };
        let mut mx = vec![vec![0.0; w]; h];
        let mut my = vec![vec![0.0; w]; h];
        let mut total = 0.0;
        for py in 0..h {
            for px in 0..w {
                let (mut ux, mut uy) = (0.0, 0.0);
                for oy in -r..=r {
                    for ox in -r..=r {
                        let wt = win[(oy + r) as usize][(ox + r) as usize];
                        ux += wt * at(&x, py, px, oy, ox);
                        uy += wt * at(&y, py, px, oy, ox);
                    }
                }
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for oy in -r..=r {
                    for ox in -r..=r {
                        let wt = win[(oy + r) as usize][(ox + r) as usize];
                        let a = at(&x, py, px, oy, ox) - ux;
                        let b = at(&y, py, px, oy, ox) - uy;
                        vx += wt * a * a;
                        vy += wt * b * b;
                        cxy += wt * a * b;
                    }
                }
                let (sx, sy) = (vx.sqrt(), vy.sqrt());
                let l = (2.0 * ux * uy + cfg.c1) / (ux * ux + uy * uy + cfg.c1);
                let c = (2.0 * sx * sy + cfg.c2) / (vx + vy + cfg.c2);
                let s = (cxy + cfg.c3) / (sx * sy + cfg.c3);
                total += l * c * s;
                mx[py][px] = ux;
                my[py][px] = uy;
            }
        }
        let ssim = (total / (h * w) as f64).max(1e-6);
        dms *= ssim.powf(cfg.alphas[i]);
        x = mx;
        y = my;
    }
    1.0 - dms
}

pub fn random_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..h)
        .map(|_| (0..w).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect()
}

/// Smooth, positive, density-like map with some fine texture.
pub fn blobby_map(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random_range(0.0..h as f64),
                rng.random_range(0.0..w as f64),
                rng.random_range(1.5..8.0),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    (0..h)
        .map(|r| {
            (0..w)
                .map(|c| {
                    let base: f64 = blobs
                        .iter()
                        .map(|&(by, bx, s, a)| {
                            let d2 = (r as f64 - by).powi(2) + (c as f64 - bx).powi(2);
                            a * (-d2 / (2.0 * s * s)).exp()
                        })
                        .sum();
                    base + 0.05 * rng.random_range(0.0..1.0)
                })
                .collect()
        })
        .collect()
}

pub fn to_tensor(m: &[Vec<f64>]) -> Tensor {
    let (h, w) = (m.len(), m[0].len());
    Tensor::new(vec![h, w], m.iter().flatten().copied().collect()).unwrap()
}

pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    let floor = 1e-6 * scale;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

pub fn central_differences(x: &Tensor, y: &Tensor, cfg: &DmsSsimConfig, h: f64) -> Tensor {
    Tensor::from_fn(x.shape(), |k| {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let lp = dms_ssim_loss(&xp, y, cfg).unwrap().loss;
        let lm = dms_ssim_loss(&xm, y, cfg).unwrap().loss;
        (lp - lm) / (2.0 * h)
    })
}

pub fn random_group(channels: &[usize], h: usize, w: usize, rng: &mut ChaCha8Rng) -> FeatureGroup {
    FeatureGroup::new(
        channels
            .iter()
            .map(|&c| Tensor::from_fn(&[c, h, w], |_| rng.random_range(-1.0..1.0)))
            .collect(),
    )
    .unwrap()
}

/// Synchronous updates written per pixel with plain vectors.
pub fn per_pixel(group: &FeatureGroup, params: &SfemParams) -> Vec<Vec<f64>> {
    let f: Vec<&[f64]> = group.features().iter().map(|t| t.data()).collect();
    let ch = group.channels();
    let (h, w) = {
        let s = group.features()[0].shape();
        (s[1], s[2])
    };
    let p = h * w;
    let mut cur: Vec<Vec<f64>> = f.iter().map(|v| v.to_vec()).collect();
    for _ in 0..params.n_iter {
        let mut next = cur.clone();
        for i in 0..ch.len() {
            for px in 0..p {
                for a in 0..ch[i] {
                    let mut v = f[i][a * p + px];
                    for j in 0..ch.len() {
                        if j == i {
                            continue;
                        }
                        let wij = params.weight(i, j).unwrap();
                        for b in 0..ch[j] {
                            v += wij.data()[a * ch[j] + b] * cur[j][b * p + px];
                        }
                    }
                    next[i][a * p + px] = v;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Points whose `3σ` windows stay inside a `w×h` canvas under the default spreads.
pub fn interior_points(n: usize, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
    // σ ≤ 15 for any configuration, so a 46-pixel margin always suffices
    let m = 46.0;
    (0..n)
        .map(|_| {
            [
                rng.random_range(m..w as f64 - m),
                rng.random_range(m..h as f64 - m),
            ]
        })
        .collect()
}

/// Relative errors of the training-path gradient against central differences
/// for ten sampled model parameters on a 32×32 crop.
pub fn end_to_end_gradient_errors(seed: u64) -> Vec<(String, f64, f64, f64)> {
    use dssinet_core::model::{forward, ModelParams};
    use dssinet_core::train::{sample_loss_and_grads, LossConfig};
    use dssinet_core::BackboneConfig;
    use rand::SeedableRng;

    let cfg = BackboneConfig {
        init_std: 0.05,
        ..BackboneConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg, &mut rng).unwrap();
    let img = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
    let target = Tensor::from_fn(&[32, 32], |_| rng.random_range(0.0..0.02));
    let loss = LossConfig::default();
    let (_, grads) = sample_loss_and_grads(&params, &loss, &img, &target).unwrap();
    let value = |p: &ModelParams| {
        loss.loss_and_grad(&forward(&img, p).unwrap().density, &target)
            .unwrap()
            .0
    };

    // one parameter from each family, the rest at random
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    let mut picks: Vec<String> = [
        "fuse.w0",
        "head0.regress.weight",
        "head2.reduce.bias",
        "sfem1.w_2_0",
        "backbone.stage1.conv1.weight",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    while picks.len() < 10 {
        picks.push(names[rng.random_range(0..names.len())].clone());
    }
    let h = 1e-6;
    let mut rows = Vec::new();
    for name in picks {
        let k = rng.random_range(0..params.get(&name).unwrap().numel());
        let mut plus = params.clone();
        plus.get_mut(&name).unwrap().data_mut()[k] += h;
        let mut minus = params.clone();
        minus.get_mut(&name).unwrap().data_mut()[k] -= h;
        let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
        rows.push((
            format!("{name}[{k}]"),
            grads[name.as_str()].data()[k],
            numeric,
            0.0,
        ));
    }
    let scale = rows
        .iter()
        .fold(0.0f64, |m, r| m.max(r.1.abs()).max(r.2.abs()));
    for r in &mut rows {
        r.3 = (r.1 - r.2).abs() / r.1.abs().max(r.2.abs()).max(1e-6 * scale);
    }
    rows
}
