//! Bilinear resampling (half-pixel centres, edge clamping) and 2×2 max pooling.

use super::Tensor;
use crate::error::{Error, Result};

/// Per output index: the two source taps and the weight of the second one.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let src = ((j as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn check_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "cannot resample empty input {:?}",
            input.shape()
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid(format!(
            "cannot resample to {out_h}x{out_w}"
        )));
    }
    Ok((c, h, w))
}

/// Bilinear resampling of a `[C, H, W]` tensor to `[C, out_h, out_w]`.
///
/// Output index `j` reads source coordinate `(j + 0.5)·(in/out) − 0.5`,
/// clamped to the valid range.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = check_resize(input, out_h, out_w)?;
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Adjoint of [`resize_bilinear`]: scatters `grad_out` back onto the input grid.
pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [c, h, w] = input_shape[..] else {
        return Err(Error::shape(format!(
            "expected [C, H, W], got {input_shape:?}"
        )));
    };
    let (gc, out_h, out_w) = grad_out.dims3()?;
    if gc != c {
        return Err(Error::shape(format!(
            "channels: gradient has {gc}, input has {c}"
        )));
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let g = grad_out.data();
    let mut gin = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &mut gin[ch * h * w..(ch + 1) * h * w];
        let gp = &g[ch * out_h * out_w..(ch + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = gp[oy * out_w + ox];
                plane[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                plane[y0 * w + x1] += v * (1.0 - fy) * fx;
                plane[y1 * w + x0] += v * fy * (1.0 - fx);
                plane[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(vec![c, h, w], gin)
}

/// Doubles the spatial size of a `[C, H, W]` tensor by bilinear interpolation.
pub fn bilinear_upsample_x2(input: &Tensor) -> Result<Tensor> {
    let (_, h, w) = input.dims3()?;
    resize_bilinear(input, 2 * h, 2 * w)
}

/// Flat input index of the maximum feeding each pooled output.
#[derive(Clone, Debug)]
pub struct MaxPoolIndices(pub Vec<usize>);

/// 2×2 max pooling with stride 2. Height and width must be even.
pub fn max_pool2(input: &Tensor) -> Result<(Tensor, MaxPoolIndices)> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "max_pool2 needs even H and W, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[i] > src[best] {
                        best = i;
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, MaxPoolIndices(arg)))
}

pub fn max_pool2_backward(
    input_shape: &[usize],
    indices: &MaxPoolIndices,
    grad_out: &Tensor,
) -> Result<Tensor> {
    if indices.0.len() != grad_out.numel() {
        return Err(Error::shape(
            "max-pool gradient does not match recorded indices",
        ));
    }
    let mut gin = Tensor::zeros(input_shape);
    let data = gin.data_mut();
    for (&i, &g) in indices.0.iter().zip(grad_out.data()) {
        data[i] += g;
    }
    Ok(gin)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Per-pixel evaluation of the half-pixel convention, written independently.
    fn sample(plane: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
        let cy = sy.max(0.0).min((h - 1) as f64);
        let cx = sx.max(0.0).min((w - 1) as f64);
        let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (cy - y0 as f64, cx - x0 as f64);
        let at = |y: usize, x: usize| plane[y * w + x];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
            + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn constants_stay_constant() {
        let x = Tensor::full(&[2, 3, 5], 4.5);
        let y = bilinear_upsample_x2(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6, 10]);
        assert!(y.data().iter().all(|&v| v == 4.5));
    }

    #[test]
    fn single_sample_fills_the_output() {
        let x = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let y = bilinear_upsample_x2(&x).unwrap();
        assert_eq!(y.data(), &[3.0; 4]);
    }

    #[test]
    fn two_samples_follow_the_coordinate_formula() {
        let (a, b) = (1.0, 5.0);
        let x = Tensor::new(vec![1, 1, 2], vec![a, b]).unwrap();
        let y = bilinear_upsample_x2(&x).unwrap();
        let expect: Vec<f64> = (0..4)
            .map(|j| sample(&[a, b], 1, 2, -0.25, (j as f64 + 0.5) / 2.0 - 0.5))
            .collect();
        assert_eq!(y.shape(), &[1, 2, 4]);
        // source x = −0.25, 0.25, 0.75, 1.25 → a, 0.75a+0.25b, 0.25a+0.75b, b
        assert_eq!(&expect, &[1.0, 2.0, 4.0, 5.0]);
        for row in 0..2 {
            for j in 0..4 {
                assert!((y.at3(0, row, j) - expect[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn upsample_stays_within_input_range() {
        let x = Tensor::from_fn(&[1, 4, 3], |i| ((i * 7919) % 13) as f64 - 6.0);
        let (lo, hi) = x.min_max();
        let y = bilinear_upsample_x2(&x).unwrap();
        let (ylo, yhi) = y.min_max();
        assert!(ylo >= lo && yhi <= hi);
    }

    #[test]
    fn downsample_by_half_averages_pairs() {
        let x = Tensor::from_fn(&[1, 4, 4], |i| i as f64);
        let y = resize_bilinear(&x, 2, 2).unwrap();
        for oy in 0..2 {
            for ox in 0..2 {
                let expect = sample(x.data(), 4, 4, 2.0 * oy as f64 + 0.5, 2.0 * ox as f64 + 0.5);
                assert!((y.at3(0, oy, ox) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn resize_backward_is_adjoint() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| (i as f64 * 0.37).sin());
        let g = Tensor::from_fn(&[2, 7, 4], |i| (i as f64 * 0.11).cos());
        let y = resize_bilinear(&x, 7, 4).unwrap();
        let gx = resize_bilinear_backward(x.shape(), &g).unwrap();
        let dot = |a: &Tensor, b: &Tensor| {
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| p * q)
                .sum::<f64>()
        };
        assert!((dot(&y, &g) - dot(&x, &gx)).abs() < 1e-12);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(bilinear_upsample_x2(&Tensor::zeros(&[1, 0, 3])).is_err());
    }

    #[test]
    fn max_pool_picks_maxima() {
        let x = Tensor::new(
            vec![1, 2, 4],
            vec![1.0, 5.0, -1.0, -2.0, 3.0, 2.0, -3.0, -0.5],
        )
        .unwrap();
        let (y, idx) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[5.0, -0.5]);
        let g = Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap();
        let gx = max_pool2_backward(x.shape(), &idx, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        assert!(max_pool2(&Tensor::zeros(&[1, 3, 4])).is_err());
    }
}
