//! Dilated 2-D convolution via im2col + GEMM, and 1×1 channel mixing.

use std::cell::RefCell;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub mode: PadMode,
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(mode: PadMode, pad: usize) -> Self {
        Self {
            mode,
            top: pad,
            bottom: pad,
            left: pad,
            right: pad,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_height: usize,
    pub kernel_width: usize,
    pub dilation: usize,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvSpec {
    /// Square `k×k` kernel, stride 1, padded so the output keeps the input size.
    pub fn same(k: usize, dilation: usize, mode: PadMode) -> Self {
        Self {
            kernel_height: k,
            kernel_width: k,
            dilation,
            stride: 1,
            padding: Padding::uniform(mode, dilation * (k.saturating_sub(1)) / 2),
        }
    }

    /// Span of one kernel application along an axis: `1 + d·(k−1)`.
    pub fn footprint(&self) -> (usize, usize) {
        (
            1 + self.dilation * (self.kernel_height - 1),
            1 + self.dilation * (self.kernel_width - 1),
        )
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.dilation == 0 {
            return Err(Error::invalid("dilation must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        if self.kernel_height == 0 || self.kernel_width == 0 {
            return Err(Error::invalid("kernel size must be positive"));
        }
        let (fh, fw) = self.footprint();
        let ph = h + self.padding.top + self.padding.bottom;
        let pw = w + self.padding.left + self.padding.right;
        if ph < fh {
            return Err(Error::shape(format!(
                "height: padded input {ph} is smaller than the kernel footprint {fh}"
            )));
        }
        if pw < fw {
            return Err(Error::shape(format!(
                "width: padded input {pw} is smaller than the kernel footprint {fw}"
            )));
        }
        Ok(((ph - fh) / self.stride + 1, (pw - fw) / self.stride + 1))
    }
}

/// Mirror an out-of-range index back into `0..n` without repeating the edge
/// sample (`-1 → 1`, `n → n−2`). Repeats periodically for large overshoots.
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

const NO_SOURCE: usize = usize::MAX;

/// For every kernel tap `t` and output pixel `p`, the source pixel index in
/// one input plane, or `NO_SOURCE` for zero padding.
fn gather_map(spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> Vec<usize> {
    let taps = spec.kernel_height * spec.kernel_width;
    let p = oh * ow;
    let mut map = vec![NO_SOURCE; taps * p];
    let reflect = spec.padding.mode == PadMode::Reflect;
    for ki in 0..spec.kernel_height {
        for kj in 0..spec.kernel_width {
            let t = ki * spec.kernel_width + kj;
            let row = &mut map[t * p..(t + 1) * p];
            for oy in 0..oh {
                let y =
                    (oy * spec.stride + ki * spec.dilation) as isize - spec.padding.top as isize;
                let y = if (0..h as isize).contains(&y) {
                    Some(y as usize)
                } else if reflect {
                    Some(reflect_index(y, h))
                } else {
                    None
                };
                let Some(y) = y else { continue };
                for ox in 0..ow {
                    let x = (ox * spec.stride + kj * spec.dilation) as isize
                        - spec.padding.left as isize;
                    let x = if (0..w as isize).contains(&x) {
                        Some(x as usize)
                    } else if reflect {
                        Some(reflect_index(x, w))
                    } else {
                        None
                    };
                    if let Some(x) = x {
                        row[oy * ow + ox] = y * w + x;
                    }
                }
            }
        }
    }
    map
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel_height == 1
        && spec.kernel_width == 1
        && spec.stride == 1
        && spec.padding.top + spec.padding.bottom + spec.padding.left + spec.padding.right == 0
}

/// How one input plane is spread over the `taps × p` column block.
enum Gather {
    /// Contiguous copies `(tap, out_row, out_col, src, len)`; used for stride 1 with zero padding.
    Runs(Vec<(usize, usize, usize, usize, usize)>),
    /// Per-element source indices from [`gather_map`].
    Map(Vec<usize>),
}

impl Gather {
    fn new(spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> Self {
        if spec.stride != 1 || spec.padding.mode != PadMode::Zero {
            return Gather::Map(gather_map(spec, h, w, oh, ow));
        }
        let (pt, pl) = (spec.padding.top as isize, spec.padding.left as isize);
        let mut runs = Vec::new();
        for ki in 0..spec.kernel_height {
            for kj in 0..spec.kernel_width {
                let t = ki * spec.kernel_width + kj;
                let dx = (kj * spec.dilation) as isize - pl;
                let x0 = (-dx).max(0);
                let x1 = (w as isize - dx).min(ow as isize);
                if x1 <= x0 {
                    continue;
                }
                for oy in 0..oh {
                    let y = (oy + ki * spec.dilation) as isize - pt;
                    if !(0..h as isize).contains(&y) {
                        continue;
                    }
                    let src = y as usize * w + (x0 + dx) as usize;
                    runs.push((t, oy, x0 as usize, src, (x1 - x0) as usize));
                }
            }
        }
        Gather::Runs(runs)
    }

    /// Fills `cols` (`c_in·taps × q`) for output rows `rows`, where `q = rows.len()·ow`.
    #[allow(clippy::too_many_arguments)]
    fn im2col(
        &self,
        input: &[f64],
        c_in: usize,
        hw: usize,
        taps: usize,
        p: usize,
        ow: usize,
        rows: Range<usize>,
        cols: &mut [f64],
    ) {
        let q = rows.len() * ow;
        let q0 = rows.start * ow;
        debug_assert_eq!(cols.len(), c_in * taps * q);
        if let Gather::Runs(_) = self {
            cols.fill(0.0);
        }
        for c in 0..c_in {
            let plane = &input[c * hw..(c + 1) * hw];
            let block = &mut cols[c * taps * q..(c + 1) * taps * q];
            match self {
                Gather::Runs(runs) => {
                    for &(t, oy, x0, src, len) in runs {
                        if rows.contains(&oy) {
                            let dst = t * q + (oy - rows.start) * ow + x0;
                            block[dst..dst + len].copy_from_slice(&plane[src..src + len]);
                        }
                    }
                }
                Gather::Map(map) => {
                    for t in 0..taps {
                        let from = &map[t * p + q0..t * p + q0 + q];
                        for (d, &src) in block[t * q..(t + 1) * q].iter_mut().zip(from) {
                            *d = if src == NO_SOURCE { 0.0 } else { plane[src] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Gather::im2col`]: scatter-adds a column tile back onto the planes.
    #[allow(clippy::too_many_arguments)]
    fn col2im(
        &self,
        cols: &[f64],
        c_in: usize,
        hw: usize,
        taps: usize,
        p: usize,
        ow: usize,
        rows: Range<usize>,
        out: &mut [f64],
    ) {
        let q = rows.len() * ow;
        let q0 = rows.start * ow;
        for c in 0..c_in {
            let plane = &mut out[c * hw..(c + 1) * hw];
            let block = &cols[c * taps * q..(c + 1) * taps * q];
            match self {
                Gather::Runs(runs) => {
                    for &(t, oy, x0, src, len) in runs {
                        if rows.contains(&oy) {
                            let at = t * q + (oy - rows.start) * ow + x0;
                            for (o, &g) in
                                plane[src..src + len].iter_mut().zip(&block[at..at + len])
                            {
                                *o += g;
                            }
                        }
                    }
                }
                Gather::Map(map) => {
                    for t in 0..taps {
                        let from = &map[t * p + q0..t * p + q0 + q];
                        for (&g, &idx) in block[t * q..(t + 1) * q].iter().zip(from) {
                            if idx != NO_SOURCE {
                                plane[idx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-tile budget in elements; tiles hold whole output rows.
const TILE_ELEMS: usize = 1 << 15;
/// Narrowest tile worth a separate GEMM call.
const MIN_TILE_COLS: usize = 512;

fn tile_rows(k: usize, ow: usize, oh: usize) -> usize {
    let ow = ow.max(1);
    (TILE_ELEMS / (k * ow).max(1))
        .max(MIN_TILE_COLS.div_ceil(ow))
        .clamp(1, oh.max(1))
}

/// `C = A·B + beta·C` with explicit row/column strides; `c` is row-major with leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, cc: usize| (r - 1) * rs + (cc - 1) * cs;
    if k > 0 {
        assert!(last(rsa, csa, m, k) < a.len());
        assert!(last(rsb, csb, k, n) < b.len());
    }
    assert!(last(ldc, 1, m, n) < c.len());
    // SAFETY: the asserts bound the furthest element touched in each buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reused per-thread buffer of `len` elements (contents unspecified).
fn with_scratch<R>(len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// Dense matrix product `C = A·B + beta·C` on row-major buffers, where `A` is
/// `m×k` (or its transpose when `a_t`) and `B` is `k×n` (or transposed).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the chosen strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv_shapes(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let [c_out, wc_in, kh, kw] = weights.shape()[..] else {
        return Err(Error::shape(format!(
            "weights must be [C_out, C_in, kh, kw], got {:?}",
            weights.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "C_in: weights expect {wc_in} input channels, input has {c_in}"
        )));
    }
    if kh != spec.kernel_height {
        return Err(Error::shape(format!(
            "kernel_height: weights have {kh}, spec says {}",
            spec.kernel_height
        )));
    }
    if kw != spec.kernel_width {
        return Err(Error::shape(format!(
            "kernel_width: weights have {kw}, spec says {}",
            spec.kernel_width
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::shape(format!(
                "C_out: bias has shape {:?}, expected [{c_out}]",
                b.shape()
            )));
        }
    }
    let (oh, ow) = spec.output_size(h, w)?;
    Ok((c_in, h, w, c_out, oh, ow))
}

/// `out[c, p] = bias[c] + Σ_{c_in, o} weights[c, c_in, o] · input[c_in, p·stride + dilation·o − pad]`.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let (c_in, h, w, c_out, oh, ow) = check_conv_shapes(input, weights, bias, spec)?;
    let taps = spec.kernel_height * spec.kernel_width;
    let p = oh * ow;
    let mut out = vec![0.0; c_out * p];
    if let Some(b) = bias {
        for (co, &bv) in b.data().iter().enumerate() {
            out[co * p..(co + 1) * p].fill(bv);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if is_pointwise(spec) {
        gemm(
            c_out,
            c_in,
            p,
            weights.data(),
            false,
            input.data(),
            false,
            beta,
            &mut out,
        );
    } else {
        let gather = Gather::new(spec, h, w, oh, ow);
        let k = c_in * taps;
        let step = tile_rows(k, ow, oh);
        for r0 in (0..oh).step_by(step) {
            let rows = r0..(r0 + step).min(oh);
            let q = rows.len() * ow;
            with_scratch(k * q, |cols| {
                gather.im2col(input.data(), c_in, h * w, taps, p, ow, rows.clone(), cols);
                let c = &mut out[r0 * ow..];
                gemm_strided(
                    c_out,
                    k,
                    q,
                    weights.data(),
                    (k, 1),
                    cols,
                    (q, 1),
                    beta,
                    c,
                    p,
                );
            });
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias given the
/// gradient of its output.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (gi, gw, gb) = conv2d_backward_parts(input, weights, spec, grad_out, true)?;
    Ok((gi.expect("requested"), gw, gb))
}

/// As [`conv2d_backward`], skipping the input gradient unless `need_input`.
pub(crate) fn conv2d_backward_parts(
    input: &Tensor,
    weights: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (c_in, h, w, c_out, oh, ow) = check_conv_shapes(input, weights, None, spec)?;
    if grad_out.shape() != [c_out, oh, ow] {
        return Err(Error::shape(format!(
            "gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, oh, ow]
        )));
    }
    let taps = spec.kernel_height * spec.kernel_width;
    let p = oh * ow;
    let k = c_in * taps;
    let g = grad_out.data();

    let grad_bias: Vec<f64> = (0..c_out)
        .map(|co| g[co * p..(co + 1) * p].iter().sum())
        .collect();

    let mut grad_w = vec![0.0; c_out * k];
    let mut grad_in = if need_input {
        vec![0.0; c_in * h * w]
    } else {
        Vec::new()
    };
    if is_pointwise(spec) {
        gemm(c_out, p, k, g, false, input.data(), true, 0.0, &mut grad_w);
        if need_input {
            gemm(
                k,
                c_out,
                p,
                weights.data(),
                true,
                g,
                false,
                0.0,
                &mut grad_in,
            );
        }
    } else {
        let gather = Gather::new(spec, h, w, oh, ow);
        let step = tile_rows(k, ow, oh);
        for r0 in (0..oh).step_by(step) {
            let rows = r0..(r0 + step).min(oh);
            let q = rows.len() * ow;
            let g_tile = &g[r0 * ow..];
            with_scratch(k * q, |cols| {
                gather.im2col(input.data(), c_in, h * w, taps, p, ow, rows.clone(), cols);
                // grad_w += g_tile · colsᵀ
                gemm_strided(
                    c_out,
                    q,
                    k,
                    g_tile,
                    (p, 1),
                    cols,
                    (1, q),
                    1.0,
                    &mut grad_w,
                    k,
                );
                if need_input {
                    // cols = weightsᵀ · g_tile
                    gemm_strided(
                        k,
                        c_out,
                        q,
                        weights.data(),
                        (1, k),
                        g_tile,
                        (p, 1),
                        0.0,
                        cols,
                        q,
                    );
                    gather.col2im(cols, c_in, h * w, taps, p, ow, rows.clone(), &mut grad_in);
                }
            });
        }
    }
    Ok((
        need_input
            .then(|| Tensor::new(vec![c_in, h, w], grad_in))
            .transpose()?,
        Tensor::new(weights.shape().to_vec(), grad_w)?,
        Tensor::new(vec![c_out], grad_bias)?,
    ))
}

fn check_mix_shapes(weight: &Tensor, input: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let [c_out, wc_in] = weight.shape()[..] else {
        return Err(Error::shape(format!(
            "mixing weight must be [C_out, C_in], got {:?}",
            weight.shape()
        )));
    };
    if wc_in != c_in {
        return Err(Error::shape(format!(
            "C_in: mixing weight expects {wc_in} channels, feature has {c_in}"
        )));
    }
    Ok((c_out, c_in, h, w))
}

/// Bias-free 1×1 convolution: `out[:, p] = weight · input[:, p]` at every pixel.
pub fn channel_mix(weight: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (c_out, c_in, h, w) = check_mix_shapes(weight, input)?;
    let mut out = vec![0.0; c_out * h * w];
    gemm(
        c_out,
        c_in,
        h * w,
        weight.data(),
        false,
        input.data(),
        false,
        0.0,
        &mut out,
    );
    Tensor::new(vec![c_out, h, w], out)
}

/// Returns `(grad_input, grad_weight)` for [`channel_mix`].
pub fn channel_mix_backward(
    weight: &Tensor,
    input: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c_out, c_in, h, w) = check_mix_shapes(weight, input)?;
    if grad_out.shape() != [c_out, h, w] {
        return Err(Error::shape(format!(
            "gradient has shape {:?}, expected {:?}",
            grad_out.shape(),
            [c_out, h, w]
        )));
    }
    let p = h * w;
    let mut gi = vec![0.0; c_in * p];
    let mut gw = vec![0.0; c_out * c_in];
    gemm(
        c_in,
        c_out,
        p,
        weight.data(),
        true,
        grad_out.data(),
        false,
        0.0,
        &mut gi,
    );
    gemm(
        c_out,
        p,
        c_in,
        grad_out.data(),
        false,
        input.data(),
        true,
        0.0,
        &mut gw,
    );
    Ok((
        Tensor::new(vec![c_in, h, w], gi)?,
        Tensor::new(vec![c_out, c_in], gw)?,
    ))
}
