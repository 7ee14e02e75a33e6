//! Dilated multiscale structural similarity (DMS-SSIM) and its gradient.
//!
//! A fixed, normalized Gaussian window is applied repeatedly with growing
//! dilation. Filtering the map at scale `i` with dilation `r[i]` yields its
//! local mean, which is also the map for scale `i + 1`:
//!
//! ```text
//! X[i+1](p) = Σ_o w(o) · X[i](p + r[i]·o)
//! ```
//!
//! Local variance and covariance at scale `i` use the same window and
//! dilation. Each scale contributes `mean_p(L·C·S)`; the scales combine as
//! `Π SSIM_i^α_i` and the loss is one minus that product. All local
//! statistics use reflect padding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::conv::reflect_index;
use crate::tensor::{ConvSpec, PadMode, Tensor};

/// Per-scale SSIM values at or below this are clamped before exponentiation.
pub const SSIM_FLOOR: f64 = 1e-6;

/// Normalized square Gaussian window.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianWindow {
    size: usize,
    std: f64,
    weights: Vec<f64>,
}

impl GaussianWindow {
    pub fn new(size: usize, std: f64) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!(
                "window size must be odd and positive, got {size}"
            )));
        }
        if !(std > 0.0 && std.is_finite()) {
            return Err(Error::invalid(format!(
                "window std must be positive, got {std}"
            )));
        }
        let half = (size / 2) as f64;
        let mut weights: Vec<f64> = (0..size * size)
            .map(|i| {
                let dy = (i / size) as f64 - half;
                let dx = (i % size) as f64 - half;
                (-(dx * dx + dy * dy) / (2.0 * std * std)).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { size, std, weights })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn std(&self) -> f64 {
        self.std
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    /// Row-major `size × size` weights.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weight at offset `(dy, dx)` from the centre.
    pub fn weight(&self, dy: isize, dx: isize) -> f64 {
        let r = self.radius() as isize;
        self.weights[((dy + r) * self.size as isize + dx + r) as usize]
    }

    pub fn kernel(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.size, self.size], self.weights.clone()).expect("size² weights")
    }

    fn spec(&self, dilation: usize) -> ConvSpec {
        ConvSpec::same(self.size, dilation, PadMode::Reflect)
    }
}

/// Canonical five-scale MS-SSIM exponents, normalized to sum to one.
pub fn ms_ssim_alphas() -> Vec<f64> {
    let raw = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let s: f64 = raw.iter().sum();
    raw.iter().map(|a| a / s).collect()
}

fn default_window_size() -> usize {
    5
}

fn default_window_std() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DmsSsimConfig {
    pub m: usize,
    pub dilations: Vec<usize>,
    pub alphas: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    #[serde(default = "default_window_size")]
    pub window_size: usize,
    #[serde(default = "default_window_std")]
    pub window_std: f64,
}

impl Default for DmsSsimConfig {
    fn default() -> Self {
        Self {
            m: 5,
            dilations: vec![1, 2, 3, 6, 9],
            alphas: ms_ssim_alphas(),
            c1: 1e-4,
            c2: 9e-4,
            c3: 9e-4 / 2.0,
            window_size: 5,
            window_std: 1.0,
        }
    }
}

impl DmsSsimConfig {
    /// Default constants with equal weight on every scale.
    pub fn uniform(dilations: Vec<usize>) -> Self {
        let m = dilations.len();
        Self {
            m,
            dilations,
            alphas: vec![1.0 / m as f64; m],
            ..Self::default()
        }
    }

    /// The default schedule with every dilation set to one (plain MS-SSIM-style stacking).
    pub fn undilated() -> Self {
        Self {
            dilations: vec![1; 5],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("m must be at least 1"));
        }
        if self.dilations.len() != self.m {
            return Err(Error::invalid(format!(
                "{} dilations given for m = {}",
                self.dilations.len(),
                self.m
            )));
        }
        if self.alphas.len() != self.m {
            return Err(Error::invalid(format!(
                "{} alphas given for m = {}",
                self.alphas.len(),
                self.m
            )));
        }
        if self.dilations.contains(&0) {
            return Err(Error::invalid("dilations must be positive"));
        }
        if self.alphas.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::invalid("alphas must be positive"));
        }
        let total: f64 = self.alphas.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("alphas sum to {total}, expected 1")));
        }
        for (name, c) in [("c1", self.c1), ("c2", self.c2), ("c3", self.c3)] {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        GaussianWindow::new(self.window_size, self.window_std)?;
        Ok(())
    }

    pub fn window(&self) -> Result<GaussianWindow> {
        GaussianWindow::new(self.window_size, self.window_std)
    }

    /// Smallest admissible height and width: the widest dilated window must
    /// reach at most one reflection past either border.
    pub fn min_map_size(&self) -> usize {
        let r = self.dilations.iter().copied().max().unwrap_or(1);
        r * (self.window_size / 2) + 1
    }

    fn check_maps(&self, x: &Tensor, y: &Tensor) -> Result<(usize, usize)> {
        self.validate()?;
        let (h, w) = x.dims2()?;
        if y.shape() != x.shape() {
            return Err(Error::shape(format!(
                "maps have shapes {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        let min = self.min_map_size();
        if h < min || w < min {
            return Err(Error::shape(format!(
                "map {h}x{w} is too small for dilation {}: minimum size is {min}x{min}",
                self.dilations.iter().max().unwrap_or(&1)
            )));
        }
        Ok((h, w))
    }
}

/// Receptive field after each layer of a stack of dilated `window_size` filters.
pub fn receptive_fields(window_size: usize, dilations: &[usize]) -> Vec<usize> {
    let mut rf = 1;
    dilations
        .iter()
        .map(|&d| {
            rf += d * (window_size.saturating_sub(1));
            rf
        })
        .collect()
}

/// Map padded coordinates `0..n + 2·pad` back to their mirrored source.
fn padded_sources(n: usize, pad: usize) -> Vec<usize> {
    (0..n + 2 * pad)
        .map(|i| reflect_index(i as isize - pad as isize, n))
        .collect()
}

fn filter(map: &Tensor, window: &GaussianWindow, dilation: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    let (k, pad) = (window.size(), window.radius() * dilation);
    let pw = w + 2 * pad;
    let (rows, cols) = (padded_sources(h, pad), padded_sources(w, pad));
    let src = map.data();
    let mut padded = Vec::with_capacity((h + 2 * pad) * pw);
    for &sy in &rows {
        let line = &src[sy * w..(sy + 1) * w];
        padded.extend(cols.iter().map(|&sx| line[sx]));
    }
    let mut out = vec![0.0; h * w];
    for (t, &wt) in window.weights().iter().enumerate() {
        let (dy, dx) = ((t / k) * dilation, (t % k) * dilation);
        for (y, dst) in out.chunks_exact_mut(w).enumerate() {
            let start = (y + dy) * pw + dx;
            for (o, &v) in dst.iter_mut().zip(&padded[start..start + w]) {
                *o += wt * v;
            }
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Transpose of [`filter`]: scatter into the padded frame, then fold the
/// border back onto the pixels it mirrors.
fn filter_adjoint(grad: &Tensor, window: &GaussianWindow, dilation: usize) -> Result<Tensor> {
    let (h, w) = grad.dims2()?;
    let (k, pad) = (window.size(), window.radius() * dilation);
    let pw = w + 2 * pad;
    let g = grad.data();
    let mut padded = vec![0.0; (h + 2 * pad) * pw];
    for (t, &wt) in window.weights().iter().enumerate() {
        let (dy, dx) = ((t / k) * dilation, (t % k) * dilation);
        for (y, src) in g.chunks_exact(w).enumerate() {
            let start = (y + dy) * pw + dx;
            for (p, &v) in padded[start..start + w].iter_mut().zip(src) {
                *p += wt * v;
            }
        }
    }
    let (rows, cols) = (padded_sources(h, pad), padded_sources(w, pad));
    let mut out = vec![0.0; h * w];
    for (py, &sy) in rows.iter().enumerate() {
        let line = &padded[py * pw..(py + 1) * pw];
        let dst = &mut out[sy * w..(sy + 1) * w];
        for (&v, &sx) in line.iter().zip(&cols) {
            dst[sx] += v;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// One filtering layer: the dilated weighted local mean of `map`.
pub fn pyramid_filter(map: &Tensor, window: &GaussianWindow, dilation: usize) -> Result<Tensor> {
    if dilation == 0 {
        return Err(Error::invalid("dilation must be positive"));
    }
    let (h, w) = map.dims2()?;
    let min = dilation * window.radius() + 1;
    if h < min || w < min {
        return Err(Error::shape(format!(
            "map {h}x{w} is too small for dilation {dilation}: minimum size is {min}x{min}"
        )));
    }
    filter(map, window, dilation)
}

/// Local moments of one scale.
#[derive(Clone, Debug)]
pub struct SsimScaleStats {
    pub mu_x: Tensor,
    pub mu_y: Tensor,
    pub var_x: Tensor,
    pub var_y: Tensor,
    pub cov_xy: Tensor,
    /// `E[x²] − μ_x²` before clamping at zero.
    raw_var_x: Tensor,
}

impl SsimScaleStats {
    /// Pointwise luminance, contrast and structure comparison maps.
    pub fn comparisons(&self, c1: f64, c2: f64, c3: f64) -> (Tensor, Tensor, Tensor) {
        let n = self.mu_x.numel();
        let (mut l, mut c, mut s) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for k in 0..n {
            let (mx, my) = (self.mu_x.data()[k], self.mu_y.data()[k]);
            let (vx, vy) = (self.var_x.data()[k], self.var_y.data()[k]);
            let (sx, sy) = (vx.sqrt(), vy.sqrt());
            l[k] = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            c[k] = (2.0 * sx * sy + c2) / (vx + vy + c2);
            s[k] = (self.cov_xy.data()[k] + c3) / (sx * sy + c3);
        }
        let shape = self.mu_x.shape();
        (
            Tensor::new(shape.to_vec(), l).expect("same size"),
            Tensor::new(shape.to_vec(), c).expect("same size"),
            Tensor::new(shape.to_vec(), s).expect("same size"),
        )
    }
}

/// Weighted local mean, variance and covariance at one dilation. Variances
/// are clamped at zero.
pub fn local_stats(
    x: &Tensor,
    y: &Tensor,
    window: &GaussianWindow,
    dilation: usize,
) -> Result<SsimScaleStats> {
    x.expect_same_shape(y)?;
    let mu_x = pyramid_filter(x, window, dilation)?;
    let mu_y = filter(y, window, dilation)?;
    // Second moments are taken about each map's global mean. At the coarse
    // scales the maps are smooth and E[x²] − μ² would cancel badly.
    let (cx, cy) = (x.mean(), y.mean());
    let xs = x.map(|v| v - cx);
    let ys = y.map(|v| v - cy);
    let exx = filter(&xs.mul(&xs)?, window, dilation)?;
    let eyy = filter(&ys.mul(&ys)?, window, dilation)?;
    let exy = filter(&xs.mul(&ys)?, window, dilation)?;
    let raw_var_x = exx.zip_map(&mu_x, |e, m| e - (m - cx) * (m - cx))?;
    let var_x = raw_var_x.map(|v| v.max(0.0));
    let var_y = eyy.zip_map(&mu_y, |e, m| (e - (m - cy) * (m - cy)).max(0.0))?;
    let cov_xy = Tensor::from_fn(exy.shape(), |k| {
        exy.data()[k] - (mu_x.data()[k] - cx) * (mu_y.data()[k] - cy)
    });
    Ok(SsimScaleStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov_xy,
        raw_var_x,
    })
}

/// Spatial mean of `L·C·S` for one scale.
pub fn ssim_scale(stats: &SsimScaleStats, c1: f64, c2: f64, c3: f64) -> f64 {
    let (l, c, s) = stats.comparisons(c1, c2, c3);
    let n = l.numel() as f64;
    l.data()
        .iter()
        .zip(c.data())
        .zip(s.data())
        .map(|((l, c), s)| l * c * s)
        .sum::<f64>()
        / n
}

#[derive(Clone, Debug, PartialEq)]
pub struct DmsSsimOutput {
    pub loss: f64,
    pub dms_ssim: f64,
    /// Unclamped SSIM of each scale.
    pub per_scale: Vec<f64>,
    /// Indices of scales whose SSIM was raised to [`SSIM_FLOOR`].
    pub clamped: Vec<usize>,
}

struct Forward {
    output: DmsSsimOutput,
    maps: Vec<(Tensor, Tensor)>,
    stats: Vec<SsimScaleStats>,
}

fn forward(x0: &Tensor, y0: &Tensor, cfg: &DmsSsimConfig) -> Result<Forward> {
    cfg.check_maps(x0, y0)?;
    let window = cfg.window()?;
    let mut maps = Vec::with_capacity(cfg.m);
    let mut stats = Vec::with_capacity(cfg.m);
    let mut per_scale = Vec::with_capacity(cfg.m);
    let (mut x, mut y) = (x0.clone(), y0.clone());
    for &r in &cfg.dilations {
        let st = local_stats(&x, &y, &window, r)?;
        per_scale.push(ssim_scale(&st, cfg.c1, cfg.c2, cfg.c3));
        let (nx, ny) = (st.mu_x.clone(), st.mu_y.clone());
        maps.push((x, y));
        stats.push(st);
        x = nx;
        y = ny;
    }
    let mut clamped = Vec::new();
    let mut dms = 1.0;
    for (i, (&s, &a)) in per_scale.iter().zip(&cfg.alphas).enumerate() {
        let s = if s <= SSIM_FLOOR {
            clamped.push(i);
            SSIM_FLOOR
        } else {
            s
        };
        dms *= s.powf(a);
    }
    if !clamped.is_empty() {
        log::debug!("per-scale SSIM clamped at scales {clamped:?}");
    }
    Ok(Forward {
        output: DmsSsimOutput {
            loss: 1.0 - dms,
            dms_ssim: dms,
            per_scale,
            clamped,
        },
        maps,
        stats,
    })
}

/// `1 − Π SSIM_i^α_i` for an estimated map `x0` against ground truth `y0`.
pub fn dms_ssim_loss(x0: &Tensor, y0: &Tensor, cfg: &DmsSsimConfig) -> Result<DmsSsimOutput> {
    Ok(forward(x0, y0, cfg)?.output)
}

/// Analytic `∂loss/∂x0`.
pub fn dms_ssim_grad(x0: &Tensor, y0: &Tensor, cfg: &DmsSsimConfig) -> Result<Tensor> {
    Ok(dms_ssim_loss_and_grad(x0, y0, cfg)?.1)
}

pub fn dms_ssim_loss_and_grad(
    x0: &Tensor,
    y0: &Tensor,
    cfg: &DmsSsimConfig,
) -> Result<(DmsSsimOutput, Tensor)> {
    let fwd = forward(x0, y0, cfg)?;
    let window = cfg.window()?;
    let (c1, c2, c3) = (cfg.c1, cfg.c2, cfg.c3);
    let combined_cs = c3 == c2 / 2.0;
    let dms = fwd.output.dms_ssim;

    // Gradient flowing into X[i+1] from the coarser scales.
    let mut grad_next: Option<Tensor> = None;
    for i in (0..cfg.m).rev() {
        let r = cfg.dilations[i];
        let (x, y) = &fwd.maps[i];
        let st = &fwd.stats[i];
        let s = fwd.output.per_scale[i];
        let d_scale = if s > SSIM_FLOOR {
            -cfg.alphas[i] * dms / s
        } else {
            0.0
        };
        let n = x.numel();
        let coef = d_scale / n as f64;

        let mut g_mu = vec![0.0; n];
        let mut g_exx = vec![0.0; n];
        let mut g_exy = vec![0.0; n];
        for k in 0..n {
            let (mx, my) = (st.mu_x.data()[k], st.mu_y.data()[k]);
            let (vx, vy, cov) = (st.var_x.data()[k], st.var_y.data()[k], st.cov_xy.data()[k]);
            let ln = 2.0 * mx * my + c1;
            let ld = mx * mx + my * my + c1;
            let l = ln / ld;
            let dl_dmx = (2.0 * my * ld - ln * 2.0 * mx) / (ld * ld);
            let den = vx + vy + c2;
            let (cs, dcs_dvx, dcs_dcov) = if combined_cs {
                let cs = (2.0 * cov + c2) / den;
                (cs, -cs / den, 2.0 / den)
            } else {
                let (sx, sy) = (vx.sqrt(), vy.sqrt());
                let a = sx * sy;
                let da = if sx > 0.0 { sy / (2.0 * sx) } else { 0.0 };
                let c = (2.0 * a + c2) / den;
                let sv = (cov + c3) / (a + c3);
                let dc = (2.0 * da * den - (2.0 * a + c2)) / (den * den);
                let ds = -(cov + c3) / ((a + c3) * (a + c3)) * da;
                (c * sv, dc * sv + c * ds, c / (a + c3))
            };
            let live = if st.raw_var_x.data()[k] > 0.0 {
                1.0
            } else {
                0.0
            };
            let dq_dvx = l * dcs_dvx * live;
            let dq_dcov = l * dcs_dcov;
            g_mu[k] = coef * (cs * dl_dmx - 2.0 * mx * dq_dvx - my * dq_dcov);
            g_exx[k] = coef * dq_dvx;
            g_exy[k] = coef * dq_dcov;
        }
        let shape = x.shape().to_vec();
        let mut g_mu = Tensor::new(shape.clone(), g_mu)?;
        if let Some(gn) = grad_next.take() {
            g_mu.add_scaled(&gn, 1.0)?;
        }
        let mut gx = filter_adjoint(&g_mu, &window, r)?;
        let t_exx = filter_adjoint(&Tensor::new(shape.clone(), g_exx)?, &window, r)?;
        let t_exy = filter_adjoint(&Tensor::new(shape, g_exy)?, &window, r)?;
        for k in 0..n {
            gx.data_mut()[k] += 2.0 * x.data()[k] * t_exx.data()[k] + y.data()[k] * t_exy.data()[k];
        }
        grad_next = Some(gx);
    }
    Ok((fwd.output, grad_next.expect("m >= 1")))
}

/// Records the loss on a tape from `[1, H, W]` maps; gradients reach `x`
/// (and `y` when it is a variable) through the generic reverse sweep.
pub fn dms_ssim_loss_on_tape(
    tape: &mut GradTape,
    x: Var,
    y: Var,
    cfg: &DmsSsimConfig,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let [1, h, w] = shape[..] else {
        return Err(Error::shape(format!("expected [1, H, W], got {shape:?}")));
    };
    cfg.check_maps(
        &Tensor::zeros(&[h, w]),
        &tape.value(y).clone().reshape(&[h, w])?,
    )?;
    let window = cfg.window()?;
    let kernel = tape.constant(window.kernel());
    let (mut xi, mut yi) = (x, y);
    let mut product: Option<Var> = None;
    for (&r, &alpha) in cfg.dilations.iter().zip(&cfg.alphas) {
        let spec = window.spec(r);
        let mx = tape.conv2d(xi, kernel, None, spec)?;
        let my = tape.conv2d(yi, kernel, None, spec)?;
        let xx = tape.mul(xi, xi)?;
        let yy = tape.mul(yi, yi)?;
        let xy = tape.mul(xi, yi)?;
        let exx = tape.conv2d(xx, kernel, None, spec)?;
        let eyy = tape.conv2d(yy, kernel, None, spec)?;
        let exy = tape.conv2d(xy, kernel, None, spec)?;
        let mx2 = tape.mul(mx, mx)?;
        let my2 = tape.mul(my, my)?;
        let mxy = tape.mul(mx, my)?;
        let vx_raw = tape.sub(exx, mx2)?;
        let vy_raw = tape.sub(eyy, my2)?;
        let vx = tape.clamp_min(vx_raw, 0.0);
        let vy = tape.clamp_min(vy_raw, 0.0);
        let cov = tape.sub(exy, mxy)?;
        let sx = tape.sqrt(vx);
        let sy = tape.sqrt(vy);
        let sxy = tape.mul(sx, sy)?;

        let l_num = tape.scale(mxy, 2.0);
        let l_num = tape.add_const(l_num, cfg.c1);
        let l_den = tape.add(mx2, my2)?;
        let l_den = tape.add_const(l_den, cfg.c1);
        let l = tape.div(l_num, l_den)?;

        let c_num = tape.scale(sxy, 2.0);
        let c_num = tape.add_const(c_num, cfg.c2);
        let c_den = tape.add(vx, vy)?;
        let c_den = tape.add_const(c_den, cfg.c2);
        let c = tape.div(c_num, c_den)?;

        let s_num = tape.add_const(cov, cfg.c3);
        let s_den = tape.add_const(sxy, cfg.c3);
        let s = tape.div(s_num, s_den)?;

        let lc = tape.mul(l, c)?;
        let q = tape.mul(lc, s)?;
        let ssim = tape.mean(q);
        let ssim = tape.clamp_min(ssim, SSIM_FLOOR);
        let term = tape.powf(ssim, alpha);
        product = Some(match product {
            None => term,
            Some(p) => tape.mul(p, term)?,
        });
        xi = mx;
        yi = my;
    }
    let dms = product.expect("m >= 1");
    let neg = tape.scale(dms, -1.0);
    Ok(tape.add_const(neg, 1.0))
}
