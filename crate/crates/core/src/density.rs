//! Ground-truth density maps from head annotations.
//!
//! Each annotated head becomes a Gaussian whose spread follows the local
//! crowd spacing: `σ = β · mean distance to the k nearest other heads`.
//! Kernels are truncated to the square of half-width `⌈3σ⌉` around the
//! nearest pixel and renormalized over the pixels that fall inside the
//! image, so every rendered head contributes exactly one unit of mass.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{located, Error, Result};
use crate::ntb::ByteReader;
use crate::tensor::Tensor;

/// Head annotations for one image. Coordinates are pixels, origin top-left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub width: usize,
    pub height: usize,
    pub points: Vec<[f64; 2]>,
}

impl AnnotationSet {
    pub fn new(width: usize, height: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        let set = Self {
            width,
            height,
            points,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::invalid("width must be positive"));
        }
        if self.height == 0 {
            return Err(Error::invalid("height must be positive"));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !(p[0].is_finite() && p[1].is_finite()))
        {
            return Err(Error::invalid(format!("points[{i}] is not finite")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// A non-negative `[H, W]` map whose sum is a head count.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap(Tensor);

impl DensityMap {
    pub fn new(values: Tensor) -> Result<Self> {
        values.dims2()?;
        if let Some(i) = values.data().iter().position(|&v| !(v >= 0.0)) {
            return Err(Error::invalid(format!(
                "density value {} at index {i} is negative or NaN",
                values.data()[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Tensor::zeros(&[height, width]))
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn integral(&self) -> f64 {
        self.0.sum()
    }
}

/// Clamps applied by [`adaptive_sigma_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SigmaConfig {
    pub k: usize,
    pub beta: f64,
    /// Spread for a head with no neighbours at all.
    pub sigma_default: f64,
    pub sigma_min: f64,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self {
            k: 3,
            beta: 0.3,
            sigma_default: 15.0,
            sigma_min: 1.0,
        }
    }
}

/// Geometry-adaptive spreads with the default clamps.
pub fn adaptive_sigma(points: &[[f64; 2]], k: usize, beta: f64) -> Vec<f64> {
    adaptive_sigma_with(
        points,
        &SigmaConfig {
            k,
            beta,
            ..SigmaConfig::default()
        },
    )
}

/// For each point, `beta` times the mean distance to its `k` nearest other
/// points (fewer when fewer exist), floored at `sigma_min`.
pub fn adaptive_sigma_with(points: &[[f64; 2]], cfg: &SigmaConfig) -> Vec<f64> {
    let mut dists = Vec::with_capacity(points.len());
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            dists.clear();
            dists.extend(
                points
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1])),
            );
            if dists.is_empty() || cfg.k == 0 {
                return cfg.sigma_default.max(cfg.sigma_min);
            }
            let k = cfg.k.min(dists.len());
            if k < dists.len() {
                dists.select_nth_unstable_by(k - 1, f64::total_cmp);
            }
            let nearest = &mut dists[..k];
            nearest.sort_by(f64::total_cmp);
            let mean = nearest.iter().sum::<f64>() / k as f64;
            (cfg.beta * mean).max(cfg.sigma_min)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Rendered {
    pub map: DensityMap,
    pub rendered: usize,
    /// Points whose nearest pixel lies outside the canvas.
    pub skipped: usize,
}

/// Sums one truncated, renormalized Gaussian per annotation.
///
/// Pixel `(row, col)` is evaluated at coordinate `(col, row)`.
pub fn render_density(annotations: &AnnotationSet, sigmas: &[f64]) -> Result<Rendered> {
    annotations.validate()?;
    if sigmas.len() != annotations.points.len() {
        return Err(Error::shape(format!(
            "{} sigmas for {} points",
            sigmas.len(),
            annotations.points.len()
        )));
    }
    if let Some(i) = sigmas.iter().position(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::invalid(format!(
            "sigma[{i}] = {} must be positive",
            sigmas[i]
        )));
    }
    let (h, w) = (annotations.height, annotations.width);
    let mut map = vec![0.0; h * w];
    let mut stamp = Vec::new();
    let mut skipped = 0;
    for (i, (p, &sigma)) in annotations.points.iter().zip(sigmas).enumerate() {
        let (cx, cy) = (p[0].round(), p[1].round());
        if cx < 0.0 || cy < 0.0 || cx >= w as f64 || cy >= h as f64 {
            log::warn!(
                "point {i} at ({}, {}) lies outside the {w}x{h} canvas; skipped",
                p[0],
                p[1]
            );
            skipped += 1;
            continue;
        }
        let (cx, cy) = (cx as isize, cy as isize);
        let (fx, fy) = (p[0] - cx as f64, p[1] - cy as f64);
        let r = (3.0 * sigma).ceil() as isize;
        let (r0, r1) = ((cy - r).max(0), (cy + r).min(h as isize - 1));
        let (c0, c1) = ((cx - r).max(0), (cx + r).min(w as isize - 1));
        let denom = 2.0 * sigma * sigma;
        stamp.clear();
        let mut total = 0.0;
        for row in r0..=r1 {
            let dy = (row - cy) as f64 - fy;
            for col in c0..=c1 {
                let dx = (col - cx) as f64 - fx;
                let v = (-(dx * dx + dy * dy) / denom).exp();
                total += v;
                stamp.push(v);
            }
        }
        let mut it = stamp.iter();
        for row in r0..=r1 {
            let line = &mut map[row as usize * w..(row as usize + 1) * w];
            for col in c0..=c1 {
                line[col as usize] += it.next().expect("stamp sized to window") / total;
            }
        }
    }
    Ok(Rendered {
        map: DensityMap(Tensor::new(vec![h, w], map)?),
        rendered: annotations.points.len() - skipped,
        skipped,
    })
}

/// Adaptive spreads followed by rendering.
pub fn ground_truth(annotations: &AnnotationSet, cfg: &SigmaConfig) -> Result<Rendered> {
    let sigmas = adaptive_sigma_with(&annotations.points, cfg);
    render_density(annotations, &sigmas)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    located(
        path,
        serde_json::from_str::<AnnotationSet>(&text)
            .map_err(Error::from)
            .and_then(|set| set.validate().map(|_| set)),
    )
}

pub fn write_annotations(path: impl AsRef<Path>, annotations: &AnnotationSet) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string(annotations)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const DENSITY_MAGIC: &[u8; 4] = b"DMP1";

/// `"DMP1" | u32 height | u32 width | H·W × f64`, little-endian.
pub fn encode_map(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let mut out = Vec::with_capacity(12 + 8 * h * w);
    out.extend_from_slice(DENSITY_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in map.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_map(bytes: &[u8]) -> Result<Tensor> {
    let mut r = ByteReader::new(bytes);
    r.magic(DENSITY_MAGIC)?;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let at = r.pos();
    let n = h
        .checked_mul(w)
        .ok_or_else(|| Error::format(at, "map size overflows"))?;
    let values = r.f64s(n, "map payload")?;
    r.finish()?;
    Tensor::new(vec![h, w], values)
}

/// Reads any `DMP1` map (images and predictions may hold negative values).
pub fn read_map(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    located(path, decode_map(&bytes))
}

pub fn write_map(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_map(map)?).map_err(|e| Error::io(path, e))
}

pub fn read_density(path: impl AsRef<Path>) -> Result<DensityMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    located(
        path,
        decode_map(&bytes).and_then(|map| {
            if let Some(i) = map.data().iter().position(|&v| !(v >= 0.0)) {
                return Err(Error::format(12 + 8 * i, "negative density value"));
            }
            DensityMap::new(map)
        }),
    )
}

pub fn write_density(path: impl AsRef<Path>, map: &DensityMap) -> Result<()> {
    write_map(path, map.values())
}

/// 16-bit binary PGM scaled so the maximum maps to 65535. For viewing only.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = map.dims2()?;
    let (_, hi) = map.min_max();
    let scale = if hi > 0.0 { 65535.0 / hi } else { 0.0 };
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in map.data() {
        let q = (v.max(0.0) * scale).round().min(65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}
