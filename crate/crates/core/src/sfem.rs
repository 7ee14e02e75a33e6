//! Structured feature enhancement: mean-field refinement of a group of
//! same-resolution features.
//!
//! Each feature `f_i` is refined by messages from the others through a
//! learned bias-free 1×1 convolution `w[i][j]`, unrolled for `n_iter`
//! synchronous steps:
//!
//! ```text
//! h_i⁰ = f_i,    h_iᵗ = f_i + Σ_{j≠i} w[i][j] · h_jᵗ⁻¹,    f̂_i = h_i^{n_iter}
//! ```
//!
//! The same weights are reused at every step. Features in a group share
//! height and width; channel counts may differ, so `w[i][j]` is `[C_i, C_j]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{channel_mix, Tensor};

pub const DEFAULT_ITERATIONS: usize = 2;

/// Ordered features sharing one spatial resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGroup(Vec<Tensor>);

impl FeatureGroup {
    pub fn new(features: Vec<Tensor>) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::invalid("empty feature group"))?;
        let (_, h, w) = first.dims3()?;
        for (i, f) in features.iter().enumerate() {
            let (_, fh, fw) = f.dims3()?;
            if (fh, fw) != (h, w) {
                return Err(Error::shape(format!(
                    "feature {i} is {fh}x{fw}, group resolution is {h}x{w}"
                )));
            }
        }
        Ok(Self(features))
    }

    pub fn features(&self) -> &[Tensor] {
        &self.0
    }

    pub fn into_features(self) -> Vec<Tensor> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.0.iter().map(|f| f.shape()[0]).collect()
    }
}

/// Mixing weights for one group plus the unroll depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SfemParams {
    n: usize,
    pub n_iter: usize,
    /// Row-major `n × n`, `None` on the diagonal.
    weights: Vec<Option<Tensor>>,
}

impl SfemParams {
    /// Builds parameters from `weight(i, j)` for every ordered pair `i ≠ j`.
    pub fn from_fn(
        n: usize,
        n_iter: usize,
        mut weight: impl FnMut(usize, usize) -> Tensor,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!(
                "a feature group needs at least 2 members, got {n}"
            )));
        }
        if n_iter == 0 {
            return Err(Error::invalid("n_iter must be at least 1"));
        }
        let weights = (0..n * n)
            .map(|k| (k / n != k % n).then(|| weight(k / n, k % n)))
            .collect();
        Ok(Self { n, n_iter, weights })
    }

    pub fn zeros(channels: &[usize], n_iter: usize) -> Result<Self> {
        Self::from_fn(channels.len(), n_iter, |i, j| {
            Tensor::zeros(&[channels[i], channels[j]])
        })
    }

    /// Zero-mean Gaussian initialization.
    pub fn random(channels: &[usize], n_iter: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        Self::from_fn(channels.len(), n_iter, |i, j| {
            Tensor::from_fn(&[channels[i], channels[j]], |_| normal.sample(rng))
        })
    }

    pub fn group_size(&self) -> usize {
        self.n
    }

    /// `w[i][j]`, the map from feature `j`'s channels to feature `i`'s.
    pub fn weight(&self, i: usize, j: usize) -> Option<&Tensor> {
        if i >= self.n || j >= self.n {
            return None;
        }
        self.weights[i * self.n + j].as_ref()
    }

    pub fn weight_mut(&mut self, i: usize, j: usize) -> Option<&mut Tensor> {
        if i >= self.n || j >= self.n {
            return None;
        }
        self.weights[i * self.n + j].as_mut()
    }

    /// `(i, j, weight)` in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, &Tensor)> {
        self.weights
            .iter()
            .enumerate()
            .filter_map(move |(k, w)| w.as_ref().map(|w| (k / self.n, k % self.n, w)))
    }

    /// Checkpoint name of `w[i][j]` in group `g`.
    pub fn tensor_name(group: usize, i: usize, j: usize) -> String {
        format!("sfem{group}.w_{i}_{j}")
    }

    fn check(&self, group: &FeatureGroup) -> Result<()> {
        if group.len() != self.n {
            return Err(Error::shape(format!(
                "group has {} features, parameters expect {}",
                group.len(),
                self.n
            )));
        }
        let ch = group.channels();
        for (i, j, w) in self.pairs() {
            if w.shape() != [ch[i], ch[j]] {
                return Err(Error::shape(format!(
                    "w_{i}_{j} has shape {:?}, features need [{}, {}]",
                    w.shape(),
                    ch[i],
                    ch[j]
                )));
            }
        }
        Ok(())
    }
}

/// Synchronous mean-field refinement using the GEMM channel-mixing kernel.
pub fn mean_field_refine(group: &FeatureGroup, params: &SfemParams) -> Result<FeatureGroup> {
    params.check(group)?;
    let f = group.features();
    let mut h: Vec<Tensor> = f.to_vec();
    for _ in 0..params.n_iter {
        let mut next = Vec::with_capacity(f.len());
        for (i, fi) in f.iter().enumerate() {
            let mut acc = fi.clone();
            for (j, hj) in h.iter().enumerate() {
                if let Some(w) = params.weight(i, j) {
                    acc.add_scaled(&channel_mix(w, hj)?, 1.0)?;
                }
            }
            next.push(acc);
        }
        h = next;
    }
    FeatureGroup::new(h)
}

/// Same contract as [`mean_field_refine`], written as plain scalar loops
/// with no shared kernels. Kept as a conformance oracle.
pub fn mean_field_refine_reference(
    group: &FeatureGroup,
    params: &SfemParams,
) -> Result<FeatureGroup> {
    params.check(group)?;
    let f = group.features();
    let n = f.len();
    let shapes: Vec<Vec<usize>> = f.iter().map(|t| t.shape().to_vec()).collect();
    let (height, width) = (shapes[0][1], shapes[0][2]);
    let mut prev: Vec<Vec<f64>> = f.iter().map(|t| t.data().to_vec()).collect();
    for _ in 0..params.n_iter {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let ci = shapes[i][0];
            let mut out = f[i].data().to_vec();
            for j in 0..n {
                if i == j {
                    continue;
                }
                let cj = shapes[j][0];
                let w = params.weight(i, j).expect("off-diagonal").data();
                for a in 0..ci {
                    for b in 0..cj {
                        let wab = w[a * cj + b];
                        for y in 0..height {
                            for x in 0..width {
                                out[(a * height + y) * width + x] +=
                                    wab * prev[j][(b * height + y) * width + x];
                            }
                        }
                    }
                }
            }
            cur.push(out);
        }
        prev = cur;
    }
    let out = prev
        .into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s, d))
        .collect::<Result<Vec<_>>>()?;
    FeatureGroup::new(out)
}

/// Records the refinement on a tape. `weights[i * n + j]` holds `w[i][j]`
/// (ignored on the diagonal).
pub fn mean_field_refine_on_tape(
    tape: &mut GradTape,
    features: &[Var],
    weights: &[Option<Var>],
    n_iter: usize,
) -> Result<Vec<Var>> {
    let n = features.len();
    if weights.len() != n * n {
        return Err(Error::shape(format!(
            "{} weights for a group of {n}",
            weights.len()
        )));
    }
    let mut h = features.to_vec();
    for _ in 0..n_iter {
        let mut next = Vec::with_capacity(n);
        for (i, &fi) in features.iter().enumerate() {
            let mut acc = fi;
            for (j, &hj) in h.iter().enumerate() {
                if i == j {
                    continue;
                }
                let w = weights[i * n + j]
                    .ok_or_else(|| Error::invalid(format!("missing w_{i}_{j}")))?;
                let msg = tape.channel_mix(w, hj)?;
                acc = tape.add(acc, msg)?;
            }
            next.push(acc);
        }
        h = next;
    }
    Ok(h)
}
