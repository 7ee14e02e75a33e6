//! A miniature three-branch crowd-counting network.
//!
//! The input image is resampled into a pyramid (default scales 2, 1, 0.5)
//! and every level runs through one shared backbone of four conv stages.
//! Features are indexed by their *level*: a feature at level `ℓ` has
//! resolution `H/2^ℓ`. Features from different branches that land on the
//! same level `0..=3` form a group, are refined jointly by mean-field
//! message passing, and continue through their own branch. Each group
//! yields a side-output density map; the level-4 features yield a coarse
//! map `M_4`. Side outputs are merged coarse-to-fine:
//!
//! ```text
//! M_i = w_i ∗ M̃_i + w_{i+1} ∗ Up(M_{i+1}),   i = 3, 2, 1, 0
//! ```

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dms_ssim::DmsSsimConfig;
use crate::error::{located, Error, Result};
use crate::ntb;
use crate::sfem::{self, SfemParams};
use crate::tape::{GradTape, Var};
use crate::tensor::{self, ConvSpec, PadMode, Tensor};

/// Side outputs `M̃_0..M̃_3`.
pub const SIDE_LEVELS: usize = 4;
/// Level of the coarse map `M_4`.
pub const COARSE_LEVEL: usize = 4;
const STAGES: usize = 4;

fn default_in_channels() -> usize {
    1
}
fn default_head_width() -> usize {
    32
}
fn default_sfem_iterations() -> usize {
    sfem::DEFAULT_ITERATIONS
}
fn default_init_std() -> f64 {
    1e-6
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stage_widths: Vec<usize>,
    pub convs_per_stage: usize,
    pub pyramid_scales: Vec<f64>,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channels after the 1×1 reduction in each density head.
    #[serde(default = "default_head_width")]
    pub head_width: usize,
    #[serde(default = "default_sfem_iterations")]
    pub sfem_iterations: usize,
    /// Std of the Gaussian init for every non-backbone weight.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![16, 32, 64, 128],
            convs_per_stage: 2,
            pyramid_scales: vec![2.0, 1.0, 0.5],
            in_channels: 1,
            head_width: 32,
            sfem_iterations: sfem::DEFAULT_ITERATIONS,
            init_std: 1e-6,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != STAGES || self.stage_widths.contains(&0) {
            return Err(Error::invalid(format!(
                "stage_widths must list {STAGES} positive widths, got {:?}",
                self.stage_widths
            )));
        }
        if self.convs_per_stage == 0 {
            return Err(Error::invalid("convs_per_stage must be positive"));
        }
        if self.in_channels == 0 || self.head_width == 0 || self.sfem_iterations == 0 {
            return Err(Error::invalid(
                "in_channels, head_width and sfem_iterations must be positive",
            ));
        }
        if self.pyramid_scales.is_empty() {
            return Err(Error::invalid("pyramid_scales is empty"));
        }
        if self.pyramid_scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "pyramid_scales must be strictly decreasing, got {:?}",
                self.pyramid_scales
            )));
        }
        for &s in &self.pyramid_scales {
            if !(s > 0.0) || s.log2().fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "pyramid scale {s} is not a power of two"
                )));
            }
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::invalid("init_std must be non-negative"));
        }
        Ok(())
    }

    fn exponents(&self) -> Vec<i32> {
        self.pyramid_scales
            .iter()
            .map(|s| s.log2() as i32)
            .collect()
    }

    /// Level of stage `s` (1-based) in the branch with scale `2^e`.
    fn level(stage: usize, e: i32) -> i32 {
        stage as i32 - 1 - e
    }

    /// Stage of branch `e` that lands on level `ℓ`, if any.
    fn stage_at(level: i32, e: i32) -> Option<usize> {
        let s = level + 1 + e;
        (1..=STAGES as i32).contains(&s).then_some(s as usize)
    }

    /// `(branch, stage)` members of every level-`0..=3` group.
    pub fn groups(&self) -> Vec<Vec<(usize, usize)>> {
        let ex = self.exponents();
        (0..SIDE_LEVELS as i32)
            .map(|l| {
                ex.iter()
                    .enumerate()
                    .filter_map(|(k, &e)| Self::stage_at(l, e).map(|s| (k, s)))
                    .collect()
            })
            .collect()
    }

    fn coarse_members(&self) -> Vec<(usize, usize)> {
        self.exponents()
            .iter()
            .enumerate()
            .filter_map(|(k, &e)| Self::stage_at(COARSE_LEVEL as i32, e).map(|s| (k, s)))
            .collect()
    }

    /// Input height/width must be a multiple of this.
    pub const fn size_multiple() -> usize {
        16
    }
}

/// Named parameter store. Backbone tensors exist once and are shared by all branches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: BackboneConfig,
    tensors: IndexMap<String, Tensor>,
}

fn conv_name(stage: usize, conv: usize) -> String {
    format!("backbone.stage{stage}.conv{conv}")
}

fn head_name(level: usize) -> String {
    format!("head{level}")
}

fn fuse_name(i: usize) -> String {
    format!("fuse.w{i}")
}

impl ModelParams {
    /// Expected `(name, shape)` of every tensor, in storage order.
    pub fn layout(config: &BackboneConfig) -> Result<Vec<(String, Vec<usize>)>> {
        config.validate()?;
        let mut out = Vec::new();
        let mut c_in = config.in_channels;
        for (s, &width) in config.stage_widths.iter().enumerate() {
            for c in 1..=config.convs_per_stage {
                let name = conv_name(s + 1, c);
                out.push((format!("{name}.weight"), vec![width, c_in, 3, 3]));
                out.push((format!("{name}.bias"), vec![width]));
                c_in = width;
            }
        }
        let width_of = |stage: usize| config.stage_widths[stage - 1];
        for (g, members) in config.groups().iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("no features land on level {g}")));
            }
            for (i, &(_, si)) in members.iter().enumerate() {
                for (j, &(_, sj)) in members.iter().enumerate() {
                    if i != j {
                        out.push((
                            SfemParams::tensor_name(g, i, j),
                            vec![width_of(si), width_of(sj)],
                        ));
                    }
                }
            }
        }
        let mut heads: Vec<Vec<(usize, usize)>> = config.groups();
        let coarse = config.coarse_members();
        if coarse.is_empty() {
            return Err(Error::invalid("no features land on the coarse level"));
        }
        heads.push(coarse);
        for (g, members) in heads.iter().enumerate() {
            let c: usize = members.iter().map(|&(_, s)| width_of(s)).sum();
            let hw = config.head_width;
            out.push((format!("{}.reduce.weight", head_name(g)), vec![hw, c, 1, 1]));
            out.push((format!("{}.reduce.bias", head_name(g)), vec![hw]));
            out.push((
                format!("{}.regress.weight", head_name(g)),
                vec![1, hw, 3, 3],
            ));
            out.push((format!("{}.regress.bias", head_name(g)), vec![1]));
        }
        for i in 0..=SIDE_LEVELS {
            out.push((fuse_name(i), vec![1, 1, 3, 3]));
        }
        Ok(out)
    }

    /// Fan-in-scaled Gaussian backbone weights; `N(0, init_std²)` for every
    /// other weight; zero biases.
    pub fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        let small = Normal::new(0.0, config.init_std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut tensors = IndexMap::new();
        for (name, shape) in Self::layout(config)? {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name.starts_with("backbone.") {
                let fan_in: usize = shape[1..].iter().product();
                let he = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| he.sample(rng))
            } else {
                Tensor::from_fn(&shape, |_| small.sample(rng))
            };
            tensors.insert(name, t);
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: &BackboneConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let layout = Self::layout(config)?;
        if tensors.len() != layout.len() {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint holds {} tensors, configuration expects {}",
                tensors.len(),
                layout.len()
            )));
        }
        let map: IndexMap<String, Tensor> = tensors.into_iter().collect();
        let mut ordered = IndexMap::with_capacity(layout.len());
        for (name, shape) in layout {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::ConfigMismatch(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            ordered.insert(name, t.clone());
        }
        Ok(Self {
            config: config.clone(),
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("parameter {name} is missing")))
    }

    /// Mixing weights of group `g` as [`SfemParams`].
    pub fn sfem_params(&self, g: usize) -> Result<SfemParams> {
        let n = self.config.groups()[g].len();
        let mut err = None;
        let p = SfemParams::from_fn(n, self.config.sfem_iterations, |i, j| {
            match self.tensor(&SfemParams::tensor_name(g, i, j)) {
                Ok(t) => t.clone(),
                Err(e) => {
                    err = Some(e);
                    Tensor::zeros(&[0])
                }
            }
        })?;
        match err {
            Some(e) => Err(e),
            None => Ok(p),
        }
    }

    /// Registers every tensor on `tape`, as variables or as constants.
    pub fn register(&self, tape: &mut GradTape, trainable: bool) -> ParamVars {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, v)| {
                    let var = if trainable {
                        tape.var(v.clone())
                    } else {
                        tape.constant(v.clone())
                    };
                    (k.clone(), var)
                })
                .collect(),
        )
    }
}

/// Tape handles for every parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct ParamVars(IndexMap<String, Var>);

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter {name} is not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Resamples `image` to every pyramid scale. Scale 1 returns the input as is.
pub fn build_pyramid(image: &Tensor, scales: &[f64]) -> Result<Vec<Tensor>> {
    let (_, h, w) = image.dims3()?;
    let m = BackboneConfig::size_multiple();
    if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
        return Err(Error::shape(format!(
            "image is {h}x{w}; height and width must be positive multiples of {m}"
        )));
    }
    scales
        .iter()
        .map(|&s| {
            if s == 1.0 {
                return Ok(image.clone());
            }
            let (sh, sw) = (h as f64 * s, w as f64 * s);
            if sh.fract() != 0.0 || sw.fract() != 0.0 || sh < 1.0 || sw < 1.0 {
                return Err(Error::shape(format!(
                    "scale {s} does not give an integral size for {h}x{w}"
                )));
            }
            tensor::resize_bilinear(image, sh as usize, sw as usize)
        })
        .collect()
}

/// Coarse-to-fine fusion of the side outputs with the coarse map.
/// All maps are `[1, h, w]`; `fusion[i]` is the `[1, 1, 3, 3]` kernel `w_i`.
pub fn topdown_fuse(side_outputs: &[Tensor], coarse: &Tensor, fusion: &[Tensor]) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let sides: Vec<Var> = side_outputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect();
    let m4 = tape.constant(coarse.clone());
    let ws: Vec<Var> = fusion.iter().map(|t| tape.constant(t.clone())).collect();
    let out = topdown_fuse_on_tape(&mut tape, &sides, m4, &ws)?;
    Ok(tape.value(out).clone())
}

pub fn topdown_fuse_on_tape(
    tape: &mut GradTape,
    sides: &[Var],
    coarse: Var,
    fusion: &[Var],
) -> Result<Var> {
    if fusion.len() != sides.len() + 1 {
        return Err(Error::shape(format!(
            "{} fusion kernels for {} side outputs",
            fusion.len(),
            sides.len()
        )));
    }
    let spec = ConvSpec::same(3, 1, PadMode::Zero);
    let mut m = coarse;
    for i in (0..sides.len()).rev() {
        let (_, h, w) = tape.value(sides[i]).dims3()?;
        let (_, ch, cw) = tape.value(m).dims3()?;
        if (h, w) != (2 * ch, 2 * cw) {
            return Err(Error::shape(format!(
                "side output {i} is {h}x{w} but the map below it is {ch}x{cw}"
            )));
        }
        let up = tape.upsample_x2(m)?;
        let a = tape.conv2d(sides[i], fusion[i], None, spec)?;
        let b = tape.conv2d(up, fusion[i + 1], None, spec)?;
        m = tape.add(a, b)?;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// When false, grouped features pass through unrefined.
    pub sfem: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { sfem: true }
    }
}

/// Tape handles of one forward pass; maps are `[1, h, w]`.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub density: Var,
    pub side_outputs: Vec<Var>,
    pub coarse: Var,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Full-resolution estimate `M_0`, `[H, W]`.
    pub density: Tensor,
    /// `M̃_0..M̃_3`, `[H/2^i, W/2^i]`.
    pub side_outputs: Vec<Tensor>,
    /// `M_4`, `[H/16, W/16]`.
    pub coarse: Tensor,
}

fn conv_stage(
    tape: &mut GradTape,
    vars: &ParamVars,
    cfg: &BackboneConfig,
    stage: usize,
    mut x: Var,
) -> Result<Var> {
    let spec = ConvSpec::same(3, 1, PadMode::Zero);
    for c in 1..=cfg.convs_per_stage {
        let name = conv_name(stage, c);
        let w = vars.get(&format!("{name}.weight"))?;
        let b = vars.get(&format!("{name}.bias"))?;
        let y = tape.conv2d(x, w, Some(b), spec)?;
        x = tape.relu(y);
    }
    Ok(x)
}

fn density_head(
    tape: &mut GradTape,
    vars: &ParamVars,
    level: usize,
    features: &[Var],
) -> Result<Var> {
    let x = if features.len() == 1 {
        features[0]
    } else {
        tape.concat_channels(features)?
    };
    let name = head_name(level);
    let r = tape.conv2d(
        x,
        vars.get(&format!("{name}.reduce.weight"))?,
        Some(vars.get(&format!("{name}.reduce.bias"))?),
        ConvSpec::same(1, 1, PadMode::Zero),
    )?;
    let r = tape.relu(r);
    tape.conv2d(
        r,
        vars.get(&format!("{name}.regress.weight"))?,
        Some(vars.get(&format!("{name}.regress.bias"))?),
        ConvSpec::same(3, 1, PadMode::Zero),
    )
}

/// Records the whole network on `tape` for a `[C, H, W]` image.
pub fn forward_on_tape(
    tape: &mut GradTape,
    image: &Tensor,
    cfg: &BackboneConfig,
    vars: &ParamVars,
    options: ForwardOptions,
) -> Result<ForwardVars> {
    cfg.validate()?;
    let (c, _, _) = image.dims3()?;
    if c != cfg.in_channels {
        return Err(Error::shape(format!(
            "image has {c} channels, model expects {}",
            cfg.in_channels
        )));
    }
    let pyramid = build_pyramid(image, &cfg.pyramid_scales)?;
    let ex = cfg.exponents();
    let groups = cfg.groups();

    // Latest (refined) feature of each branch and the stage it came from.
    let mut latest: Vec<Option<(usize, Var)>> = vec![None; ex.len()];
    let mut inputs: Vec<Var> = pyramid.into_iter().map(|p| tape.constant(p)).collect();
    let mut sides = Vec::with_capacity(SIDE_LEVELS);
    let mut coarse = None;

    let min_level = ex
        .iter()
        .map(|&e| BackboneConfig::level(1, e))
        .min()
        .expect("non-empty");
    for level in min_level..=COARSE_LEVEL as i32 {
        let mut here: Vec<(usize, Var)> = Vec::new();
        for (k, &e) in ex.iter().enumerate() {
            let Some(stage) = BackboneConfig::stage_at(level, e) else {
                continue;
            };
            let x = match latest[k] {
                None => inputs[k],
                Some((prev, v)) => {
                    debug_assert_eq!(prev + 1, stage);
                    tape.max_pool2(v)?
                }
            };
            let f = conv_stage(tape, vars, cfg, stage, x)?;
            latest[k] = Some((stage, f));
            inputs[k] = f;
            here.push((k, f));
        }
        if level < 0 {
            continue;
        }
        let level = level as usize;
        let feats: Vec<Var> = here.iter().map(|&(_, v)| v).collect();
        if level < SIDE_LEVELS {
            debug_assert_eq!(groups[level].len(), feats.len());
            let refined = if options.sfem && feats.len() >= 2 {
                let n = feats.len();
                let ws = (0..n * n)
                    .map(|q| {
                        let (i, j) = (q / n, q % n);
                        (i != j)
                            .then(|| vars.get(&SfemParams::tensor_name(level, i, j)))
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?;
                sfem::mean_field_refine_on_tape(tape, &feats, &ws, cfg.sfem_iterations)?
            } else {
                feats
            };
            for (&(k, _), &r) in here.iter().zip(&refined) {
                let stage = latest[k].expect("just computed").0;
                latest[k] = Some((stage, r));
            }
            sides.push(density_head(tape, vars, level, &refined)?);
        } else {
            coarse = Some(density_head(tape, vars, level, &feats)?);
        }
    }
    let coarse = coarse.ok_or_else(|| Error::invalid("no coarse-level features"))?;
    let fusion = (0..=SIDE_LEVELS)
        .map(|i| vars.get(&fuse_name(i)))
        .collect::<Result<Vec<_>>>()?;
    let density = topdown_fuse_on_tape(tape, &sides, coarse, &fusion)?;
    Ok(ForwardVars {
        density,
        side_outputs: sides,
        coarse,
    })
}

fn squeeze(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = t.dims3()?;
    t.clone().reshape(&[h, w])
}

pub fn forward_with(
    image: &Tensor,
    params: &ModelParams,
    options: ForwardOptions,
) -> Result<ForwardOutput> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape, false);
    let out = forward_on_tape(&mut tape, image, params.config(), &vars, options)?;
    Ok(ForwardOutput {
        density: squeeze(tape.value(out.density))?,
        side_outputs: out
            .side_outputs
            .iter()
            .map(|&v| squeeze(tape.value(v)))
            .collect::<Result<_>>()?,
        coarse: squeeze(tape.value(out.coarse))?,
    })
}

/// Inference on a `[C, H, W]` image (H and W multiples of 16).
pub fn forward(image: &Tensor, params: &ModelParams) -> Result<ForwardOutput> {
    forward_with(image, params, ForwardOptions::default())
}

/// Estimated head count: the integral of a density map.
pub fn count(map: &Tensor) -> f64 {
    map.sum()
}

/// JSON stored next to an `NTB1` parameter file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: BackboneConfig,
    pub dms_ssim: DmsSsimConfig,
    pub config_hash: String,
}

pub fn config_hash(backbone: &BackboneConfig, dms_ssim: &DmsSsimConfig) -> Result<String> {
    let canonical = serde_json::to_string(&(backbone, dms_ssim))?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Sidecar path for a checkpoint file: same stem, `.json` extension.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    dms_ssim: &DmsSsimConfig,
) -> Result<()> {
    let path = path.as_ref();
    ntb::save(path, params.iter())?;
    let meta = CheckpointMeta {
        backbone: params.config().clone(),
        dms_ssim: dms_ssim.clone(),
        config_hash: config_hash(params.config(), dms_ssim)?,
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(side, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, DmsSsimConfig)> {
    let path = path.as_ref();
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = located(&side, serde_json::from_str(&text).map_err(Error::from))?;
    let expected = config_hash(&meta.backbone, &meta.dms_ssim)?;
    if expected != meta.config_hash {
        return Err(Error::ConfigMismatch(format!(
            "sidecar records hash {} but its configuration hashes to {expected}",
            meta.config_hash
        )));
    }
    let tensors = ntb::load(path)?;
    let params = located(path, ModelParams::from_tensors(&meta.backbone, tensors))?;
    Ok((params, meta.dms_ssim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            stage_widths: vec![2, 3, 3, 4],
            convs_per_stage: 1,
            head_width: 3,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn default_groups_follow_resolution() {
        let g = BackboneConfig::default().groups();
        // branch indices are 0-based, stages 1-based
        assert_eq!(g[0], vec![(0, 2), (1, 1)]);
        assert_eq!(g[1], vec![(0, 3), (1, 2), (2, 1)]);
        assert_eq!(g[2], vec![(0, 4), (1, 3), (2, 2)]);
        assert_eq!(g[3], vec![(1, 4), (2, 3)]);
        assert_eq!(BackboneConfig::default().coarse_members(), vec![(2, 4)]);
    }

    #[test]
    fn sixteen_mixing_tensors_by_default() {
        let layout = ModelParams::layout(&BackboneConfig::default()).unwrap();
        let n = layout.iter().filter(|(n, _)| n.starts_with("sfem")).count();
        assert_eq!(n, 2 + 6 + 6 + 2);
        let backbone = layout
            .iter()
            .filter(|(n, _)| n.starts_with("backbone."))
            .count();
        assert_eq!(backbone, 4 * 2 * 2);
        // group 0 pairs a stage-2 feature (32 ch) with a stage-1 feature (16 ch)
        let w01 = layout.iter().find(|(n, _)| n == "sfem0.w_0_1").unwrap();
        assert_eq!(w01.1, vec![32, 16]);
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        c.pyramid_scales = vec![1.0, 2.0];
        assert!(c.validate().is_err());
        c.pyramid_scales = vec![1.5, 0.5];
        assert!(c.validate().is_err());
        c.pyramid_scales = vec![2.0, 1.0, 0.5, 0.25];
        assert!(c.validate().is_ok());
    }

    #[test]
    fn pyramid_of_a_constant() {
        let img = Tensor::full(&[1, 32, 48], 0.3);
        let p = build_pyramid(&img, &[2.0, 1.0, 0.5]).unwrap();
        assert_eq!(p[0].shape(), &[1, 64, 96]);
        assert_eq!(p[1], img);
        assert_eq!(p[2].shape(), &[1, 16, 24]);
        for t in &p {
            assert!(t.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
        }
        assert!(build_pyramid(&Tensor::zeros(&[1, 30, 32]), &[1.0])
            .unwrap_err()
            .to_string()
            .contains("16"));
    }

    #[test]
    fn ramp_downsample_matches_convention() {
        let img = Tensor::from_fn(&[1, 16, 16], |i| (i % 16) as f64 * 2.0 + (i / 16) as f64);
        let p = build_pyramid(&img, &[0.5]).unwrap();
        // source coordinate 2j + 0.5 on each axis: the mean of a 2×2 block
        for y in 0..8 {
            for x in 0..8 {
                let expect = (2.0 * x as f64 + 0.5) * 2.0 + (2.0 * y as f64 + 0.5);
                assert!((p[0].at3(0, y, x) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shapes_and_near_zero_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::init(&tiny(), &mut rng).unwrap();
        let img = Tensor::from_fn(&[1, 32, 48], |_| rng.random_range(0.0..1.0));
        let out = forward(&img, &params).unwrap();
        assert_eq!(out.density.shape(), &[32, 48]);
        for (i, s) in out.side_outputs.iter().enumerate() {
            assert_eq!(s.shape(), &[32 >> i, 48 >> i]);
        }
        assert_eq!(out.coarse.shape(), &[2, 3]);
        assert!(out.density.max_abs() < 1e-3);
    }

    #[test]
    fn zero_sfem_equals_no_sfem() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ModelParams::init(
            &BackboneConfig {
                init_std: 0.1,
                ..tiny()
            },
            &mut rng,
        )
        .unwrap();
        for (name, t) in params.iter_mut() {
            if name.starts_with("sfem") {
                t.data_mut().fill(0.0);
            }
        }
        let img = Tensor::from_fn(&[1, 32, 32], |_| rng.random_range(0.0..1.0));
        let a = forward_with(&img, &params, ForwardOptions { sfem: true }).unwrap();
        let b = forward_with(&img, &params, ForwardOptions { sfem: false }).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.density), bits(&b.density));
    }

    #[test]
    fn fuse_pass_through_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sides: Vec<Tensor> = (0..4)
            .map(|i| Tensor::from_fn(&[1, 16 >> i, 16 >> i], |_| rng.random_range(-1.0..1.0)))
            .collect();
        let coarse = Tensor::from_fn(&[1, 1, 1], |_| 0.5);
        let zeros = vec![Tensor::zeros(&[1, 1, 3, 3]); 5];
        assert_eq!(
            topdown_fuse(&sides, &coarse, &zeros).unwrap().max_abs(),
            0.0
        );

        let mut ident = Tensor::zeros(&[1, 1, 3, 3]);
        ident.data_mut()[4] = 1.0;
        let mut w = vec![Tensor::zeros(&[1, 1, 3, 3]); 5];
        w[0] = ident;
        assert_eq!(topdown_fuse(&sides, &coarse, &w).unwrap(), sides[0]);

        assert!(topdown_fuse(&sides, &Tensor::zeros(&[1, 2, 2]), &w).is_err());
        assert!(topdown_fuse(&sides, &coarse, &w[1..]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ntb");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&tiny(), &mut rng).unwrap();
        save_checkpoint(&path, &params, &DmsSsimConfig::default()).unwrap();
        let (back, loss) = load_checkpoint(&path).unwrap();
        assert_eq!(back, params);
        assert_eq!(loss, DmsSsimConfig::default());

        let side = sidecar_path(&path);
        let text = std::fs::read_to_string(&side)
            .unwrap()
            .replace("\"head_width\": 3", "\"head_width\": 4");
        std::fs::write(&side, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::ConfigMismatch(_))
        ));
    }
}
