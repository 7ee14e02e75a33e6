//! Synthetic scenes, crop sampling, Adam and the training/evaluation loop.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{self, AnnotationSet, DensityMap, SigmaConfig};
use crate::dms_ssim::{dms_ssim_loss_and_grad, DmsSsimConfig};
use crate::error::{Error, Result};
use crate::model::{self, BackboneConfig, ForwardOptions, ModelParams};
use crate::tape::GradTape;
use crate::tensor::Tensor;

// RNG streams, one per purpose.
const STREAM_INIT: u64 = 0;
const STREAM_TRAIN_SCENES: u64 = 1;
const STREAM_CROPS: u64 = 2;
const STREAM_VAL_SCENES: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub height: usize,
    pub width: usize,
    /// Inclusive range of the number of people.
    pub count_range: [usize; 2],
    /// Head radius at the top and bottom rows of the frame.
    pub radius_range: [f64; 2],
    pub background: f64,
    pub foreground: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            count_range: [5, 120],
            radius_range: [1.5, 4.0],
            background: 0.1,
            foreground: 0.9,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [r_min, r_max] = self.radius_range;
        if !(r_min >= 1.0) || !(r_max >= r_min) {
            return Err(Error::invalid(format!(
                "radius_range must satisfy 1 <= r_min <= r_max, got {:?}",
                self.radius_range
            )));
        }
        if self.count_range[0] > self.count_range[1] {
            return Err(Error::invalid(format!(
                "count_range {:?} is reversed",
                self.count_range
            )));
        }
        if ((2.0 * r_max).ceil() as usize) >= self.height.min(self.width) {
            return Err(Error::invalid(format!(
                "canvas {}x{} is too small for head radius {r_max}",
                self.height, self.width
            )));
        }
        if !(self.noise_std >= 0.0) || !self.background.is_finite() || !self.foreground.is_finite()
        {
            return Err(Error::invalid(
                "background, foreground and noise_std must be finite, noise_std >= 0",
            ));
        }
        Ok(())
    }

    fn radius_at(&self, y: f64) -> f64 {
        let [r_min, r_max] = self.radius_range;
        r_min + (r_max - r_min) * y / self.height as f64
    }
}

/// Draws a scene: flat background, one filled disc per person (larger towards
/// the bottom of the frame), then Gaussian noise, clamped to `[0, 1]`.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<(Tensor, AnnotationSet)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let n = rng.random_range(spec.count_range[0]..=spec.count_range[1]);
    let points: Vec<[f64; 2]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..w as f64),
                rng.random_range(0.0..h as f64),
            ]
        })
        .collect();

    let mut img = vec![spec.background; h * w];
    for &[x, y] in &points {
        let r = spec.radius_at(y);
        let rows = (y - r).floor().max(0.0) as usize..=((y + r).ceil() as usize).min(h - 1);
        for row in rows {
            let cols = (x - r).floor().max(0.0) as usize..=((x + r).ceil() as usize).min(w - 1);
            for col in cols {
                let (dx, dy) = (col as f64 - x, row as f64 - y);
                if dx * dx + dy * dy <= r * r {
                    img[row * w + col] = spec.foreground;
                }
            }
        }
    }
    if spec.noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.noise_std).expect("validated std");
        for v in &mut img {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Ok((
        Tensor::new(vec![1, h, w], img)?,
        AnnotationSet::new(w, h, points)?,
    ))
}

/// Cuts `count` crops at uniformly random offsets, the same window from the
/// `[C, H, W]` image and the `[H, W]` density.
pub fn sample_crops(
    image: &Tensor,
    density: &DensityMap,
    crop_size: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(Tensor, DensityMap)>> {
    let (c, h, w) = image.dims3()?;
    if (density.height(), density.width()) != (h, w) {
        return Err(Error::shape(format!(
            "image is {h}x{w} but density is {}x{}",
            density.height(),
            density.width()
        )));
    }
    let m = BackboneConfig::size_multiple();
    if crop_size == 0 || crop_size % m != 0 {
        return Err(Error::invalid(format!(
            "crop size {crop_size} is not a positive multiple of {m}"
        )));
    }
    if crop_size > h.min(w) {
        return Err(Error::invalid(format!(
            "crop size {crop_size} exceeds image {h}x{w}"
        )));
    }
    (0..count)
        .map(|_| {
            let top = rng.random_range(0..=h - crop_size);
            let left = rng.random_range(0..=w - crop_size);
            let channels = (0..c)
                .map(|ch| {
                    let plane = Tensor::new(
                        vec![h, w],
                        image.data()[ch * h * w..(ch + 1) * h * w].to_vec(),
                    )?;
                    plane.crop2(top, left, crop_size, crop_size)
                })
                .collect::<Result<Vec<_>>>()?;
            let data: Vec<f64> = channels.into_iter().flat_map(Tensor::into_data).collect();
            let img = Tensor::new(vec![c, crop_size, crop_size], data)?;
            let den = DensityMap::new(density.values().crop2(top, left, crop_size, crop_size)?)?;
            Ok((img, den))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// The rate used for a pretrained full-size backbone.
    pub fn full_size_preset() -> Self {
        Self {
            lr: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::invalid(format!(
                "invalid optimizer settings {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: IndexMap<String, Tensor> = params
            .iter()
            .map(|(k, t)| (k.to_owned(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

pub type ParamGrads = IndexMap<String, Tensor>;

/// One bias-corrected Adam update. Every parameter must have a gradient of
/// matching shape; nothing is modified otherwise.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no gradient for trainable tensor {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !state.m.contains_key(name) || !state.v.contains_key(name) {
            return Err(Error::invalid(format!("optimizer state lacks {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (((pk, &gk), mk), vk) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mk = cfg.beta1 * *mk + (1.0 - cfg.beta1) * gk;
            *vk = cfg.beta2 * *vk + (1.0 - cfg.beta2) * gk * gk;
            *pk -= cfg.lr * (*mk / bc1) / ((*vk / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "dms-ssim")]
    DmsSsim,
    /// The same loss with every dilation set to one.
    #[serde(rename = "ms-ssim")]
    MsSsim,
    /// Mean squared pixel error.
    #[serde(rename = "euclidean")]
    Euclidean,
}

/// Raw densities sit around 1e-2 per pixel, where `c1` and `c2` swamp the
/// SSIM terms; scaling by 100 brings them to order one.
fn default_density_scale() -> f64 {
    100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default)]
    pub dms_ssim: DmsSsimConfig,
    /// Also supervise `M̃_1..M̃_3` against sum-pooled ground truth, and `M̃_0` against it directly.
    #[serde(default)]
    pub side_supervision: bool,
    /// Both maps are multiplied by this before the loss is evaluated.
    #[serde(default = "default_density_scale")]
    pub density_scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::DmsSsim,
            dms_ssim: DmsSsimConfig::default(),
            side_supervision: false,
            density_scale: default_density_scale(),
        }
    }
}

impl LossConfig {
    /// Configuration actually used for the SSIM-style kinds.
    pub fn effective_ssim(&self) -> DmsSsimConfig {
        match self.kind {
            LossKind::MsSsim => DmsSsimConfig {
                dilations: vec![1; self.dms_ssim.m],
                ..self.dms_ssim.clone()
            },
            _ => self.dms_ssim.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.density_scale > 0.0) || !self.density_scale.is_finite() {
            return Err(Error::invalid("density_scale must be positive and finite"));
        }
        self.effective_ssim().validate()
    }

    /// Loss value and `∂loss/∂pred` for one `[H, W]` pair.
    pub fn loss_and_grad(&self, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
        let s = self.density_scale;
        let (x, y) = (pred.scale(s), target.scale(s));
        match self.kind {
            LossKind::Euclidean => {
                let d = x.sub(&y)?;
                let n = d.numel() as f64;
                let loss = d.data().iter().map(|v| v * v).sum::<f64>() / n;
                Ok((loss, d.scale(2.0 * s / n)))
            }
            _ => {
                let (out, g) = dms_ssim_loss_and_grad(&x, &y, &self.effective_ssim())?;
                Ok((out.loss, g.scale(s)))
            }
        }
    }
}

fn default_train_scenes() -> usize {
    64
}
fn default_val_scenes() -> usize {
    8
}
fn default_val_every() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub scene: SyntheticSceneSpec,
    #[serde(default)]
    pub sigma: SigmaConfig,
    #[serde(default = "default_train_scenes")]
    pub train_scenes: usize,
    #[serde(default = "default_val_scenes")]
    pub val_scenes: usize,
    pub crop_size: usize,
    pub batch_size: usize,
    /// Validation period in steps; the last step is always validated.
    #[serde(default = "default_val_every")]
    pub val_every: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: SyntheticSceneSpec::default(),
            sigma: SigmaConfig::default(),
            train_scenes: 64,
            val_scenes: 8,
            crop_size: 96,
            batch_size: 4,
            val_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: BackboneConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64, checkpoint_dir: impl Into<PathBuf>) -> Self {
        Self {
            model: BackboneConfig::default(),
            loss: LossConfig::default(),
            data: DataConfig::default(),
            optimizer: AdamConfig::default(),
            steps,
            seed,
            checkpoint_dir: checkpoint_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.data.scene.validate()?;
        let d = &self.data;
        if d.batch_size == 0 || d.train_scenes == 0 || d.val_every == 0 {
            return Err(Error::invalid(
                "batch_size, train_scenes and val_every must be positive",
            ));
        }
        if d.crop_size < self.loss.effective_ssim().min_map_size()
            && self.loss.kind != LossKind::Euclidean
        {
            return Err(Error::invalid(format!(
                "crop size {} is below the loss minimum {}",
                d.crop_size,
                self.loss.effective_ssim().min_map_size()
            )));
        }
        if d.crop_size > d.scene.height.min(d.scene.width)
            || d.crop_size % BackboneConfig::size_multiple() != 0
        {
            return Err(Error::invalid(format!(
                "crop size {} must be a multiple of {} no larger than the scene",
                d.crop_size,
                BackboneConfig::size_multiple()
            )));
        }
        if d.scene.height % BackboneConfig::size_multiple() != 0
            || d.scene.width % BackboneConfig::size_multiple() != 0
        {
            return Err(Error::invalid(
                "scene size must be a multiple of 16 for validation",
            ));
        }
        Ok(())
    }
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogRecord {
    Step {
        step: usize,
        loss: f64,
        lr: f64,
        wall_ms: f64,
    },
    Validation {
        step: usize,
        val_mae: f64,
        val_mse: f64,
    },
}

/// An image with its annotations and rendered ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor,
    pub annotations: AnnotationSet,
    pub density: DensityMap,
}

impl Sample {
    pub fn new(image: Tensor, annotations: AnnotationSet, sigma: &SigmaConfig) -> Result<Self> {
        let density = density::ground_truth(&annotations, sigma)?.map;
        Ok(Self {
            image,
            annotations,
            density,
        })
    }

    pub fn count(&self) -> usize {
        self.annotations.len()
    }
}

fn scene_seeds(seed: u64, stream_id: u64, n: usize) -> Vec<u64> {
    let mut rng = stream(seed, stream_id);
    (0..n).map(|_| rng.random()).collect()
}

pub fn generate_samples(
    spec: &SyntheticSceneSpec,
    sigma: &SigmaConfig,
    seeds: &[u64],
) -> Result<Vec<Sample>> {
    seeds
        .par_iter()
        .map(|&s| {
            let (img, ann) = generate_scene(&spec.with_seed(s))?;
            Sample::new(img, ann, sigma)
        })
        .collect()
}

/// Training and validation scenes for `cfg`; the two seed streams are disjoint.
pub fn datasets(cfg: &TrainConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = generate_samples(
        &cfg.data.scene,
        &cfg.data.sigma,
        &scene_seeds(cfg.seed, STREAM_TRAIN_SCENES, cfg.data.train_scenes),
    )?;
    let val = generate_samples(
        &cfg.data.scene,
        &cfg.data.sigma,
        &scene_seeds(cfg.seed, STREAM_VAL_SCENES, cfg.data.val_scenes),
    )?;
    Ok((train, val))
}

pub fn init_params(cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(&cfg.model, &mut stream(cfg.seed, STREAM_INIT))
}

/// Sums non-overlapping `f×f` blocks of an `[H, W]` map.
pub fn sum_pool(map: &Tensor, f: usize) -> Result<Tensor> {
    let (h, w) = map.dims2()?;
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} is not divisible into {f}x{f} blocks"
        )));
    }
    let (oh, ow) = (h / f, w / f);
    let mut out = vec![0.0; oh * ow];
    for r in 0..h {
        for c in 0..w {
            out[(r / f) * ow + c / f] += map.at2(r, c);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Loss and parameter gradients for one crop.
pub fn sample_loss_and_grads(
    params: &ModelParams,
    loss: &LossConfig,
    image: &Tensor,
    target: &Tensor,
) -> Result<(f64, ParamGrads)> {
    let mut tape = GradTape::new();
    let vars = params.register(&mut tape, true);
    let out = model::forward_on_tape(
        &mut tape,
        image,
        params.config(),
        &vars,
        ForwardOptions::default(),
    )?;
    let (h, w) = target.dims2()?;

    let mut outputs = vec![(out.density, target.clone())];
    if loss.side_supervision {
        for (i, &side) in out.side_outputs.iter().enumerate() {
            outputs.push((side, sum_pool(target, 1 << i)?));
        }
    }
    let mut total = 0.0;
    let mut proxy = None;
    for (v, y) in outputs {
        let x = tape.value(v).clone();
        let (_, xh, xw) = x.dims3()?;
        let (l, g) = loss.loss_and_grad(&x.reshape(&[xh, xw])?, &y)?;
        total += l;
        // Σ g ⊙ out has gradient g with respect to out.
        let seed = tape.constant(g.reshape(&[1, xh, xw])?);
        let prod = tape.mul(v, seed)?;
        let s = tape.sum(prod);
        proxy = Some(match proxy {
            None => s,
            Some(p) => tape.add(p, s)?,
        });
    }
    debug_assert_eq!(tape.value(out.density).shape(), &[1, h, w]);
    let mut grads = tape.backward(proxy.expect("at least one output"))?;
    let mut out_grads = IndexMap::with_capacity(params.len());
    for (name, var) in vars.iter() {
        out_grads.insert(name.to_owned(), grads.take(var)?);
    }
    Ok((total, out_grads))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(ground truth, estimate)` per image.
    pub per_image: Vec<(f64, f64)>,
    pub mae: f64,
    /// Root-mean-square count error.
    pub mse: f64,
}

impl EvalReport {
    pub fn from_counts(per_image: Vec<(f64, f64)>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::invalid("cannot evaluate an empty dataset"));
        }
        let n = per_image.len() as f64;
        let mae = per_image.iter().map(|(p, q)| (q - p).abs()).sum::<f64>() / n;
        let mse = (per_image
            .iter()
            .map(|(p, q)| (q - p) * (q - p))
            .sum::<f64>()
            / n)
            .sqrt();
        if !(mae.is_finite() && mse.is_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        // power-mean inequality, up to rounding
        debug_assert!(mae <= mse * (1.0 + 1e-12) + 1e-300);
        Ok(Self {
            per_image,
            mae,
            mse,
        })
    }

    pub fn len(&self) -> usize {
        self.per_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_image.is_empty()
    }
}

/// Counts every image with the model and scores them against the annotations.
pub fn evaluate(params: &ModelParams, dataset: &[(Tensor, AnnotationSet)]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let pairs = dataset
        .par_iter()
        .map(|(img, ann)| {
            let out = model::forward(img, params)?;
            Ok((ann.len() as f64, model::count(&out.density)))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_counts(pairs)
}

/// MAE of always predicting the mean training count.
pub fn mean_count_baseline(train_counts: &[f64], eval_counts: &[f64]) -> Result<EvalReport> {
    if train_counts.is_empty() {
        return Err(Error::invalid("no training counts for the baseline"));
    }
    let mean = train_counts.iter().sum::<f64>() / train_counts.len() as f64;
    EvalReport::from_counts(eval_counts.iter().map(|&c| (c, mean)).collect())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogRecord>,
    /// Lowest validation MAE seen, if any validation ran.
    pub best_val_mae: Option<f64>,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: PathBuf,
    /// Mean-count baseline on the validation scenes.
    pub baseline: Option<EvalReport>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ntb";
pub const BEST_CHECKPOINT: &str = "best.ntb";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ntb";
pub const VAL_DIR: &str = "val";

/// Writes `(image, annotations)` pairs as `<name>.dmp` + `<name>.json`.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let (_, h, w) = s.image.dims3()?;
        let stem = format!("scene_{i:04}");
        density::write_map(
            dir.join(format!("{stem}.dmp")),
            &s.image.clone().reshape(&[h, w])?,
        )?;
        density::write_annotations(dir.join(format!("{stem}.json")), &s.annotations)?;
    }
    Ok(())
}

/// Reads every `<name>.json` in `dir` together with its `<name>.dmp` image.
pub fn load_dataset(dir: &Path) -> Result<Vec<(Tensor, AnnotationSet)>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    stems.sort();
    let mut out = Vec::with_capacity(stems.len());
    for ann_path in stems {
        let ann = density::read_annotations(&ann_path)?;
        let img = density::read_map(ann_path.with_extension("dmp"))?;
        let (h, w) = img.dims2()?;
        if (h, w) != (ann.height, ann.width) {
            return Err(Error::shape(format!(
                "{}: image is {h}x{w} but annotations declare {}x{}",
                ann_path.display(),
                ann.height,
                ann.width
            )));
        }
        out.push((img.reshape(&[1, h, w])?, ann));
    }
    Ok(out)
}

fn as_eval_set(samples: &[Sample]) -> Vec<(Tensor, AnnotationSet)> {
    samples
        .iter()
        .map(|s| (s.image.clone(), s.annotations.clone()))
        .collect()
}

/// Runs the full loop and writes the log, `best`/`final` checkpoints and
/// the validation scenes under `checkpoint_dir`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = &cfg.checkpoint_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let mut log_file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut params = init_params(cfg)?;
    let loss_cfg = cfg.loss.effective_ssim();
    let final_path = dir.join(FINAL_CHECKPOINT);
    let mut log = Vec::new();
    if cfg.steps == 0 {
        model::save_checkpoint(&final_path, &params, &loss_cfg)?;
        return Ok(TrainOutcome {
            params,
            log,
            best_val_mae: None,
            final_checkpoint: final_path,
            best_checkpoint: None,
            log_path,
            baseline: None,
        });
    }

    let (train_set, val_set) = datasets(cfg)?;
    export_dataset(&dir.join(VAL_DIR), &val_set)?;
    let val_eval = as_eval_set(&val_set);
    let train_counts: Vec<f64> = train_set.iter().map(|s| s.count() as f64).collect();
    let val_counts: Vec<f64> = val_set.iter().map(|s| s.count() as f64).collect();
    let baseline = if val_set.is_empty() {
        None
    } else {
        Some(mean_count_baseline(&train_counts, &val_counts)?)
    };

    let mut state = AdamState::new(&params);
    let mut crop_rng = stream(cfg.seed, STREAM_CROPS);
    let mut best: Option<f64> = None;
    let best_path = dir.join(BEST_CHECKPOINT);
    let mut emit = |rec: LogRecord, log: &mut Vec<LogRecord>| -> Result<()> {
        let line = serde_json::to_string(&rec)?;
        writeln!(log_file, "{line}").map_err(|e| Error::io(&log_path, e))?;
        log.push(rec);
        Ok(())
    };

    for step in 1..=cfg.steps {
        let started = Instant::now();
        let mut batch = Vec::with_capacity(cfg.data.batch_size);
        for _ in 0..cfg.data.batch_size {
            let s = &train_set[crop_rng.random_range(0..train_set.len())];
            batch.extend(sample_crops(
                &s.image,
                &s.density,
                cfg.data.crop_size,
                1,
                &mut crop_rng,
            )?);
        }
        let results = batch
            .par_iter()
            .map(|(img, den)| sample_loss_and_grads(&params, &cfg.loss, img, den.values()))
            .collect::<Result<Vec<_>>>()?;

        let inv = 1.0 / results.len() as f64;
        let mut loss = 0.0;
        let mut grads: ParamGrads = IndexMap::new();
        for (l, g) in results {
            loss += l * inv;
            for (name, t) in g {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_scaled(&t, inv)?,
                    None => {
                        grads.insert(name, t.scale(inv));
                    }
                }
            }
        }
        if !loss.is_finite() || !grads.values().all(Tensor::all_finite) {
            model::save_checkpoint(dir.join(LAST_GOOD_CHECKPOINT), &params, &loss_cfg)?;
            return Err(Error::NonFinite { step });
        }
        let before = params.clone();
        adam_step(&mut params, &grads, &mut state, &cfg.optimizer)?;
        if !params.all_finite() {
            model::save_checkpoint(dir.join(LAST_GOOD_CHECKPOINT), &before, &loss_cfg)?;
            return Err(Error::NonFinite { step });
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        emit(
            LogRecord::Step {
                step,
                loss,
                lr: cfg.optimizer.lr,
                wall_ms,
            },
            &mut log,
        )?;
        log::debug!("step {step}: loss {loss:.6} ({wall_ms:.0} ms)");

        if !val_eval.is_empty() && (step % cfg.data.val_every == 0 || step == cfg.steps) {
            let report = evaluate(&params, &val_eval)?;
            log::info!(
                "step {step}: val MAE {:.3}, MSE {:.3}",
                report.mae,
                report.mse
            );
            emit(
                LogRecord::Validation {
                    step,
                    val_mae: report.mae,
                    val_mse: report.mse,
                },
                &mut log,
            )?;
            if best.map_or(true, |b| report.mae < b) {
                best = Some(report.mae);
                model::save_checkpoint(&best_path, &params, &loss_cfg)?;
            }
        }
    }
    model::save_checkpoint(&final_path, &params, &loss_cfg)?;
    Ok(TrainOutcome {
        params,
        log,
        best_val_mae: best,
        final_checkpoint: final_path,
        best_checkpoint: best.map(|_| best_path),
        log_path,
        baseline,
    })
}

/// Training losses in log order.
pub fn step_losses(log: &[LogRecord]) -> Vec<f64> {
    log.iter()
        .filter_map(|r| match r {
            LogRecord::Step { loss, .. } => Some(*loss),
            LogRecord::Validation { .. } => None,
        })
        .collect()
}

/// Trailing moving average ending at 1-based `step`.
pub fn moving_average(losses: &[f64], step: usize, window: usize) -> Option<f64> {
    if step == 0 || step > losses.len() || window == 0 {
        return None;
    }
    let lo = step.saturating_sub(window);
    let w = &losses[lo..step];
    Some(w.iter().sum::<f64>() / w.len() as f64)
}
