//! Seeded train-time augmentation and the deterministic eval transform.
//!
//! Train stages run in a fixed order: horizontal flip, rotation,
//! translation, Gaussian blur, Gaussian noise, color jitter, random
//! perspective, cutout, normalization. Stages whose probability or magnitude
//! is zero are left out entirely, so a zeroed config reduces to
//! normalization alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::FloatImage;
use crate::rng::{self, StreamRng};

/// Channel statistics of the ImageNet training set, which every registered
/// backbone was pretrained on.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoutConfig {
    pub count: usize,
    pub max_side_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerspectiveConfig {
    pub distortion_scale: f64,
    pub p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormalizeConfig {
    pub fn identity() -> Self {
        NormalizeConfig {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        NormalizeConfig {
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub hflip_p: f64,
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    /// Maximum shift as a fraction of width/height.
    pub translate_frac: f64,
    pub blur_sigma_range: (f64, f64),
    pub blur_p: f64,
    /// Noise standard deviation as a fraction of the [0, 1] range.
    pub noise_sigma: f64,
    pub noise_p: f64,
    pub jitter: Jitter,
    pub cutout: CutoutConfig,
    pub perspective: PerspectiveConfig,
    pub normalize: NormalizeConfig,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            hflip_p: 0.5,
            rotation_deg: 15.0,
            translate_frac: 0.1,
            blur_sigma_range: (0.1, 2.0),
            blur_p: 0.3,
            noise_sigma: 0.01,
            noise_p: 0.3,
            jitter: Jitter {
                brightness: 0.2,
                contrast: 0.2,
                saturation: 0.2,
                hue: 0.05,
            },
            cutout: CutoutConfig {
                count: 1,
                max_side_frac: 0.25,
            },
            perspective: PerspectiveConfig {
                distortion_scale: 0.3,
                p: 0.5,
            },
            normalize: NormalizeConfig::default(),
        }
    }
}

impl AugmentConfig {
    /// Every stochastic stage disabled; normalization kept.
    pub fn disabled() -> Self {
        AugmentConfig {
            hflip_p: 0.0,
            rotation_deg: 0.0,
            translate_frac: 0.0,
            blur_sigma_range: (0.0, 0.0),
            blur_p: 0.0,
            noise_sigma: 0.0,
            noise_p: 0.0,
            jitter: Jitter {
                brightness: 0.0,
                contrast: 0.0,
                saturation: 0.0,
                hue: 0.0,
            },
            cutout: CutoutConfig {
                count: 0,
                max_side_frac: 0.25,
            },
            perspective: PerspectiveConfig {
                distortion_scale: 0.0,
                p: 0.0,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("augment: {msg}")));
        for (name, p) in [
            ("hflip_p", self.hflip_p),
            ("blur_p", self.blur_p),
            ("noise_p", self.noise_p),
            ("perspective.p", self.perspective.p),
            ("perspective.distortion_scale", self.perspective.distortion_scale),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if !(self.rotation_deg >= 0.0) {
            return bad(format!("rotation_deg = {} must be >= 0", self.rotation_deg));
        }
        if !(0.0..1.0).contains(&self.translate_frac) {
            return bad(format!("translate_frac = {} outside [0, 1)", self.translate_frac));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && hi >= lo) {
            return bad(format!("blur_sigma_range ({lo}, {hi}) must satisfy 0 <= lo <= hi"));
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma = {} must be >= 0", self.noise_sigma));
        }
        let j = &self.jitter;
        if !(j.brightness >= 0.0 && j.contrast >= 0.0 && j.saturation >= 0.0) {
            return bad("jitter brightness/contrast/saturation must be >= 0".into());
        }
        if !(0.0..=0.5).contains(&j.hue) {
            return bad(format!("jitter hue = {} outside [0, 0.5]", j.hue));
        }
        if !(self.cutout.max_side_frac > 0.0 && self.cutout.max_side_frac <= 1.0) {
            return bad(format!(
                "cutout.max_side_frac = {} outside (0, 1]",
                self.cutout.max_side_frac
            ));
        }
        if self.normalize.std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalize.std components must be > 0".into());
        }
        Ok(())
    }
}

/// One image-to-image stage of a pipeline.
pub trait Transform: Send + Sync {
    fn name(&self) -> &'static str;

    fn is_stochastic(&self) -> bool {
        true
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng);
}

pub struct HorizontalFlip {
    pub p: f32,
}

impl Transform for HorizontalFlip {
    fn name(&self) -> &'static str {
        "hflip"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        if rng.random::<f32>() < self.p {
            let w = img.width;
            for c in 0..3 {
                for row in img.channel_mut(c).chunks_mut(w) {
                    row.reverse();
                }
            }
        }
    }
}

/// Resample through `src_of(x, y)` (output pixel center -> source pixel
/// center); samples falling outside the source become black.
fn warp(img: &FloatImage, src_of: impl Fn(f32, f32) -> (f32, f32)) -> FloatImage {
    let mut out = FloatImage::zeros(img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            let (sx, sy) = src_of(x as f32, y as f32);
            for c in 0..3 {
                if let Some(v) = img.sample_bilinear(c, sy, sx) {
                    out.set(c, y, x, v);
                }
            }
        }
    }
    out
}

pub struct Rotation {
    pub max_deg: f32,
}

impl Transform for Rotation {
    fn name(&self) -> &'static str {
        "rotation"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        let angle = rng.random_range(-self.max_deg..=self.max_deg).to_radians();
        let (sin, cos) = angle.sin_cos();
        let cx = (img.width as f32 - 1.0) / 2.0;
        let cy = (img.height as f32 - 1.0) / 2.0;
        *img = warp(img, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            (cos * dx + sin * dy + cx, -sin * dx + cos * dy + cy)
        });
    }
}

pub struct Translation {
    pub max_frac: f32,
}

impl Transform for Translation {
    fn name(&self) -> &'static str {
        "translation"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        let tx = rng.random_range(-self.max_frac..=self.max_frac) * img.width as f32;
        let ty = rng.random_range(-self.max_frac..=self.max_frac) * img.height as f32;
        *img = warp(img, |x, y| (x - tx, y - ty));
    }
}

pub struct GaussianBlur {
    pub sigma_range: (f32, f32),
    pub p: f32,
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

pub fn blur(img: &mut FloatImage, sigma: f32) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h) = (img.width, img.height);
    let mut tmp = vec![0.0f32; w * h];
    for c in 0..3 {
        let plane = img.channel_mut(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * plane[y * w + reflect(x as i64 + i as i64 - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[reflect(y as i64 + i as i64 - r, h) * w + x])
                    .sum();
            }
        }
    }
}

impl Transform for GaussianBlur {
    fn name(&self) -> &'static str {
        "gaussian_blur"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        if rng.random::<f32>() < self.p {
            let (lo, hi) = self.sigma_range;
            let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            if sigma > 0.0 {
                blur(img, sigma);
            }
        }
    }
}

pub struct GaussianNoise {
    pub sigma: f32,
    pub p: f32,
}

impl Transform for GaussianNoise {
    fn name(&self) -> &'static str {
        "gaussian_noise"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        if rng.random::<f32>() < self.p {
            let normal = Normal::new(0.0f32, self.sigma).expect("sigma >= 0");
            for v in img.data.iter_mut() {
                *v = (*v + normal.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
}

pub struct ColorJitter {
    pub jitter: Jitter,
}

fn luminance(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn factor(rng: &mut StreamRng, magnitude: f32) -> Option<f32> {
    (magnitude > 0.0).then(|| rng.random_range((1.0 - magnitude).max(0.0)..=1.0 + magnitude))
}

impl Transform for ColorJitter {
    fn name(&self) -> &'static str {
        "color_jitter"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        let j = self.jitter;
        let (brightness, contrast, saturation, hue) =
            (j.brightness as f32, j.contrast as f32, j.saturation as f32, j.hue as f32);
        let n = img.plane();
        if let Some(f) = factor(rng, brightness) {
            img.data.iter_mut().for_each(|v| *v = (*v * f).clamp(0.0, 1.0));
        }
        if let Some(f) = factor(rng, contrast) {
            let mean = (0..n)
                .map(|i| luminance(img.data[i], img.data[n + i], img.data[2 * n + i]))
                .sum::<f32>()
                / n as f32;
            img.data
                .iter_mut()
                .for_each(|v| *v = ((*v - mean) * f + mean).clamp(0.0, 1.0));
        }
        if let Some(f) = factor(rng, saturation) {
            for i in 0..n {
                let g = luminance(img.data[i], img.data[n + i], img.data[2 * n + i]);
                for c in 0..3 {
                    let v = &mut img.data[c * n + i];
                    *v = ((*v - g) * f + g).clamp(0.0, 1.0);
                }
            }
        }
        if hue > 0.0 {
            let shift = rng.random_range(-hue..=hue);
            for i in 0..n {
                let (h, s, v) = rgb_to_hsv(img.data[i], img.data[n + i], img.data[2 * n + i]);
                let (r, g, b) = hsv_to_rgb(h + shift, s, v);
                img.data[i] = r;
                img.data[n + i] = g;
                img.data[2 * n + i] = b;
            }
        }
    }
}

pub struct RandomPerspective {
    pub distortion_scale: f32,
    pub p: f32,
}

/// Homography taking each `from` point to the matching `to` point.
fn homography(from: &[(f32, f32); 4], to: &[(f32, f32); 4]) -> Option<[f64; 9]> {
    let mut a = [[0.0f64; 9]; 8];
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        let (x, y, u, v) = (x as f64, y as f64, u as f64, v as f64);
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gauss-Jordan with partial pivoting on the 8x8 system.
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        let div = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= div);
        for row in 0..8 {
            if row != col {
                let f = a[row][col];
                if f != 0.0 {
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
    }
    let mut h = [0.0; 9];
    for i in 0..8 {
        h[i] = a[i][8];
    }
    h[8] = 1.0;
    Some(h)
}

impl Transform for RandomPerspective {
    fn name(&self) -> &'static str {
        "perspective"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        if rng.random::<f32>() >= self.p {
            return;
        }
        let (w, h) = (img.width as f32 - 1.0, img.height as f32 - 1.0);
        let dx = (self.distortion_scale * img.width as f32 / 2.0).floor();
        let dy = (self.distortion_scale * img.height as f32 / 2.0).floor();
        let mut jitter = |d: f32| if d > 0.0 { rng.random_range(0.0..=d) } else { 0.0 };
        let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
        let moved = [
            (jitter(dx), jitter(dy)),
            (w - jitter(dx), jitter(dy)),
            (w - jitter(dx), h - jitter(dy)),
            (jitter(dx), h - jitter(dy)),
        ];
        // Output pixels live in the moved quad; look up where they came from.
        let Some(hm) = homography(&moved, &corners) else {
            return;
        };
        *img = warp(img, |x, y| {
            let (x, y) = (x as f64, y as f64);
            let z = hm[6] * x + hm[7] * y + hm[8];
            (
                ((hm[0] * x + hm[1] * y + hm[2]) / z) as f32,
                ((hm[3] * x + hm[4] * y + hm[5]) / z) as f32,
            )
        });
    }
}

pub struct Cutout {
    pub count: usize,
    pub max_side_frac: f32,
}

/// Black out `[x0, x0 + w) x [y0, y0 + h)`, clipped to the image.
pub fn apply_cutout_rect(img: &mut FloatImage, x0: i64, y0: i64, w: usize, h: usize) {
    let xs = x0.max(0) as usize..((x0 + w as i64).max(0) as usize).min(img.width);
    let ys = y0.max(0) as usize..((y0 + h as i64).max(0) as usize).min(img.height);
    for c in 0..3 {
        for y in ys.clone() {
            for x in xs.clone() {
                img.set(c, y, x, 0.0);
            }
        }
    }
}

impl Cutout {
    fn max_side(&self, extent: usize) -> usize {
        ((self.max_side_frac * extent as f32).floor() as usize).clamp(1, extent)
    }

    /// Rectangle `(x0, y0, w, h)`; the top-left corner ranges over every
    /// position where the rectangle still touches the image.
    pub fn sample_rect(&self, width: usize, height: usize, rng: &mut StreamRng) -> (i64, i64, usize, usize) {
        let w = rng.random_range(1..=self.max_side(width));
        let h = rng.random_range(1..=self.max_side(height));
        let x0 = rng.random_range(-(w as i64 - 1)..=width as i64 - 1);
        let y0 = rng.random_range(-(h as i64 - 1)..=height as i64 - 1);
        (x0, y0, w, h)
    }
}

impl Transform for Cutout {
    fn name(&self) -> &'static str {
        "cutout"
    }

    fn apply(&self, img: &mut FloatImage, rng: &mut StreamRng) {
        for _ in 0..self.count {
            let (x0, y0, w, h) = self.sample_rect(img.width, img.height, rng);
            apply_cutout_rect(img, x0, y0, w, h);
        }
    }
}

pub struct Normalize {
    pub cfg: NormalizeConfig,
}

impl Transform for Normalize {
    fn name(&self) -> &'static str {
        "normalize"
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn apply(&self, img: &mut FloatImage, _rng: &mut StreamRng) {
        for c in 0..3 {
            let (m, s) = (self.cfg.mean[c] as f32, self.cfg.std[c] as f32);
            img.channel_mut(c).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
    }
}

pub fn denormalize(img: &mut FloatImage, cfg: &NormalizeConfig) {
    for c in 0..3 {
        let (m, s) = (cfg.mean[c] as f32, cfg.std[c] as f32);
        img.channel_mut(c).iter_mut().for_each(|v| *v = *v * s + m);
    }
}

/// An ordered transform stack with its own random stream.
pub struct Pipeline {
    stages: Vec<Box<dyn Transform>>,
    seed: u64,
}

impl Pipeline {
    pub fn new(stages: Vec<Box<dyn Transform>>, seed: u64) -> Self {
        Pipeline { stages, seed }
    }

    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(|s| s.name()).collect()
    }

    pub fn is_stochastic(&self) -> bool {
        self.stages.iter().any(|s| s.is_stochastic())
    }

    /// Transform one sample. Randomness depends only on the pipeline seed,
    /// the epoch and the sample index, so any number of loader workers
    /// produce the same stream.
    pub fn apply(&self, img: &FloatImage, epoch: u64, sample: u64) -> FloatImage {
        let mut rng = rng::substream(self.seed, "augment", &[epoch, sample]);
        let mut out = img.clone();
        for stage in &self.stages {
            stage.apply(&mut out, &mut rng);
        }
        out
    }
}

pub fn build_train_pipeline(cfg: &AugmentConfig, seed: u64) -> Result<Pipeline> {
    cfg.validate()?;
    let mut stages: Vec<Box<dyn Transform>> = Vec::new();
    if cfg.hflip_p > 0.0 {
        stages.push(Box::new(HorizontalFlip { p: cfg.hflip_p as f32 }));
    }
    if cfg.rotation_deg > 0.0 {
        stages.push(Box::new(Rotation {
            max_deg: cfg.rotation_deg as f32,
        }));
    }
    if cfg.translate_frac > 0.0 {
        stages.push(Box::new(Translation {
            max_frac: cfg.translate_frac as f32,
        }));
    }
    if cfg.blur_p > 0.0 && cfg.blur_sigma_range.1 > 0.0 {
        stages.push(Box::new(GaussianBlur {
            sigma_range: (cfg.blur_sigma_range.0 as f32, cfg.blur_sigma_range.1 as f32),
            p: cfg.blur_p as f32,
        }));
    }
    if cfg.noise_p > 0.0 && cfg.noise_sigma > 0.0 {
        stages.push(Box::new(GaussianNoise {
            sigma: cfg.noise_sigma as f32,
            p: cfg.noise_p as f32,
        }));
    }
    let j = cfg.jitter;
    if j.brightness > 0.0 || j.contrast > 0.0 || j.saturation > 0.0 || j.hue > 0.0 {
        stages.push(Box::new(ColorJitter { jitter: j }));
    }
    if cfg.perspective.p > 0.0 && cfg.perspective.distortion_scale > 0.0 {
        stages.push(Box::new(RandomPerspective {
            distortion_scale: cfg.perspective.distortion_scale as f32,
            p: cfg.perspective.p as f32,
        }));
    }
    if cfg.cutout.count > 0 {
        stages.push(Box::new(Cutout {
            count: cfg.cutout.count,
            max_side_frac: cfg.cutout.max_side_frac as f32,
        }));
    }
    stages.push(Box::new(Normalize { cfg: cfg.normalize }));
    Ok(Pipeline::new(stages, seed))
}

pub fn build_eval_pipeline(cfg: &AugmentConfig) -> Result<Pipeline> {
    cfg.validate()?;
    Ok(Pipeline::new(vec![Box::new(Normalize { cfg: cfg.normalize })], 0))
}
