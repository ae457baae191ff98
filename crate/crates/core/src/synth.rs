//! Procedural test images: one folder per class, each class drawn with its
//! own fur colors and stripe pattern on a random neutral background.
//!
//! Class signatures differ in hue, so the per-class mean color alone
//! separates the classes when they are few.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::encode_png;
use crate::rng;

pub const MIN_CLASSES: usize = 2;
pub const MIN_PER_CLASS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    /// Images per class; ignored when `total` is set.
    pub per_class: usize,
    /// Spread this many images over the classes as evenly as possible.
    pub total: Option<usize>,
    pub size: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            per_class: 20,
            total: None,
            size: 96,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Image count of each class; earlier classes take the remainder.
    pub fn counts(&self) -> Vec<usize> {
        match self.total {
            Some(t) => {
                let (q, r) = (t / self.classes.max(1), t % self.classes.max(1));
                (0..self.classes).map(|c| q + usize::from(c < r)).collect()
            }
            None => vec![self.per_class; self.classes],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < MIN_CLASSES {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_CLASSES} classes, got {}",
                self.classes
            )));
        }
        let smallest = self.counts().into_iter().min().unwrap_or(0);
        if smallest < MIN_PER_CLASS {
            return Err(Error::InvalidArgument(format!(
                "need at least {MIN_PER_CLASS} images per class, got {smallest}"
            )));
        }
        if !(16..=1024).contains(&self.size) {
            return Err(Error::InvalidArgument(format!("image size {} outside 16..=1024", self.size)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub classes: usize,
    pub images: usize,
    pub files: Vec<PathBuf>,
}

/// Fur colors and stripe geometry of class `c` out of `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Signature {
    pub primary: [f32; 3],
    pub secondary: [f32; 3],
    pub stripe_angle: f32,
    pub stripe_period: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn signature(c: usize, k: usize) -> Signature {
    let h = c as f32 / k as f32;
    // Golden-ratio steps keep neighbouring classes' patterns apart.
    let g = (c as f32 * 0.618_034).fract();
    Signature {
        primary: hsv(h, 0.85, 0.9),
        secondary: hsv(h + 0.5, 0.6, 0.35),
        stripe_angle: g * std::f32::consts::PI,
        stripe_period: 6.0 + 10.0 * (c as f32 * 0.414_214).fract(),
    }
}

pub fn class_dir_name(c: usize) -> String {
    format!("cat{c:04}")
}

/// Draw image `i` of class `c`.
pub fn draw(cfg: &SynthConfig, c: usize, i: usize) -> RgbImage {
    let sig = signature(c, cfg.classes);
    let mut r = rng::substream(cfg.seed, "synth", &[c as u64, i as u64]);
    let s = cfg.size as f32;
    let gray: f32 = r.random_range(0.3..0.7);
    let tint: [f32; 3] = std::array::from_fn(|_| r.random_range(-0.04..0.04));
    let (cx, cy) = (s * r.random_range(0.4..0.6), s * r.random_range(0.45..0.65));
    let (rx, ry) = (s * r.random_range(0.28..0.36), s * r.random_range(0.2..0.28));
    let head = (cx + rx * r.random_range(-0.6..0.6), cy - ry * 1.2, s * r.random_range(0.12..0.16));
    let phase: f32 = r.random_range(0.0..sig.stripe_period);
    let (sin, cos) = sig.stripe_angle.sin_cos();

    let mut img = RgbImage::new(cfg.size, cfg.size);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
        let body = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2) <= 1.0;
        let in_head = (fx - head.0).powi(2) + (fy - head.1).powi(2) <= head.2 * head.2;
        let noise: f32 = r.random_range(-0.03..0.03);
        let rgb: [f32; 3] = if body || in_head {
            let u = fx * cos + fy * sin + phase;
            let stripe = (u / sig.stripe_period).fract() < 0.3;
            if stripe { sig.secondary } else { sig.primary }
        } else {
            std::array::from_fn(|k| gray + tint[k])
        };
        *px = Rgb(rgb.map(|v| ((v + noise).clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    img
}

/// Write the dataset under `out_dir` as `cat0000/img0000.png`, etc.
/// Same config, same bytes.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    cfg.validate()?;
    let mut files = Vec::new();
    for (c, n) in cfg.counts().into_iter().enumerate() {
        let dir = out_dir.join(class_dir_name(c));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for i in 0..n {
            let path = dir.join(format!("img{i:04}.png"));
            let bytes = encode_png(&draw(cfg, c, i))?;
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            files.push(path);
        }
    }
    Ok(SynthSummary {
        classes: cfg.classes,
        images: files.len(),
        files,
    })
}
