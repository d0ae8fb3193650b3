//! Stochastic view pipelines for the two views of the center frame and for
//! its temporal neighbors.
//!
//! Images are `C×H×W` tensors with values in `[0, 1]`. Every random quantity
//! comes from the caller's RNG, drawn in this fixed order:
//!
//! 1. resized crop (τ, τ′ only): per attempt a scale then a log-aspect ratio,
//!    then on success the top and left offsets;
//! 2. color jitter: an apply coin; if applied, the sub-transform order
//!    followed by brightness, contrast, saturation and hue factors;
//! 3. grayscale: an apply coin;
//! 4. blur (τ, τ′ only): an apply coin, then sigma when applied;
//! 5. solarize (τ′ only): an apply coin;
//! 6. horizontal flip (τ, τ′ only): an apply coin.
//!
//! Coins are always drawn, even for probability 0 or 1, so the stream stays
//! aligned across configurations.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::resample;

pub type Image = Tensor<f32>;

/// Luminance weights for RGB → gray.
const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// First center view: crop, jitter, grayscale, blur (always), flip.
    Tau,
    /// Second center view: crop, jitter, grayscale, blur (rare), solarize, flip.
    TauPrime,
    /// Neighbor frames: jitter and grayscale only.
    TauSecond,
}

impl std::str::FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(Pipeline::Tau),
            "tau_prime" => Ok(Pipeline::TauPrime),
            "tau_second" => Ok(Pipeline::TauSecond),
            other => Err(Error::contract(format!("unknown augmentation pipeline `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterStrengths {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl Default for JitterStrengths {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub pipeline: Pipeline,
    pub output_size: usize,
    pub crop_scale: (f64, f64),
    pub crop_ratio: (f64, f64),
    pub jitter: JitterStrengths,
    pub jitter_p: f64,
    pub grayscale_p: f64,
    pub blur_kernel: usize,
    pub blur_sigma: (f32, f32),
    pub blur_p: f64,
    pub solarize_threshold: f32,
    pub solarize_p: f64,
    pub flip_p: f64,
}

impl AugConfig {
    pub fn new(pipeline: Pipeline, output_size: usize) -> Self {
        let (blur_p, solarize_p) = match pipeline {
            Pipeline::Tau => (1.0, 0.0),
            Pipeline::TauPrime => (0.1, 0.2),
            Pipeline::TauSecond => (0.0, 0.0),
        };
        Self {
            pipeline,
            output_size,
            crop_scale: (0.08, 1.0),
            crop_ratio: (3.0 / 4.0, 4.0 / 3.0),
            jitter: JitterStrengths::default(),
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_kernel: 7,
            blur_sigma: (0.1, 0.2),
            blur_p,
            solarize_threshold: 120.0 / 255.0,
            solarize_p,
            flip_p: 0.5,
        }
    }

    /// Same pipeline with every random operation switched off and a full-frame
    /// crop, so the output equals the input.
    pub fn identity(pipeline: Pipeline, output_size: usize) -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            crop_ratio: (1.0, 1.0),
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            solarize_p: 0.0,
            flip_p: 0.0,
            ..Self::new(pipeline, output_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
            ("flip_p", self.flip_p),
        ];
        for (k, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("augment.{k}"), format!("{p} is not a probability")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config("augment.crop_scale", format!("({lo}, {hi}) not within (0, 1]")));
        }
        if self.output_size == 0 {
            return Err(Error::config("augment.output_size", "must be positive"));
        }
        Ok(())
    }
}

/// RNG for the augmentation of one sample: the global seed selects the key
/// and `global_seed ⊕ sample_index` the ChaCha stream.
pub fn sample_rng(global_seed: u64, sample_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    rng.set_stream(global_seed ^ sample_index);
    rng
}

fn dims(img: &Image) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

fn clamp01(img: &mut Image) {
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Crop window `(top, left, height, width)` following the usual
/// random-resized-crop sampler: ten attempts, then a ratio-clamped center crop.
fn crop_window(h: usize, w: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (ratio.0.ln(), ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale.0, scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < ratio.0 {
        ((w as f64 / ratio.0).round() as usize, w)
    } else if in_ratio > ratio.1 {
        (h, (h as f64 * ratio.1).round() as usize)
    } else {
        (h, w)
    };
    let (ch, cw) = (ch.clamp(1, h), cw.clamp(1, w));
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn uniform_f32(rng: &mut impl Rng, lo: f32, hi: f32) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Crops a random window and resizes it bilinearly to `size × size`.
pub fn random_resized_crop(img: &Image, size: usize, scale: (f64, f64), ratio: (f64, f64), rng: &mut impl Rng) -> Image {
    let (c, h, w) = dims(img);
    let (top, left, ch, cw) = crop_window(h, w, scale, ratio, rng);
    let mut out = Vec::with_capacity(c * size * size);
    for plane in img.data().chunks(h * w) {
        out.extend(resample::resize_plane(plane, w, top, left, ch, cw, size, size));
    }
    let mut t = Tensor::new(vec![c, size, size], out).expect("sized above");
    clamp01(&mut t);
    t
}

fn luminance_plane(img: &Image) -> Vec<f32> {
    let (c, h, w) = dims(img);
    let d = img.data();
    let hw = h * w;
    if c == 3 {
        (0..hw)
            .map(|i| LUMA[0] * d[i] + LUMA[1] * d[hw + i] + LUMA[2] * d[2 * hw + i])
            .collect()
    } else {
        (0..hw)
            .map(|i| (0..c).map(|ch| d[ch * hw + i]).sum::<f32>() / c as f32)
            .collect()
    }
}

/// Replaces every channel with the luminance.
pub fn grayscale(img: &Image) -> Image {
    let (c, h, w) = dims(img);
    let lum = luminance_plane(img);
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        data.extend_from_slice(&lum);
    }
    Tensor::new(vec![c, h, w], data).expect("same shape")
}

pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v *= factor);
    clamp01(&mut out);
    out
}

pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let lum = luminance_plane(img);
    let mean = lum.iter().sum::<f32>() / lum.len() as f32;
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = factor * *v + (1.0 - factor) * mean);
    clamp01(&mut out);
    out
}

/// Blends with the per-pixel grayscale. Only defined for 3-channel images;
/// other channel counts pass through.
pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    let (c, h, w) = dims(img);
    if c != 3 {
        return img.clone();
    }
    let lum = luminance_plane(img);
    let mut out = img.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let g = lum[i % (h * w)];
        *v = factor * *v + (1.0 - factor) * g;
    }
    clamp01(&mut out);
    out
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
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

/// Rotates hue by `shift` (fraction of a full turn). Only defined for
/// 3-channel images; other channel counts pass through.
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    let (c, h, w) = dims(img);
    if c != 3 || shift == 0.0 {
        return img.clone();
    }
    let hw = h * w;
    let mut out = img.clone();
    let d = out.data_mut();
    for i in 0..hw {
        let (hh, s, v) = rgb_to_hsv(d[i], d[hw + i], d[2 * hw + i]);
        let (r, g, b) = hsv_to_rgb(hh + shift, s, v);
        d[i] = r;
        d[hw + i] = g;
        d[2 * hw + i] = b;
    }
    clamp01(&mut out);
    out
}

/// Brightness, contrast, saturation and hue jitter in a random order.
pub fn color_jitter(img: &Image, strengths: &JitterStrengths, rng: &mut impl Rng) -> Image {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let b = uniform_f32(rng, (1.0 - strengths.brightness).max(0.0), 1.0 + strengths.brightness);
    let c = uniform_f32(rng, (1.0 - strengths.contrast).max(0.0), 1.0 + strengths.contrast);
    let s = uniform_f32(rng, (1.0 - strengths.saturation).max(0.0), 1.0 + strengths.saturation);
    let h = uniform_f32(rng, -strengths.hue, strengths.hue);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 => adjust_brightness(&out, b),
            1 => adjust_contrast(&out, c),
            2 => adjust_saturation(&out, s),
            _ => adjust_hue(&out, h),
        };
    }
    out
}

fn gaussian_kernel(size: usize, sigma: f32) -> Vec<f32> {
    let half = (size as f32 - 1.0) / 2.0;
    let k: Vec<f32> = (0..size)
        .map(|i| {
            let x = i as f32 - half;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f32 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with reflect padding, per channel.
pub fn gaussian_blur(img: &Image, kernel: usize, sigma: f32) -> Image {
    let (c, h, w) = dims(img);
    let k = gaussian_kernel(kernel, sigma);
    let r = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(c * h * w);
    for plane in img.data().chunks(h * w) {
        let mut tmp = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * plane[y * w + reflect(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                out.push(
                    k.iter()
                        .enumerate()
                        .map(|(j, &kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                        .sum(),
                );
            }
        }
    }
    let mut t = Tensor::new(vec![c, h, w], out).expect("same shape");
    clamp01(&mut t);
    t
}

/// Inverts pixels at or above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .filter(|v| **v >= threshold)
        .for_each(|v| *v = 1.0 - *v);
    out
}

pub fn hflip(img: &Image) -> Image {
    let (_, _, w) = dims(img);
    let mut out = img.clone();
    out.data_mut().chunks_mut(w).for_each(|row| row.reverse());
    out
}

fn coin(rng: &mut impl Rng, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Applies the configured pipeline.
pub fn apply_pipeline(cfg: &AugConfig, img: &Image, rng: &mut impl Rng) -> Result<Image> {
    if img.rank() != 3 {
        return Err(Error::Shape {
            op: "apply_pipeline",
            lhs: img.shape().to_vec(),
            rhs: vec![],
        });
    }
    let geometric = cfg.pipeline != Pipeline::TauSecond;
    let mut x = if geometric {
        random_resized_crop(img, cfg.output_size, cfg.crop_scale, cfg.crop_ratio, rng)
    } else {
        img.clone()
    };
    if coin(rng, cfg.jitter_p) {
        x = color_jitter(&x, &cfg.jitter, rng);
    }
    if coin(rng, cfg.grayscale_p) {
        x = grayscale(&x);
    }
    if geometric {
        if coin(rng, cfg.blur_p) {
            let sigma = uniform_f32(rng, cfg.blur_sigma.0, cfg.blur_sigma.1);
            x = gaussian_blur(&x, cfg.blur_kernel, sigma);
        }
        if cfg.pipeline == Pipeline::TauPrime && coin(rng, cfg.solarize_p) {
            x = solarize(&x, cfg.solarize_threshold);
        }
        if coin(rng, cfg.flip_p) {
            x = hflip(&x);
        }
    }
    Ok(x)
}
