//! Photometric training augmentations; geometry is never changed so masks stay valid.

use image::{imageops, Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_grayscale: f64,
    pub p_color_jitter: f64,
    /// Brightness, contrast and saturation factors are drawn from this range.
    pub jitter_range: (f64, f64),
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub p_noise: f64,
    /// Noise standard deviation in 8-bit units.
    pub noise_sigma: f64,
    pub p_patch: f64,
    /// Area fraction of the patch rectangle.
    pub patch_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_grayscale: 0.25,
            p_color_jitter: 0.25,
            jitter_range: (0.7, 1.3),
            p_blur: 0.25,
            blur_sigma: (0.5, 2.0),
            p_noise: 0.25,
            noise_sigma: 8.0,
            p_patch: 0.25,
            patch_fraction: 0.25,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            p_grayscale: 0.0,
            p_color_jitter: 0.0,
            p_blur: 0.0,
            p_noise: 0.0,
            p_patch: 0.0,
            ..Self::default()
        }
    }
}

fn luma(p: &Rgb<u8>) -> f64 {
    0.299 * p.0[0] as f64 + 0.587 * p.0[1] as f64 + 0.114 * p.0[2] as f64
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

pub fn grayscale(img: &mut RgbImage) {
    for p in img.pixels_mut() {
        let l = to_u8(luma(p));
        *p = Rgb([l, l, l]);
    }
}

pub fn color_jitter(img: &mut RgbImage, brightness: f64, contrast: f64, saturation: f64) {
    let mean = img.pixels().map(luma).sum::<f64>() / (img.width() * img.height()).max(1) as f64;
    for p in img.pixels_mut() {
        let mut c = p.0.map(|v| v as f64 * brightness);
        let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        for v in c.iter_mut() {
            *v = l + (*v - l) * saturation;
            *v = mean * brightness + (*v - mean * brightness) * contrast;
        }
        *p = Rgb(c.map(to_u8));
    }
}

fn add_noise(img: &mut RgbImage, sigma: f64, rect: (u32, u32, u32, u32), rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, sigma).expect("non-negative sigma");
    let (x0, y0, w, h) = rect;
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let p = img.get_pixel_mut(x, y);
            *p = Rgb(p.0.map(|v| to_u8(v as f64 + normal.sample(rng))));
        }
    }
}

fn blur_rect(img: &mut RgbImage, sigma: f32, rect: (u32, u32, u32, u32)) {
    let (x0, y0, w, h) = rect;
    let sub = imageops::crop_imm(img, x0, y0, w, h).to_image();
    let blurred = imageops::blur(&sub, sigma);
    imageops::replace(img, &blurred, x0 as i64, y0 as i64);
}

/// Applies each augmentation independently with its configured probability.
pub fn augment(image: &RgbImage, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let mut img = image.clone();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return img;
    }
    let full = (0, 0, w, h);
    if rng.random_bool(cfg.p_grayscale.clamp(0.0, 1.0)) {
        grayscale(&mut img);
    }
    if rng.random_bool(cfg.p_color_jitter.clamp(0.0, 1.0)) {
        let (lo, hi) = cfg.jitter_range;
        let mut f = || if hi > lo { rng.random_range(lo..hi) } else { lo };
        let (b, c, s) = (f(), f(), f());
        color_jitter(&mut img, b, c, s);
    }
    if rng.random_bool(cfg.p_blur.clamp(0.0, 1.0)) {
        let (lo, hi) = cfg.blur_sigma;
        let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
        blur_rect(&mut img, sigma as f32, full);
    }
    if rng.random_bool(cfg.p_noise.clamp(0.0, 1.0)) {
        add_noise(&mut img, cfg.noise_sigma, full, rng);
    }
    if rng.random_bool(cfg.p_patch.clamp(0.0, 1.0)) {
        let side = cfg.patch_fraction.clamp(0.0, 1.0).sqrt();
        let pw = ((w as f64 * side).round() as u32).clamp(1, w);
        let ph = ((h as f64 * side).round() as u32).clamp(1, h);
        let rect = (rng.random_range(0..=w - pw), rng.random_range(0..=h - ph), pw, ph);
        if rng.random_bool(0.5) {
            let (lo, hi) = cfg.blur_sigma;
            let sigma = if hi > lo { rng.random_range(lo..hi) } else { lo };
            blur_rect(&mut img, sigma as f32, rect);
        } else {
            add_noise(&mut img, cfg.noise_sigma, rect, rng);
        }
    }
    img
}
