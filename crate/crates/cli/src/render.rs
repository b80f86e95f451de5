//! Overlay rendering with a fixed instance palette.

use dloseg::mask::BinaryMask;
use image::{Rgb, RgbImage};

/// Instance colours, indexed by mask slot modulo the palette length.
pub const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [170, 110, 40],
];

const ALPHA: f64 = 0.55;

pub fn color(index: usize) -> [u8; 3] {
    PALETTE[index % PALETTE.len()]
}

/// Blends each `(slot, mask)` over `image`; later masks are drawn on top.
pub fn overlay(image: &RgbImage, masks: &[(usize, BinaryMask)]) -> RgbImage {
    let mut out = image.clone();
    for (slot, mask) in masks {
        let c = color(*slot);
        for (x, y, p) in out.enumerate_pixels_mut() {
            if mask.get(y as usize, x as usize) {
                let mut v = [0u8; 3];
                for k in 0..3 {
                    v[k] = (p.0[k] as f64 * (1.0 - ALPHA) + c[k] as f64 * ALPHA).round() as u8;
                }
                *p = Rgb(v);
            }
        }
    }
    out
}
