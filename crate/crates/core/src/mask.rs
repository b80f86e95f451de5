//! Binary rasters and resampling helpers.

use image::{GrayImage, Luma};
use ndarray::Array2;

/// 8-bit inputs at or above this value are foreground.
pub const BINARIZE_THRESHOLD: u8 = 127;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Option<Self> {
        (data.len() == height * width).then_some(Self { height, width, data })
    }

    /// Foreground where the luma value is strictly above [`BINARIZE_THRESHOLD`].
    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = img.dimensions();
        let data = img.pixels().map(|p| p.0[0] > BINARIZE_THRESHOLD).collect();
        Self {
            height: h as usize,
            width: w as usize,
            data,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &BinaryMask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn union_all<'a>(height: usize, width: usize, masks: impl IntoIterator<Item = &'a BinaryMask>) -> Self {
        let mut out = Self::zeros(height, width);
        for m in masks {
            out.union_with(m);
        }
        out
    }

    /// Fraction of pixels on which the two masks agree.
    pub fn agreement(&self, other: &BinaryMask) -> f64 {
        if self.data.is_empty() {
            return 1.0;
        }
        let same = self.data.iter().zip(&other.data).filter(|(a, b)| a == b).count();
        same as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour resampling at pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
            self.get(sy, sx)
        })
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Bilinear resampling of a real-valued raster with pixel-centre alignment.
pub fn resize_bilinear(src: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (sh, sw) = src.dim();
    if (sh, sw) == (height, width) {
        return src.clone();
    }
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, c - lo as f64)
    };
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, fy) = coord(y, height, sh);
        let (x0, x1, fx) = coord(x, width, sw);
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Probability raster binarized at 0.5 (logit 0).
pub fn binarize_probs(probs: &Array2<f64>) -> BinaryMask {
    let (h, w) = probs.dim();
    BinaryMask::from_fn(h, w, |y, x| probs[[y, x]] >= 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let m = BinaryMask::from_fn(5, 7, |y, x| (x + y) % 3 == 0);
        assert_eq!(BinaryMask::from_gray(&m.to_gray()), m);
    }

    #[test]
    fn threshold_is_strictly_above_127() {
        let img = GrayImage::from_raw(3, 1, vec![127, 128, 255]).unwrap();
        assert_eq!(BinaryMask::from_gray(&img).as_slice(), &[false, true, true]);
    }

    #[test]
    fn set_counts() {
        let a = BinaryMask::from_fn(2, 4, |_, x| x < 2);
        let b = BinaryMask::from_fn(2, 4, |_, x| (1..3).contains(&x));
        assert_eq!(a.intersection_count(&b), 2);
        assert_eq!(a.union_count(&b), 6);
        assert_eq!(BinaryMask::union_all(2, 4, [&a, &b]).count(), 6);
    }

    #[test]
    fn bilinear_identity_and_constant() {
        let src = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        assert_eq!(resize_bilinear(&src, 4, 4), src);
        let c = Array2::from_elem((3, 5), 0.7);
        assert!(resize_bilinear(&c, 9, 11).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn nearest_upsample_by_two() {
        let m = BinaryMask::from_fn(2, 2, |y, x| y == x);
        let up = m.resize_nearest(4, 4);
        assert!(up.get(0, 0) && up.get(1, 1) && up.get(3, 3) && !up.get(0, 3));
    }
}
