//! Heatmap overlays as binary PPM (P6) images.

use ndarray::Array2;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::locmap::BBox;

pub const PRED_COLOR: [u8; 3] = [0, 255, 0];
pub const GT_COLOR: [u8; 3] = [255, 0, 0];

/// Fixed 256-entry ramp: black, blue, cyan, yellow, red, white.
pub fn color_ramp() -> [[u8; 3]; 256] {
    const STOPS: [[f64; 3]; 6] = [
        [0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
        [1.0, 1.0, 1.0],
    ];
    let mut ramp = [[0u8; 3]; 256];
    for (i, entry) in ramp.iter_mut().enumerate() {
        let pos = i as f64 / 255.0 * (STOPS.len() - 1) as f64;
        let lo = (pos.floor() as usize).min(STOPS.len() - 2);
        let f = pos - lo as f64;
        for c in 0..3 {
            let v = STOPS[lo][c] * (1.0 - f) + STOPS[lo + 1][c] * f;
            entry[c] = (v * 255.0).round() as u8;
        }
    }
    ramp
}

/// RGB raster with row-major pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Image {
    /// Half image, half ramp-colored heat, for a `[3,H,W]` image and an
    /// `[H,W]` map in `[0,1]`.
    pub fn overlay(image: &Tensor, heat: &Array2<f64>) -> Result<Image> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 || heat.dim() != (s[1], s[2]) {
            return Err(Error::input(format!(
                "overlay needs [3,H,W] and [H,W], got {s:?} and {:?}",
                heat.dim()
            )));
        }
        let (h, w) = (s[1], s[2]);
        let ramp = color_ramp();
        let d = image.data();
        let mut pixels = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let hc = ramp[to_byte(heat[[y, x]]) as usize];
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = 0.5 * d[(c * h + y) * w + x] + 0.5 * hc[c] as f64 / 255.0;
                    px[c] = to_byte(v);
                }
                pixels.push(px);
            }
        }
        Ok(Image {
            width: w,
            height: h,
            pixels,
        })
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upscale(&self, factor: usize) -> Image {
        let (w, h) = (self.width * factor, self.height * factor);
        let pixels = (0..h * w)
            .map(|i| self.pixels[(i / w / factor) * self.width + (i % w) / factor])
            .collect();
        Image {
            width: w,
            height: h,
            pixels,
        }
    }

    /// 1-pixel outline of `b` given in coordinates of an image `scale` times smaller.
    pub fn outline(&mut self, b: &BBox, scale: usize, color: [u8; 3]) {
        let x1 = (b.x1 as usize * scale).min(self.width - 1);
        let y1 = (b.y1 as usize * scale).min(self.height - 1);
        let x2 = (b.x2 as usize * scale).clamp(1, self.width) - 1;
        let y2 = (b.y2 as usize * scale).clamp(1, self.height) - 1;
        for x in x1..=x2 {
            self.pixels[y1 * self.width + x] = color;
            self.pixels[y2 * self.width + x] = color;
        }
        for y in y1..=y2 {
            self.pixels[y * self.width + x1] = color;
            self.pixels[y * self.width + x2] = color;
        }
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}
