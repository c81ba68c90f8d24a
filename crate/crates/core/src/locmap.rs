//! Localization-map post-processing: min-max normalization, thresholding,
//! largest 4-connected component boxes, bilinear upsampling and the box
//! threshold sweep.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Axis-aligned box in pixel indices, half-open: `[x1, x2) x [y1, y2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl BBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x1 >= self.x2 || self.y1 >= self.y2 {
            return Err(Error::input(format!("degenerate box {self:?}")));
        }
        Ok(())
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x2 as usize <= width && self.y2 as usize <= height
    }
}

/// Raw and normalized map of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub class_id: usize,
    pub raw: Array2<f64>,
    pub normalized: Array2<f64>,
}

impl LocalizationMap {
    pub fn new(class_id: usize, raw: Array2<f64>) -> Result<Self> {
        let normalized = normalize_map(&raw)?;
        Ok(LocalizationMap {
            class_id,
            raw,
            normalized,
        })
    }
}

/// `(m - min) / (max - min)`; a constant map becomes all zeros.
pub fn normalize_map(raw: &Array2<f64>) -> Result<Array2<f64>> {
    if raw.is_empty() {
        return Err(Error::input("cannot normalize an empty map"));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("localization map contains non-finite values".into()));
    }
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max <= min {
        return Ok(Array2::zeros(raw.raw_dim()));
    }
    let span = max - min;
    Ok(raw.mapv(|v| (v - min) / span))
}

/// Pixels strictly above `threshold`.
pub fn object_mask(normalized: &Array2<f64>, threshold: f64) -> Result<Array2<bool>> {
    check_unit_interval(threshold, "threshold")?;
    Ok(normalized.mapv(|v| v > threshold))
}

pub(crate) fn check_unit_interval(value: f64, what: &str) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("{what} must lie in (0,1), got {value}")))
    }
}

/// Tight box of the largest 4-connected foreground component.
///
/// Ties in size go to the component whose first pixel comes earliest in
/// row-major order. Returns `None` for an empty mask.
pub fn largest_component_bbox(mask: &Array2<bool>) -> Option<BBox> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut queue = VecDeque::new();
    let mut best: Option<(usize, BBox)> = None;
    for r in 0..h {
        for c in 0..w {
            if !mask[[r, c]] || seen[[r, c]] {
                continue;
            }
            seen[[r, c]] = true;
            queue.push_back((r, c));
            let (mut size, mut r0, mut r1, mut c0, mut c1) = (0usize, r, r, c, c);
            while let Some((y, x)) = queue.pop_front() {
                size += 1;
                r0 = r0.min(y);
                r1 = r1.max(y);
                c0 = c0.min(x);
                c1 = c1.max(x);
                let mut visit = |ny: usize, nx: usize| {
                    if mask[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        queue.push_back((ny, nx));
                    }
                };
                if y > 0 {
                    visit(y - 1, x);
                }
                if y + 1 < h {
                    visit(y + 1, x);
                }
                if x > 0 {
                    visit(y, x - 1);
                }
                if x + 1 < w {
                    visit(y, x + 1);
                }
            }
            if best.is_none_or(|(s, _)| size > s) {
                let b = BBox {
                    x1: c0 as u32,
                    y1: r0 as u32,
                    x2: c1 as u32 + 1,
                    y2: r1 as u32 + 1,
                };
                best = Some((size, b));
            }
        }
    }
    best.map(|(_, b)| b)
}

/// Bilinear resize with half-pixel centers and border clamping.
pub fn upsample_bilinear(map: &Array2<f64>, out_h: usize, out_w: usize) -> Result<Array2<f64>> {
    let (h, w) = map.dim();
    if h == 0 || w == 0 {
        return Err(Error::input("cannot upsample an empty map"));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::input(format!(
            "target extents must be positive, got {out_h}x{out_w}"
        )));
    }
    let taps = |out: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5)
                    .clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, pos - lo as f64)
            })
            .collect()
    };
    let rows = taps(out_h, h);
    let cols = taps(out_w, w);
    Ok(Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (r0, r1, fy) = rows[i];
        let (c0, c1, fx) = cols[j];
        let top = map[[r0, c0]] * (1.0 - fx) + map[[r0, c1]] * fx;
        let bottom = map[[r1, c0]] * (1.0 - fx) + map[[r1, c1]] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

/// Box for a normalized full-resolution map at box threshold `tau`.
pub fn box_from_map(normalized: &Array2<f64>, tau: f64) -> Result<Option<BBox>> {
    Ok(largest_component_bbox(&object_mask(normalized, tau)?))
}

/// Gt-known error (percent) of each grid threshold and the best one.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSweep {
    pub best_tau: f64,
    pub errors: Vec<(f64, f64)>,
}

impl ThresholdSweep {
    pub fn best_error(&self) -> f64 {
        self.errors
            .iter()
            .find(|(t, _)| *t == self.best_tau)
            .map(|(_, e)| *e)
            .unwrap_or(100.0)
    }
}

/// Evaluates every `tau` in `grid`; the lowest error wins, ties go to the smaller tau.
pub fn sweep_threshold(
    maps_with_gt: &[(Array2<f64>, Vec<BBox>)],
    grid: &[f64],
) -> Result<ThresholdSweep> {
    if maps_with_gt.is_empty() {
        return Err(Error::input("threshold sweep needs at least one map"));
    }
    if grid.is_empty() {
        return Err(Error::config("threshold grid is empty"));
    }
    for &tau in grid {
        check_unit_interval(tau, "box threshold")?;
    }
    let mut errors = Vec::with_capacity(grid.len());
    for &tau in grid {
        let mut hits = 0usize;
        for (map, gts) in maps_with_gt {
            if let Some(b) = box_from_map(map, tau)? {
                if crate::eval::best_iou(&b, gts)? > 0.5 {
                    hits += 1;
                }
            }
        }
        let err = 100.0 * (1.0 - hits as f64 / maps_with_gt.len() as f64);
        errors.push((tau, err));
    }
    let mut best = errors[0];
    for &(tau, err) in &errors[1..] {
        if err < best.1 || (err == best.1 && tau < best.0) {
            best = (tau, err);
        }
    }
    Ok(ThresholdSweep {
        best_tau: best.0,
        errors,
    })
}

/// Default box-threshold grid: 0.05, 0.10, ..., 0.95.
pub fn default_tau_grid() -> Vec<f64> {
    (1..20).map(|i| i as f64 * 0.05).collect()
}
