//! Deterministic shape-class images with exact tight boxes, the binary
//! split format, and the paired-category batch sampler.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::locmap::BBox;

pub const SHAPE_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "ring", "cross", "bar-horizontal", "bar-vertical", "diamond",
];

const MAX_RETRIES: usize = 100;

/// Foreground shape classes; the discriminant is the class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    BarHorizontal,
    BarVertical,
    Diamond,
}

impl Shape {
    pub fn from_class(class: usize) -> Result<Shape> {
        use Shape::*;
        const ALL: [Shape; 8] = [Disk, Square, Triangle, Ring, Cross, BarHorizontal, BarVertical, Diamond];
        ALL.get(class)
            .copied()
            .ok_or_else(|| Error::input(format!("class {class} has no shape (at most 8 classes)")))
    }

    /// Whether pixel offset `(dx, dy)` from the center lies in a shape of radius `r`.
    pub fn covers(self, dx: i64, dy: i64, r: i64) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        let thin = (r / 3).max(1);
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => ax <= r && ay <= r,
            // apex up, base at dy = r, half-width r at the base
            Shape::Triangle => dy >= -r && dy <= r && 2 * ax <= dy + r,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                let inner = r / 2;
                d2 <= r * r && d2 > inner * inner
            }
            Shape::Cross => (ax <= thin && ay <= r) || (ay <= thin && ax <= r),
            Shape::BarHorizontal => ax <= r && ay <= thin,
            Shape::BarVertical => ay <= r && ax <= thin,
            Shape::Diamond => ax + ay <= r,
        }
    }
}

/// Rasterizes a shape centered at `(cx, cy)`; `None` if any covered pixel
/// would fall off a `size` x `size` canvas.
pub fn rasterize(shape: Shape, cx: i64, cy: i64, r: i64, size: usize) -> Option<Vec<bool>> {
    let s = size as i64;
    if cx - r < 0 || cy - r < 0 || cx + r >= s || cy + r >= s {
        return None;
    }
    let mut mask = vec![false; size * size];
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            if shape.covers(x - cx, y - cy, r) {
                mask[y as usize * size + x as usize] = true;
            }
        }
    }
    Some(mask)
}

/// Tight half-open box of the set pixels.
pub fn mask_bbox(mask: &[bool], size: usize) -> Option<BBox> {
    let mut ext: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (i / size, i % size);
        ext = Some(match ext {
            None => (x, y, x, y),
            Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
        });
    }
    ext.map(|(x1, y1, x2, y2)| BBox {
        x1: x1 as u32,
        y1: y1 as u32,
        x2: x2 as u32 + 1,
        y2: y2 as u32 + 1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Number of clutter blobs per image is drawn from `0..=clutter_blobs`.
    pub clutter_blobs: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    /// Foreground HSV saturation range.
    pub fg_saturation: (f64, f64),
    /// Clutter saturation upper bound; always below `fg_saturation.0`.
    pub clutter_saturation: f64,
    /// Relative amplitude of the per-pixel brightness texture.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 8,
            image_size: 64,
            train_count: 2000,
            val_count: 200,
            test_count: 500,
            clutter_blobs: 4,
            radius_min: 7,
            radius_max: 14,
            fg_saturation: (0.6, 1.0),
            clutter_saturation: 0.25,
            noise: 0.04,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return Err(Error::config(format!(
                "num_classes must be in 2..=8, got {}",
                self.num_classes
            )));
        }
        for split in Split::ALL {
            let n = self.count(split);
            if n < 2 * self.num_classes {
                return Err(Error::config(format!(
                    "{} split needs at least 2 images per class, got {n} for {} classes",
                    split.name(),
                    self.num_classes
                )));
            }
        }
        if self.radius_min < 2 || self.radius_min > self.radius_max {
            return Err(Error::config(format!(
                "radius range {}..={} invalid",
                self.radius_min, self.radius_max
            )));
        }
        let (lo, hi) = self.fg_saturation;
        if !(0.0 <= self.clutter_saturation && self.clutter_saturation < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= clutter_saturation < fg_saturation_min <= fg_saturation_max <= 1, got {} / {lo}..{hi}",
                self.clutter_saturation
            )));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::config(format!("noise must lie in [0, 0.5), got {}", self.noise)));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3,H,W]`, values in `[0,1]` representable in single precision.
    pub image: Tensor,
    pub label: usize,
    pub gt_boxes: Vec<BBox>,
    pub sample_id: u32,
}

/// Independent stream for sample `index` of `split`.
pub fn sample_rng(master_seed: u64, split: Split, index: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&split.tag().to_le_bytes());
    seed[16..24].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn place_shape<R: Rng + ?Sized>(spec: &DatasetSpec, class: usize, rng: &mut R) -> Result<Vec<bool>> {
    let shape = Shape::from_class(class)?;
    let size = spec.image_size;
    for _ in 0..MAX_RETRIES {
        let r = rng.gen_range(spec.radius_min..=spec.radius_max) as i64;
        let cx = rng.gen_range(0..size) as i64;
        let cy = rng.gen_range(0..size) as i64;
        if let Some(mask) = rasterize(shape, cx, cy, r, size) {
            return Ok(mask);
        }
    }
    Err(Error::config(format!(
        "could not place a {} of radius {}..={} on a {size}x{size} canvas in {MAX_RETRIES} tries",
        SHAPE_NAMES[class], spec.radius_min, spec.radius_max
    )))
}

/// Pulls the channels toward their maximum until saturation is at most `limit`.
fn cap_saturation(rgb: &mut [f64; 3], limit: f64) {
    let mx = rgb.iter().cloned().fold(f64::MIN, f64::max);
    let mn = rgb.iter().cloned().fold(f64::MAX, f64::min);
    if mx <= 0.0 || mx - mn <= limit * mx {
        return;
    }
    let k = limit * mx / (mx - mn);
    rgb.iter_mut().for_each(|c| *c = mx - (mx - *c) * k);
}

/// One image of `class`: soft low-saturation blobs over a gray background,
/// then a hard-edged saturated shape whose pixels define the box.
pub fn generate_sample<R: Rng + ?Sized>(spec: &DatasetSpec, class: usize, sample_id: u32, rng: &mut R) -> Result<Sample> {
    if class >= spec.num_classes {
        return Err(Error::input(format!(
            "class {class} out of range for {} classes",
            spec.num_classes
        )));
    }
    let size = spec.image_size;
    let mask = place_shape(spec, class, rng)?;
    let bbox = mask_bbox(&mask, size).expect("placed shape covers pixels");

    let hw = size * size;
    let mut img = vec![0.0; 3 * hw];
    let base = rng.gen_range(0.3..0.6);
    img.iter_mut().for_each(|v| *v = base);

    let blobs = rng.gen_range(0..=spec.clutter_blobs);
    for _ in 0..blobs {
        let (bx, by) = (rng.gen_range(0.0..size as f64), rng.gen_range(0.0..size as f64));
        let sx = rng.gen_range(2.0..size as f64 / 6.0);
        let sy = rng.gen_range(2.0..size as f64 / 6.0);
        let color = hsv_to_rgb(
            rng.gen_range(0.0..1.0),
            rng.gen_range(0.0..=spec.clutter_saturation),
            rng.gen_range(0.2..0.9),
        );
        let strength = rng.gen_range(0.3..0.8);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f64 - bx) / sx, (y as f64 - by) / sy);
                let w = strength * (-0.5 * (u * u + v * v)).exp();
                for (c, &col) in color.iter().enumerate() {
                    let p = &mut img[c * hw + y * size + x];
                    *p = (1.0 - w) * *p + w * col;
                }
            }
        }
    }

    // overlapping blobs of different hues can mix into a more saturated color
    for i in 0..hw {
        let mut rgb = [img[i], img[hw + i], img[2 * hw + i]];
        cap_saturation(&mut rgb, spec.clutter_saturation);
        for (c, v) in rgb.into_iter().enumerate() {
            img[c * hw + i] = v;
        }
    }

    let fg = hsv_to_rgb(
        rng.gen_range(0.0..1.0),
        rng.gen_range(spec.fg_saturation.0..=spec.fg_saturation.1),
        rng.gen_range(0.7..=0.95),
    );
    for (i, &m) in mask.iter().enumerate() {
        if m {
            for (c, &col) in fg.iter().enumerate() {
                img[c * hw + i] = col;
            }
        }
    }
    // brightness-only texture: scaling all channels keeps saturation
    for i in 0..hw {
        let gain = if spec.noise > 0.0 {
            1.0 + rng.gen_range(-spec.noise..spec.noise)
        } else {
            1.0
        };
        for c in 0..3 {
            let v = &mut img[c * hw + i];
            *v = ((*v * gain).clamp(0.0, 1.0) as f32) as f64;
        }
    }

    Ok(Sample {
        image: Tensor::new(&[3, size, size], img)?,
        label: class,
        gt_boxes: vec![bbox],
        sample_id,
    })
}

/// Class-balanced split: sample `i` has class `i mod Y`.
pub fn generate_split(spec: &DatasetSpec, split: Split) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count(split))
        .map(|i| {
            let mut rng = sample_rng(spec.seed, split, i);
            generate_sample(spec, i % spec.num_classes, i as u32, &mut rng)
        })
        .collect()
}

/// Per-class sample indices for paired batch drawing.
#[derive(Debug, Clone)]
pub struct PairSampler {
    by_class: Vec<Vec<usize>>,
}

impl PairSampler {
    pub fn new(labels: &[usize], num_classes: usize) -> Result<Self> {
        let mut by_class = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            by_class
                .get_mut(y)
                .ok_or_else(|| Error::input(format!("label {y} out of range for {num_classes} classes")))?
                .push(i);
        }
        Ok(PairSampler { by_class })
    }

    /// `C` distinct classes, `m` distinct images of each, in shuffled order.
    pub fn sample<R: Rng + ?Sized>(&self, categories: usize, per_category: usize, rng: &mut R) -> Result<Vec<usize>> {
        let y = self.by_class.len();
        if categories == 0 || categories > y {
            return Err(Error::config(format!(
                "categories_per_batch must be in 1..={y}, got {categories}"
            )));
        }
        if per_category == 0 {
            return Err(Error::config("images_per_category must be at least 1"));
        }
        if let Some((class, members)) = self
            .by_class
            .iter()
            .enumerate()
            .find(|(_, m)| m.len() < per_category)
        {
            return Err(Error::config(format!(
                "class {class} has {} images, batches need {per_category}",
                members.len()
            )));
        }
        let mut batch = Vec::with_capacity(categories * per_category);
        for class in index::sample(rng, y, categories) {
            let members = &self.by_class[class];
            batch.extend(index::sample(rng, members.len(), per_category).into_iter().map(|j| members[j]));
        }
        batch.shuffle(rng);
        Ok(batch)
    }
}

/// Draws one paired batch from `samples`.
pub fn pair_batch_sampler<'a, R: Rng + ?Sized>(
    samples: &'a [Sample],
    num_classes: usize,
    categories: usize,
    per_category: usize,
    rng: &mut R,
) -> Result<Vec<&'a Sample>> {
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let idx = PairSampler::new(&labels, num_classes)?.sample(categories, per_category, rng)?;
    Ok(idx.into_iter().map(|i| &samples[i]).collect())
}

pub const SPLIT_MAGIC: &[u8; 4] = b"I2CD";
pub const SPLIT_VERSION: u32 = 1;

/// Serializes a split; images are stored height-major with interleaved channels.
pub fn split_to_bytes(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SPLIT_MAGIC);
    out.extend_from_slice(&SPLIT_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.label as u32).to_le_bytes());
        out.extend_from_slice(&(s.gt_boxes.len() as u32).to_le_bytes());
        for b in &s.gt_boxes {
            for v in [b.x1, b.y1, b.x2, b.y2] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let (h, w) = (s.image.shape()[1], s.image.shape()[2]);
        let d = s.image.data();
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.extend_from_slice(&(d[(c * h + y) * w + x] as f32).to_le_bytes());
                }
            }
        }
    }
    out
}

/// Parses a split of `size` x `size` images with labels below `num_classes`.
pub fn split_from_bytes(bytes: &[u8], size: usize, num_classes: usize) -> Result<Vec<Sample>> {
    let mut r = crate::io::ByteReader::new(bytes);
    if r.take(4)? != SPLIT_MAGIC {
        return Err(Error::format(0, "not a dataset split (bad magic)"));
    }
    let version = r.u32()?;
    if version != SPLIT_VERSION {
        return Err(Error::format(4, format!("unsupported split version {version}")));
    }
    let count = r.u32()? as usize;
    let hw = size * size;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for sample_id in 0..count {
        let at = r.offset();
        let label = r.u32()? as usize;
        if label >= num_classes {
            return Err(Error::format(at, format!("label {label} out of range")));
        }
        let nboxes = r.u32()? as usize;
        if nboxes == 0 {
            return Err(Error::format(at + 4, "sample without boxes"));
        }
        let mut gt_boxes = Vec::with_capacity(nboxes.min(64));
        for _ in 0..nboxes {
            let at = r.offset();
            let b = BBox {
                x1: r.u32()?,
                y1: r.u32()?,
                x2: r.u32()?,
                y2: r.u32()?,
            };
            if b.validate().is_err() || !b.fits(size, size) {
                return Err(Error::format(at, format!("invalid box {b:?}")));
            }
            gt_boxes.push(b);
        }
        let raw = r.take(hw * 3 * 4)?;
        let mut img = vec![0.0; 3 * hw];
        for (i, chunk) in raw.chunks_exact(4).enumerate() {
            let (p, c) = (i / 3, i % 3);
            img[c * hw + p] = f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64;
        }
        samples.push(Sample {
            image: Tensor::new(&[3, size, size], img)?,
            label,
            gt_boxes,
            sample_id: sample_id as u32,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), "trailing bytes after last sample"));
    }
    Ok(samples)
}
