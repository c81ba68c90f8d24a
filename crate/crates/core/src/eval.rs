//! Localization and classification metrics: Top-1 / Top-k localization
//! error, Gt-known localization error and classification error, with a box
//! counted as correct when its IoU with some ground-truth box exceeds 0.5.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::locmap::{box_from_map, normalize_map, sweep_threshold, upsample_bilinear, BBox, ThresholdSweep};
use crate::model::{infer, ModelConfig, ModelParams};
use crate::synthdata::Sample;
use crate::engine::Tensor;

pub const IOU_HIT: f64 = 0.5;

/// Area IoU of two half-open boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let iw = a.x2.min(b.x2).saturating_sub(a.x1.max(b.x1)) as u64;
    let ih = a.y2.min(b.y2).saturating_sub(a.y1.max(b.y1)) as u64;
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    Ok(inter as f64 / union as f64)
}

/// Largest IoU of `b` against any of `gts` (0 when `gts` is empty).
pub fn best_iou(b: &BBox, gts: &[BBox]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for gt in gts {
        best = best.max(iou(b, gt)?);
    }
    Ok(best)
}

/// Outcome for one evaluated image.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgement {
    pub sample_id: u32,
    pub gt_label: usize,
    pub pred_label: usize,
    /// Box drawn from the predicted class map.
    pub pred_box: Option<BBox>,
    /// IoU of `pred_box` (0 when there is no box).
    pub iou: f64,
    /// IoU of the box drawn from the ground-truth class map.
    pub gtknown_iou: f64,
    pub cls_top1_hit: bool,
    pub cls_topk_hit: bool,
    pub top1_hit: bool,
    pub topk_hit: bool,
    pub gtknown_hit: bool,
}

/// Indices of the `k` largest logits, highest first (ties to the lower index).
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Judges one image. `maps[y]` is the normalized, full-resolution map of class `y`.
pub fn judge_sample(
    sample_id: u32,
    logits: &[f64],
    maps: &[Array2<f64>],
    gt_label: usize,
    gt_boxes: &[BBox],
    tau: f64,
    k_top: usize,
) -> Result<Judgement> {
    if maps.len() != logits.len() || gt_label >= logits.len() {
        return Err(Error::input(format!(
            "{} logits, {} maps, label {gt_label}",
            logits.len(),
            maps.len()
        )));
    }
    let ranked = top_k(logits, k_top.max(1));
    let pred_label = ranked[0];
    let pred_box = box_from_map(&maps[pred_label], tau)?;
    let iou_of = |b: Option<BBox>| -> Result<f64> {
        match b {
            Some(b) => best_iou(&b, gt_boxes),
            None => Ok(0.0),
        }
    };
    let pred_iou = iou_of(pred_box)?;
    let gt_box = if pred_label == gt_label {
        pred_box
    } else {
        box_from_map(&maps[gt_label], tau)?
    };
    let gtknown_iou = iou_of(gt_box)?;
    let gtknown_hit = gtknown_iou > IOU_HIT;
    let cls_top1_hit = pred_label == gt_label;
    let cls_topk_hit = ranked.contains(&gt_label);
    Ok(Judgement {
        sample_id,
        gt_label,
        pred_label,
        pred_box,
        iou: pred_iou,
        gtknown_iou,
        cls_top1_hit,
        cls_topk_hit,
        top1_hit: cls_top1_hit && pred_iou > IOU_HIT,
        // the box for the top-k criterion comes from the matching class's own map
        topk_hit: cls_topk_hit && gtknown_hit,
        gtknown_hit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub top1_loc_err: f64,
    pub top5_loc_err: f64,
    pub gtknown_loc_err: f64,
    pub top1_cls_err: f64,
    pub top5_cls_err: f64,
    pub tau: f64,
    pub k_top: usize,
    /// Top-k with k covering most of the classes says little; flagged for reports.
    pub low_discrimination_topk: bool,
    pub judgements: Vec<Judgement>,
}

impl EvalReport {
    pub fn from_judgements(judgements: Vec<Judgement>, tau: f64, k_top: usize, num_classes: usize) -> Result<Self> {
        if judgements.is_empty() {
            return Err(Error::input("cannot report on zero samples"));
        }
        let n = judgements.len() as f64;
        let err = |f: fn(&Judgement) -> bool| 100.0 * (1.0 - judgements.iter().filter(|j| f(j)).count() as f64 / n);
        let report = EvalReport {
            top1_loc_err: err(|j| j.top1_hit),
            top5_loc_err: err(|j| j.topk_hit),
            gtknown_loc_err: err(|j| j.gtknown_hit),
            top1_cls_err: err(|j| j.cls_top1_hit),
            top5_cls_err: err(|j| j.cls_topk_hit),
            tau,
            k_top,
            low_discrimination_topk: 2 * k_top > num_classes,
            judgements,
        };
        report.check_ordering()?;
        Ok(report)
    }

    /// Metric ordering implied by the hit definitions.
    pub fn check_ordering(&self) -> Result<()> {
        let ok = self.gtknown_loc_err <= self.top1_loc_err
            && self.top5_loc_err <= self.top1_loc_err
            && self.top1_loc_err >= self.top1_cls_err
            && [
                self.top1_loc_err,
                self.top5_loc_err,
                self.gtknown_loc_err,
                self.top1_cls_err,
                self.top5_cls_err,
            ]
            .iter()
            .all(|v| (0.0..=100.0).contains(v));
        if ok {
            Ok(())
        } else {
            Err(Error::Numeric(format!("metric ordering violated: {self:?}")))
        }
    }

    /// `(metric, value)` rows in a fixed order.
    pub fn metric_rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("top1_loc_err", self.top1_loc_err),
            ("top5_loc_err", self.top5_loc_err),
            ("gtknown_loc_err", self.gtknown_loc_err),
            ("top1_cls_err", self.top1_cls_err),
            ("top5_cls_err", self.top5_cls_err),
            ("tau", self.tau),
            ("k_top", self.k_top as f64),
            ("top5_low_discrimination", if self.low_discrimination_topk { 1.0 } else { 0.0 }),
        ]
    }
}

pub fn default_k_top(num_classes: usize) -> usize {
    num_classes.min(5)
}

/// Model outputs for one sample, maps normalized and resized to the image.
pub struct SampleMaps {
    pub logits: Vec<f64>,
    pub maps: Vec<Array2<f64>>,
}

const EVAL_BATCH: usize = 32;

/// Runs the model over `samples` in batches, handing each sample's logits and
/// full-resolution normalized maps to `visit`.
pub fn for_each_sample_maps<F>(
    config: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    mut visit: F,
) -> Result<()>
where
    F: FnMut(&Sample, SampleMaps) -> Result<()>,
{
    let size = config.input_size;
    let (y, m) = (config.num_classes, config.map_size());
    for chunk in samples.chunks(EVAL_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for s in chunk {
            if s.image.shape() != [3, size, size] {
                return Err(Error::config(format!(
                    "sample {} has shape {:?}, model expects [3,{size},{size}]",
                    s.sample_id,
                    s.image.shape()
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        let images = Tensor::new(&[chunk.len(), 3, size, size], data)?;
        let out = infer(config, params, &images)?;
        if !out.class_maps.is_finite() {
            return Err(Error::Numeric("class maps contain non-finite values".into()));
        }
        for (n, s) in chunk.iter().enumerate() {
            let logits = out.logits.data()[n * y..(n + 1) * y].to_vec();
            let mut maps = Vec::with_capacity(y);
            for class in 0..y {
                let off = (n * y + class) * m * m;
                let raw = Array2::from_shape_vec((m, m), out.class_maps.data()[off..off + m * m].to_vec())
                    .expect("map extents");
                maps.push(upsample_bilinear(&normalize_map(&raw)?, size, size)?);
            }
            visit(s, SampleMaps { logits, maps })?;
        }
    }
    Ok(())
}

/// Ground-truth-class maps of `samples` paired with their boxes.
pub fn gt_class_maps(
    config: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
) -> Result<Vec<(Array2<f64>, Vec<BBox>)>> {
    let mut out = Vec::with_capacity(samples.len());
    for_each_sample_maps(config, params, samples, |s, mut sm| {
        out.push((sm.maps.swap_remove(s.label), s.gt_boxes.clone()));
        Ok(())
    })?;
    Ok(out)
}

/// Box threshold minimizing Gt-known error on `samples`.
pub fn calibrate_tau(
    config: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    grid: &[f64],
) -> Result<ThresholdSweep> {
    sweep_threshold(&gt_class_maps(config, params, samples)?, grid)
}

pub fn evaluate(
    config: &ModelConfig,
    params: &ModelParams,
    samples: &[Sample],
    tau: f64,
    k_top: usize,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::input("evaluation split is empty"));
    }
    crate::locmap::check_unit_interval(tau, "box threshold")?;
    let mut judgements = Vec::with_capacity(samples.len());
    for_each_sample_maps(config, params, samples, |s, sm| {
        judgements.push(judge_sample(
            s.sample_id,
            &sm.logits,
            &sm.maps,
            s.label,
            &s.gt_boxes,
            tau,
            k_top,
        )?);
        Ok(())
    })?;
    EvalReport::from_judgements(judgements, tau, k_top, config.num_classes)
}
