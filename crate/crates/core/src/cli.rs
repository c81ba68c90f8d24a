//! Commands behind the `i2c` binary. Each writes its outputs plus a run
//! manifest under the configured directories; re-running a command with
//! `--config <manifest>` reproduces its CSVs byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{resolve_path, RunConfig};
use crate::dataset::{load_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{calibrate_tau, evaluate, for_each_sample_maps, top_k, EvalReport};
use crate::locmap::{box_from_map, ThresholdSweep};
use crate::model::ModelConfig;
use crate::render::{Image, GT_COLOR, PRED_COLOR};
use crate::synthdata::DatasetSpec;
use crate::trainer::{train, EpochLog, TrainOutcome};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
const RENDER_SCALE: usize = 4;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn manifest_path(out_dir: &Path, command: &str) -> PathBuf {
    out_dir.join(format!("run_manifest_{command}.txt"))
}

fn write_manifest(cfg: &RunConfig, command: &str, ds: &Dataset) -> Result<()> {
    let mut cfg = cfg.clone();
    cfg.dataset_hash = Some(ds.hash.clone());
    let text = format!(
        "# command = {command}\n# code_version = {CODE_VERSION}\n# data_seed = {}\n{}",
        ds.spec.seed,
        cfg.to_text()
    );
    write_file(&manifest_path(&resolve_path(&cfg.out_dir), command), text)
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let ds = load_dataset(&resolve_path(&cfg.data_dir))?;
    if let Some(want) = &cfg.dataset_hash {
        if *want != ds.hash {
            return Err(Error::config(format!(
                "dataset hash {} does not match the configured {want}",
                ds.hash
            )));
        }
    }
    Ok(ds)
}

fn model_config(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    cfg.model_config(ds.spec.num_classes, ds.spec.image_size)
}

/// Generates the dataset into `data_dir`; returns its hash.
pub fn cmd_generate(data_dir: &Path, spec: &DatasetSpec) -> Result<String> {
    write_dataset(&resolve_path(data_dir), spec)
}

/// Trains, then writes the checkpoint, `train_log.csv` and the manifest.
pub fn cmd_train(cfg: &RunConfig, mut progress: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let ds = open_dataset(cfg)?;
    let out_dir = resolve_path(&cfg.out_dir);
    let outcome = train(cfg, &ds.train, ds.spec.num_classes, ds.spec.image_size, |e| progress(e))?;
    let mut csv = format!("{}\n", EpochLog::CSV_HEADER);
    for e in &outcome.log {
        let _ = writeln!(csv, "{}", e.csv_row());
    }
    write_file(&out_dir.join("train_log.csv"), csv)?;
    let ck_path = resolve_path(&cfg.checkpoint_path());
    if let Some(parent) = ck_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Checkpoint::new(&outcome.params, &outcome.bank).save(&ck_path)?;
    write_manifest(cfg, "train", &ds)?;
    Ok(outcome)
}

pub fn metrics_csv(report: &EvalReport) -> String {
    let mut s = String::from("metric,value\n");
    for (name, v) in report.metric_rows() {
        let _ = writeln!(s, "{name},{v:.6}");
    }
    s
}

pub fn per_sample_csv(report: &EvalReport) -> String {
    let mut s = String::from("sample_id,pred_label,iou,top1_hit,top5_hit,gtknown_hit\n");
    for j in &report.judgements {
        let _ = writeln!(
            s,
            "{},{},{:.6},{},{},{}",
            j.sample_id, j.pred_label, j.iou, j.top1_hit as u8, j.topk_hit as u8, j.gtknown_hit as u8
        );
    }
    s
}

pub fn tau_sweep_csv(sweep: &ThresholdSweep) -> String {
    let mut s = String::from("tau,gtknown_loc_err\n");
    for (tau, err) in &sweep.errors {
        let _ = writeln!(s, "{tau:.6},{err:.6}");
    }
    s
}

/// Picks the box threshold on the validation split, then reports on test.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = open_dataset(cfg)?;
    let model = model_config(cfg, &ds);
    let params = Checkpoint::load(&resolve_path(&cfg.checkpoint_path()))?.params(&model)?;
    let sweep = calibrate_tau(&model, &params, &ds.val, &cfg.tau_grid)?;
    let k_top = cfg.k_top.min(model.num_classes);
    let report = evaluate(&model, &params, &ds.test, sweep.best_tau, k_top)?;
    let out_dir = resolve_path(&cfg.out_dir);
    write_file(&out_dir.join("metrics.csv"), metrics_csv(&report))?;
    write_file(&out_dir.join("per_sample.csv"), per_sample_csv(&report))?;
    write_file(&out_dir.join("tau_sweep.csv"), tau_sweep_csv(&sweep))?;
    write_manifest(cfg, "eval", &ds)?;
    Ok(report)
}

/// Output directory of one sweep point.
pub fn sweep_point_dir(out_dir: &Path, param: &str, value: f64) -> PathBuf {
    out_dir.join(format!("sweep_{param}")).join(format!("{param}_{value}"))
}

/// Trains and evaluates once per grid value of `sweep_param`.
pub fn cmd_sweep(cfg: &RunConfig, mut progress: impl FnMut(f64, &EpochLog)) -> Result<Vec<(f64, EvalReport)>> {
    let ds = open_dataset(cfg)?;
    let mut rows = Vec::with_capacity(cfg.sweep_grid.len());
    let mut csv = String::from(
        "value,top1_loc_err,top5_loc_err,gtknown_loc_err,top1_cls_err,top5_cls_err,tau\n",
    );
    for &value in &cfg.sweep_grid {
        let mut point = cfg.clone();
        point.set(&cfg.sweep_param, &value.to_string())?;
        point.out_dir = sweep_point_dir(&cfg.out_dir, &cfg.sweep_param, value);
        point.checkpoint = None;
        point.dataset_hash = Some(ds.hash.clone());
        point.validate()?;
        cmd_train(&point, |e| progress(value, e))?;
        let r = cmd_eval(&point)?;
        let _ = writeln!(
            csv,
            "{value},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.top1_loc_err, r.top5_loc_err, r.gtknown_loc_err, r.top1_cls_err, r.top5_cls_err, r.tau
        );
        rows.push((value, r));
    }
    let out_dir = resolve_path(&cfg.out_dir);
    write_file(&out_dir.join(format!("sweep_{}.csv", cfg.sweep_param)), csv)?;
    write_manifest(cfg, "sweep", &ds)?;
    Ok(rows)
}

/// Heatmap of the predicted class over each chosen test image, predicted
/// box in green and ground truth in red.
pub fn cmd_render(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = open_dataset(cfg)?;
    let model = model_config(cfg, &ds);
    let params = Checkpoint::load(&resolve_path(&cfg.checkpoint_path()))?.params(&model)?;
    let mut chosen = Vec::with_capacity(cfg.render_ids.len());
    for &id in &cfg.render_ids {
        let s = ds.test.get(id as usize).ok_or_else(|| {
            Error::input(format!("render id {id} out of range for {} test images", ds.test.len()))
        })?;
        chosen.push(s.clone());
    }
    let tau = calibrate_tau(&model, &params, &ds.val, &cfg.tau_grid)?.best_tau;
    let out_dir = resolve_path(&cfg.out_dir).join("render");
    let mut written = Vec::new();
    for_each_sample_maps(&model, &params, &chosen, |s, sm| {
        let pred = top_k(&sm.logits, 1)[0];
        let heat = &sm.maps[pred];
        let mut img = Image::overlay(&s.image, heat)?.upscale(RENDER_SCALE);
        for b in &s.gt_boxes {
            img.outline(b, RENDER_SCALE, GT_COLOR);
        }
        if let Some(b) = box_from_map(heat, tau)? {
            img.outline(&b, RENDER_SCALE, PRED_COLOR);
        }
        let path = out_dir.join(format!("sample_{}_pred{pred}.ppm", s.sample_id));
        write_file(&path, img.to_ppm())?;
        written.push(path);
        Ok(())
    })?;
    write_manifest(cfg, "render", &ds)?;
    Ok(written)
}
