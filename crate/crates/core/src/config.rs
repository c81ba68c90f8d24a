//! `key = value` configuration: parsing, the run configuration table and
//! its validation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::consistency::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Environment variable naming the directory relative paths resolve against.
pub const WORKSPACE_ENV: &str = "I2C_WORKSPACE";

/// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

pub(crate) fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Classification loss only.
    Plain,
    /// Classification plus stochastic consistency.
    Sc,
    /// Both consistency terms and the center bank.
    ScGc,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Plain => "plain",
            Mode::Sc => "sc",
            Mode::ScGc => "sc_gc",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "plain" => Ok(Mode::Plain),
            "sc" => Ok(Mode::Sc),
            "sc_gc" => Ok(Mode::ScGc),
            _ => Err(Error::config(format!("mode must be plain, sc or sc_gc, got `{s}`"))),
        }
    }
}

/// Per-epoch learning rate policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 + cos(pi * epoch / epochs)) / 2`
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    pub fn lr_at(self, base: f64, epoch: u64, epochs: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let phase = epoch.min(epochs) as f64 / epochs.max(1) as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * phase).cos())
            }
        }
    }
}

impl FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<LrSchedule> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::config(format!("lr_schedule must be constant or cosine, got `{s}`"))),
        }
    }
}

fn parse_epochs_or_inf(key: &str, v: &str) -> Result<u64> {
    if v == "inf" {
        Ok(u64::MAX)
    } else {
        parse_value(key, v)
    }
}

fn fmt_epochs_or_inf(v: u64) -> String {
    if v == u64::MAX {
        "inf".into()
    } else {
        v.to_string()
    }
}

/// Every tunable of a run. Defaults are chosen for the 64x64, 8-class
/// synthetic data on a single CPU core.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Defaults to `out_dir/checkpoint.i2ck`.
    pub checkpoint: Option<PathBuf>,
    pub mode: Mode,
    pub epochs: u64,
    pub batches_per_epoch: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub delta: f64,
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub categories_per_batch: usize,
    pub images_per_category: usize,
    pub warmup_epochs: u64,
    pub feature_channels: usize,
    pub width1: usize,
    pub width2: usize,
    pub stride_total: usize,
    pub k_top: usize,
    pub tau_grid: Vec<f64>,
    pub sweep_param: String,
    pub sweep_grid: Vec<f64>,
    pub render_ids: Vec<u32>,
    /// When set, the dataset's content hash must match.
    pub dataset_hash: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs/default"),
            checkpoint: None,
            mode: Mode::ScGc,
            epochs: 20,
            batches_per_epoch: 0,
            lr: 0.05,
            lr_schedule: LrSchedule::Cosine,
            momentum: 0.9,
            seed: 0,
            delta: 0.7,
            k: 3,
            lambda1: 0.008,
            lambda2: 0.001,
            alpha: 0.05,
            categories_per_batch: 8,
            images_per_category: 2,
            warmup_epochs: 1,
            feature_channels: 32,
            width1: 16,
            width2: 32,
            stride_total: 4,
            k_top: 5,
            tau_grid: crate::locmap::default_tau_grid(),
            sweep_param: "lambda2".into(),
            sweep_grid: vec![0.0001, 0.001, 0.01, 0.1],
            render_ids: vec![0, 1, 2, 3],
            dataset_hash: None,
        }
    }
}

pub const RUN_KEYS: &[&str] = &[
    "data_dir",
    "out_dir",
    "checkpoint",
    "mode",
    "epochs",
    "batches_per_epoch",
    "lr",
    "lr_schedule",
    "momentum",
    "seed",
    "delta",
    "k",
    "lambda1",
    "lambda2",
    "alpha",
    "categories_per_batch",
    "images_per_category",
    "warmup_epochs",
    "feature_channels",
    "width1",
    "width2",
    "stride_total",
    "k_top",
    "tau_grid",
    "sweep_param",
    "sweep_grid",
    "render_ids",
    "dataset_hash",
];

/// Keys `cmd_sweep` may vary.
pub const SWEEPABLE: &[&str] = &["lambda1", "lambda2", "k", "delta", "alpha", "lr"];

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "checkpoint" => self.checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "mode" => self.mode = v.parse()?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "batches_per_epoch" => self.batches_per_epoch = parse_value(key, v)?,
            "lr" => self.lr = parse_value(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "delta" => self.delta = parse_value(key, v)?,
            "k" => self.k = parse_value(key, v)?,
            "lambda1" => self.lambda1 = parse_value(key, v)?,
            "lambda2" => self.lambda2 = parse_value(key, v)?,
            "alpha" => self.alpha = parse_value(key, v)?,
            "categories_per_batch" => self.categories_per_batch = parse_value(key, v)?,
            "images_per_category" => self.images_per_category = parse_value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_epochs_or_inf(key, v)?,
            "feature_channels" => self.feature_channels = parse_value(key, v)?,
            "width1" => self.width1 = parse_value(key, v)?,
            "width2" => self.width2 = parse_value(key, v)?,
            "stride_total" => self.stride_total = parse_value(key, v)?,
            "k_top" => self.k_top = parse_value(key, v)?,
            "tau_grid" => self.tau_grid = parse_list(key, v)?,
            "sweep_param" => self.sweep_param = v.to_string(),
            "sweep_grid" => self.sweep_grid = parse_list(key, v)?,
            "render_ids" => self.render_ids = parse_list(key, v)?,
            "dataset_hash" => self.dataset_hash = (!v.is_empty()).then(|| v.to_string()),
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies pairs in order; later pairs win.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then `file` (if any), then `flags`, then validation.
    pub fn load(file: Option<&Path>, flags: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let pairs = parse_kv_text(&text)?;
            cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        }
        cfg.apply(flags.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.images_per_category < 2 {
            return fail(format!(
                "images_per_category must be at least 2 for pairing, got {}",
                self.images_per_category
            ));
        }
        if self.categories_per_batch == 0 {
            return fail("categories_per_batch must be at least 1".into());
        }
        if self.k_top == 0 {
            return fail("k_top must be at least 1".into());
        }
        if self.tau_grid.is_empty() || self.tau_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return fail(format!("tau_grid values must lie in (0,1), got {:?}", self.tau_grid));
        }
        if !SWEEPABLE.contains(&self.sweep_param.as_str()) {
            return fail(format!(
                "sweep_param must be one of {SWEEPABLE:?}, got `{}`",
                self.sweep_param
            ));
        }
        if self.sweep_grid.is_empty() {
            return fail("sweep_grid must not be empty".into());
        }
        LossWeights::new(self.lambda1, self.lambda2, self.warmup_epochs)?;
        crate::bank::update_rate(0, self.alpha)?;
        self.model_config(8, 64).validate()?;
        Ok(())
    }

    pub fn model_config(&self, num_classes: usize, input_size: usize) -> ModelConfig {
        ModelConfig {
            input_size,
            num_classes,
            feature_channels: self.feature_channels,
            stride_total: self.stride_total,
            widths: [self.width1, self.width2],
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            warmup_epochs: self.warmup_epochs,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("checkpoint.i2ck"))
    }

    /// One `key = value` line per key in table order; loads back to `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in RUN_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    pub fn get(&self, key: &str) -> String {
        let path = |p: &Path| p.display().to_string();
        match key {
            "data_dir" => path(&self.data_dir),
            "out_dir" => path(&self.out_dir),
            "checkpoint" => self.checkpoint.as_deref().map(path).unwrap_or_default(),
            "mode" => self.mode.name().into(),
            "epochs" => self.epochs.to_string(),
            "batches_per_epoch" => self.batches_per_epoch.to_string(),
            "lr" => self.lr.to_string(),
            "lr_schedule" => self.lr_schedule.name().into(),
            "momentum" => self.momentum.to_string(),
            "seed" => self.seed.to_string(),
            "delta" => self.delta.to_string(),
            "k" => self.k.to_string(),
            "lambda1" => self.lambda1.to_string(),
            "lambda2" => self.lambda2.to_string(),
            "alpha" => self.alpha.to_string(),
            "categories_per_batch" => self.categories_per_batch.to_string(),
            "images_per_category" => self.images_per_category.to_string(),
            "warmup_epochs" => fmt_epochs_or_inf(self.warmup_epochs),
            "feature_channels" => self.feature_channels.to_string(),
            "width1" => self.width1.to_string(),
            "width2" => self.width2.to_string(),
            "stride_total" => self.stride_total.to_string(),
            "k_top" => self.k_top.to_string(),
            "tau_grid" => join(&self.tau_grid),
            "sweep_param" => self.sweep_param.clone(),
            "sweep_grid" => join(&self.sweep_grid),
            "render_ids" => join(&self.render_ids),
            "dataset_hash" => self.dataset_hash.clone().unwrap_or_default(),
            _ => String::new(),
        }
    }
}

/// Relative paths resolved against the workspace root, if one is set.
pub fn resolve_path(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(WORKSPACE_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn cosine_schedule() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.lr_at(0.1, 0, 10), 0.1);
        assert!((c.lr_at(0.1, 5, 10) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..10).map(|e| c.lr_at(0.1, e, 10)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert!(lrs[9] > 0.0);
        assert_eq!(LrSchedule::Constant.lr_at(0.1, 7, 10), 0.1);
        assert_eq!("cosine".parse::<LrSchedule>().unwrap(), c);
        assert!(matches!("step".parse::<LrSchedule>(), Err(Error::Config(_))));
    }

    #[test]
    fn parses_comments_and_blanks() {
        let p = parse_kv_text("# header\n\nlr = 0.1  # step\n mode=sc\n").unwrap();
        assert_eq!(p, pairs(&[("lr", "0.1"), ("mode", "sc")]));
        assert!(matches!(parse_kv_text("lr 0.1"), Err(Error::Config(_))));
        assert!(matches!(parse_kv_text("= 3"), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!((c.delta, c.k, c.lambda1, c.lambda2, c.alpha), (0.7, 3, 0.008, 0.001, 0.05));
        assert_eq!((c.categories_per_batch, c.images_per_category, c.warmup_epochs), (8, 2, 1));
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "lr = 0.5\nseed = 3\n").unwrap();
        let c = RunConfig::load(Some(&f), &pairs(&[("seed", "9")])).unwrap();
        assert_eq!((c.lr, c.seed), (0.5, 9));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::load(None, &pairs(&[("lamda1", "0.1")])), Err(Error::Config(_))));
        for (k, v) in [
            ("mode", "both"),
            ("delta", "1.0"),
            ("k", "0"),
            ("lambda1", "-1"),
            ("alpha", "0"),
            ("momentum", "1.0"),
            ("images_per_category", "1"),
            ("stride_total", "3"),
            ("epochs", "x"),
            ("sweep_param", "epochs"),
        ] {
            let r = RunConfig::load(None, &pairs(&[(k, v)]));
            assert!(matches!(r, Err(Error::Config(_))), "{k}={v}");
        }
        let missing = RunConfig::load(Some(Path::new("/nonexistent/run.cfg")), &[]);
        assert!(matches!(missing, Err(Error::Io { .. })));
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply([("warmup_epochs", "inf"), ("lambda2", "0.0001"), ("checkpoint", "a/b.i2ck"), ("render_ids", "5,7")])
            .unwrap();
        c.dataset_hash = Some("ab12".into());
        let text = c.to_text();
        let pairs = parse_kv_text(&text).unwrap();
        let mut back = RunConfig::default();
        back.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.warmup_epochs, u64::MAX);
        assert_eq!(RunConfig::default().checkpoint_path(), PathBuf::from("runs/default/checkpoint.i2ck"));
    }
}
