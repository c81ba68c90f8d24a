//! Training loop: classification warm-up, then the joint objective with
//! stochastic and global consistency, center-bank updates after each step.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bank::CenterBank;
use crate::config::{Mode, RunConfig};
use crate::consistency::{batch_sc_loss, class_batch_representation, gc_loss, group_by_class, total_loss};
use crate::engine::{Graph, Sgd, Tensor, Var};
use crate::error::{Error, Result};
use crate::locmap::normalize_map;
use crate::model::{forward, init_model, ModelConfig, ModelParams};
use crate::seeds::{extract_seed_vectors, select_seeds, SeedVectors};
use crate::synthdata::{PairSampler, Sample};

/// Named random streams derived from the run seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Bank = 2,
    Batches = 3,
    Seeds = 4,
    Pairing = 5,
}

fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

fn stream_seed(seed: u64, stream: Stream) -> u64 {
    stream_rng(seed, stream).gen()
}

/// Per-epoch means over steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: u64,
    pub cls_loss: f64,
    /// Zero while the term is inactive.
    pub sc_loss: f64,
    pub gc_loss: f64,
    /// Training classification error in percent.
    pub train_cls_err: f64,
    /// Fraction of images whose seeds fell back to the argmax.
    pub seed_fallback: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,cls_loss,sc_loss,gc_loss,train_cls_err,seed_fallback";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch, self.cls_loss, self.sc_loss, self.gc_loss, self.train_cls_err, self.seed_fallback
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub bank: CenterBank,
    pub log: Vec<EpochLog>,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, Default)]
struct StepStats {
    cls: f64,
    sc: f64,
    gc: f64,
    correct: usize,
    fallbacks: usize,
}

fn check_finite(term: &str, v: f64, epoch: u64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{term} is {v} at epoch {epoch}, step {step}")))
    }
}

pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    model: ModelConfig,
    train: &'a [Sample],
    sampler: PairSampler,
    pub params: ModelParams,
    pub bank: CenterBank,
    opt: Sgd,
    batch_rng: ChaCha8Rng,
    seed_rng: ChaCha8Rng,
    pair_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, train: &'a [Sample], num_classes: usize, input_size: usize) -> Result<Self> {
        cfg.validate()?;
        let model = cfg.model_config(num_classes, input_size);
        model.validate()?;
        if cfg.categories_per_batch > num_classes {
            return Err(Error::config(format!(
                "categories_per_batch {} exceeds the {num_classes} classes",
                cfg.categories_per_batch
            )));
        }
        let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
        let sampler = PairSampler::new(&labels, num_classes)?;
        Ok(Trainer {
            cfg,
            params: init_model(&model, stream_seed(cfg.seed, Stream::Init))?,
            bank: CenterBank::new(num_classes, model.feature_channels, cfg.alpha, stream_seed(cfg.seed, Stream::Bank))?,
            model,
            train,
            sampler,
            opt: Sgd::new(cfg.lr, cfg.momentum)?,
            batch_rng: stream_rng(cfg.seed, Stream::Batches),
            seed_rng: stream_rng(cfg.seed, Stream::Seeds),
            pair_rng: stream_rng(cfg.seed, Stream::Pairing),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.cfg.categories_per_batch * self.cfg.images_per_category
    }

    pub fn steps_per_epoch(&self) -> usize {
        if self.cfg.batches_per_epoch > 0 {
            self.cfg.batches_per_epoch
        } else {
            (self.train.len() / self.batch_size()).max(1)
        }
    }

    /// Runs every epoch, calling `on_epoch` after each.
    pub fn run(mut self, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        let mut log = Vec::with_capacity(self.cfg.epochs as usize);
        for epoch in 0..self.cfg.epochs {
            let entry = self.epoch(epoch)?;
            on_epoch(&entry);
            log.push(entry);
        }
        Ok(TrainOutcome {
            params: self.params,
            bank: self.bank,
            log,
        })
    }

    pub fn epoch(&mut self, epoch: u64) -> Result<EpochLog> {
        let steps = self.steps_per_epoch();
        self.opt
            .set_lr(self.cfg.lr_schedule.lr_at(self.cfg.lr, epoch, self.cfg.epochs))?;
        let mut sum = StepStats::default();
        for step in 0..steps {
            let s = self.step(epoch, step)?;
            sum.cls += s.cls;
            sum.sc += s.sc;
            sum.gc += s.gc;
            sum.correct += s.correct;
            sum.fallbacks += s.fallbacks;
        }
        let n = steps as f64;
        let images = (steps * self.batch_size()) as f64;
        Ok(EpochLog {
            epoch,
            cls_loss: sum.cls / n,
            sc_loss: sum.sc / n,
            gc_loss: sum.gc / n,
            train_cls_err: 100.0 * (1.0 - sum.correct as f64 / images),
            seed_fallback: sum.fallbacks as f64 / images,
        })
    }

    fn consistency_active(&self, epoch: u64) -> bool {
        let (l1, _) = self.cfg.loss_weights().effective(epoch);
        match self.cfg.mode {
            Mode::Plain => false,
            Mode::Sc => l1 > 0.0,
            // the bank keeps learning even when its loss weight is zero
            Mode::ScGc => epoch >= self.cfg.warmup_epochs,
        }
    }

    fn step(&mut self, epoch: u64, step: usize) -> Result<StepStats> {
        let idx = self
            .sampler
            .sample(self.cfg.categories_per_batch, self.cfg.images_per_category, &mut self.batch_rng)?;
        let size = self.model.input_size;
        let mut data = Vec::with_capacity(idx.len() * 3 * size * size);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in &idx {
            data.extend_from_slice(self.train[i].image.data());
            labels.push(self.train[i].label);
        }
        let mut g = Graph::new();
        let images = g.constant(Tensor::new(&[idx.len(), 3, size, size], data)?);
        let bound = self.params.bind(&mut g);
        let out = forward(&self.model, &mut g, &bound, images)?;
        let cls = g.softmax_cross_entropy(out.logits, &labels)?;

        let mut stats = StepStats {
            cls: g.value(cls).data()[0],
            ..StepStats::default()
        };
        check_finite("classification loss", stats.cls, epoch, step)?;
        let y = self.model.num_classes;
        let logits = g.value(out.logits).data();
        for (n, &label) in labels.iter().enumerate() {
            let row = &logits[n * y..(n + 1) * y];
            stats.correct += (crate::eval::top_k(row, 1)[0] == label) as usize;
        }

        let (l1, l2) = self.cfg.loss_weights().effective(epoch);
        let mut sc = None;
        let mut gc = None;
        let mut reps = BTreeMap::new();
        if self.consistency_active(epoch) {
            let seeds = self.seed_vectors(&mut g, out.features, out.class_maps, &labels, &mut stats.fallbacks)?;
            let groups = group_by_class(seeds, &mut self.pair_rng);
            if l1 > 0.0 {
                let v = batch_sc_loss(&mut g, &groups)?;
                stats.sc = g.value(v).data()[0];
                check_finite("stochastic consistency loss", stats.sc, epoch, step)?;
                sc = Some(v);
            }
            if self.cfg.mode == Mode::ScGc {
                for group in &groups {
                    reps.insert(group.class_id, class_batch_representation(&mut g, group)?);
                }
                if l2 > 0.0 {
                    let v = gc_loss(&mut g, &reps, &self.bank)?;
                    stats.gc = g.value(v).data()[0];
                    check_finite("global consistency loss", stats.gc, epoch, step)?;
                    gc = Some(v);
                }
            }
        }

        let total = total_loss(&mut g, cls, sc, gc, &self.cfg.loss_weights(), epoch)?;
        check_finite("total loss", g.value(total).data()[0], epoch, step)?;
        g.backward(total)?;
        self.params.accumulate_grads(&g, &bound)?;
        self.opt.step(self.params.tensors_mut())?;
        if !self.params.is_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at epoch {epoch}, step {step}"
            )));
        }
        // the bank used by this step's loss was the pre-step one
        for (&class, &rep) in &reps {
            self.bank.update_center(class, g.value(rep).data())?;
        }
        Ok(stats)
    }

    /// Seeds of each image, drawn from its ground-truth class map.
    fn seed_vectors(
        &mut self,
        g: &mut Graph,
        features: Var,
        class_maps: Var,
        labels: &[usize],
        fallbacks: &mut usize,
    ) -> Result<Vec<SeedVectors>> {
        let (y, m) = (self.model.num_classes, self.model.map_size());
        let mut out = Vec::with_capacity(labels.len());
        for (n, &label) in labels.iter().enumerate() {
            let off = (n * y + label) * m * m;
            let raw = Array2::from_shape_vec((m, m), g.value(class_maps).data()[off..off + m * m].to_vec())
                .expect("map extents");
            let sel = select_seeds(&normalize_map(&raw)?, self.cfg.delta, self.cfg.k, &mut self.seed_rng)?;
            *fallbacks += sel.fallback as usize;
            let f = g.select_batch(features, n)?;
            let vectors = extract_seed_vectors(g, f, &sel.coords)?;
            out.push(SeedVectors {
                coords: sel.coords,
                vectors,
                class_id: label,
                image_id: n,
                fallback: sel.fallback,
            });
        }
        Ok(out)
    }
}

/// Trains from scratch on `train`.
pub fn train(
    cfg: &RunConfig,
    train: &[Sample],
    num_classes: usize,
    input_size: usize,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    Trainer::new(cfg, train, num_classes, input_size)?.run(on_epoch)
}
