//! Inter-image consistency losses.
//!
//! * stochastic consistency: mean squared distance between row-aligned seed
//!   vectors of two same-class images in a batch;
//! * global consistency: squared distance between each batch class
//!   representation (mean of all its seed vectors) and the bank center,
//!   with the bank treated as a constant;
//! * the joint objective `cls + lambda1 * sc + lambda2 * gc`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bank::CenterBank;
use crate::engine::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeds::SeedVectors;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Epochs trained on the classification loss alone.
    pub warmup_epochs: u64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, warmup_epochs: u64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(LossWeights {
            lambda1,
            lambda2,
            warmup_epochs,
        })
    }

    /// `(lambda1, lambda2)` in force at `epoch`.
    pub fn effective(&self, epoch: u64) -> (f64, f64) {
        if epoch < self.warmup_epochs {
            (0.0, 0.0)
        } else {
            (self.lambda1, self.lambda2)
        }
    }
}

/// Seed vectors of the images of one class within a batch.
#[derive(Debug, Clone)]
pub struct BatchClassGroup {
    pub class_id: usize,
    pub members: Vec<SeedVectors>,
    /// Disjoint pairs of indices into `members`.
    pub pairs: Vec<(usize, usize)>,
}

/// Groups seeds by class (ascending class id). Within a group the members
/// are shuffled with `rng` and paired off; an odd one out is left unpaired.
pub fn group_by_class<R: Rng + ?Sized>(seeds: Vec<SeedVectors>, rng: &mut R) -> Vec<BatchClassGroup> {
    let mut by_class: BTreeMap<usize, Vec<SeedVectors>> = BTreeMap::new();
    for s in seeds {
        by_class.entry(s.class_id).or_default().push(s);
    }
    by_class
        .into_iter()
        .map(|(class_id, members)| {
            let mut order: Vec<usize> = (0..members.len()).collect();
            if order.len() > 2 {
                order.shuffle(rng);
            }
            let pairs = order.chunks_exact(2).map(|p| (p[0], p[1])).collect();
            BatchClassGroup {
                class_id,
                members,
                pairs,
            }
        })
        .collect()
}

pub fn sc_loss(g: &mut Graph, a: &SeedVectors, b: &SeedVectors) -> Result<Var> {
    if a.class_id != b.class_id {
        return Err(Error::input(format!(
            "stochastic consistency needs one class, got {} and {}",
            a.class_id, b.class_id
        )));
    }
    g.squared_l2_mean(a.vectors, b.vectors)
}

/// Mean of the pair losses over all groups; zero when no pair exists.
pub fn batch_sc_loss(g: &mut Graph, groups: &[BatchClassGroup]) -> Result<Var> {
    let mut terms = Vec::new();
    for group in groups {
        for &(i, j) in &group.pairs {
            terms.push(sc_loss(g, &group.members[i], &group.members[j])?);
        }
    }
    mean_of_scalars(g, &terms)
}

fn mean_of_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    let mut acc = first;
    for &t in rest {
        acc = g.add(acc, t)?;
    }
    if terms.len() == 1 {
        Ok(acc)
    } else {
        g.scale(acc, 1.0 / terms.len() as f64)
    }
}

/// Mean of all `K * |group|` seed vectors, a `[D]` node.
pub fn class_batch_representation(g: &mut Graph, group: &BatchClassGroup) -> Result<Var> {
    if group.members.is_empty() {
        return Err(Error::input(format!("class {} has no images", group.class_id)));
    }
    let parts: Vec<Var> = group.members.iter().map(|m| m.vectors).collect();
    let stacked = g.concat_rows(&parts)?;
    g.mean_rows(stacked)
}

/// `(1/|classes|) * sum_y ||a_y - w_y||^2`, reading the bank as constants.
pub fn gc_loss(g: &mut Graph, reps: &BTreeMap<usize, Var>, bank: &CenterBank) -> Result<Var> {
    if reps.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut centers = Vec::with_capacity(reps.len() * bank.dim());
    for &class in reps.keys() {
        centers.extend_from_slice(bank.center(class)?);
    }
    let rows: Vec<Var> = reps.values().copied().collect();
    let stacked = g.concat_rows(&rows)?;
    let targets = g.constant(Tensor::new(&[reps.len(), bank.dim()], centers)?);
    g.squared_l2_mean(stacked, targets)
}

/// Joint objective. Terms with an effective weight of zero are left out of
/// the graph entirely, so a zero-weight run reduces to the classifier alone.
pub fn total_loss(
    g: &mut Graph,
    cls: Var,
    sc: Option<Var>,
    gc: Option<Var>,
    weights: &LossWeights,
    epoch: u64,
) -> Result<Var> {
    let (l1, l2) = weights.effective(epoch);
    let mut total = cls;
    for (term, w) in [(sc, l1), (gc, l2)] {
        if let Some(t) = term {
            if w != 0.0 {
                let weighted = g.scale(t, w)?;
                total = g.add(total, weighted)?;
            }
        }
    }
    Ok(total)
}
