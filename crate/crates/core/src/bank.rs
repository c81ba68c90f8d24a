//! Global per-class feature centers with count-based decaying update rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Memory of one center vector per class plus the number of updates each
/// class has received.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBank {
    num_classes: usize,
    dim: usize,
    centers: Vec<f64>,
    counters: Vec<u64>,
    alpha: f64,
}

/// `e^(-alpha * t)`.
pub fn update_rate(t: u64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha must lie in (0,1), got {alpha}")));
    }
    Ok((-alpha * t as f64).exp())
}

impl CenterBank {
    /// Centers drawn uniformly from `[-0.01, 0.01]`, counters zero.
    pub fn new(num_classes: usize, dim: usize, alpha: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::config(format!(
                "bank dimensions must be positive, got {num_classes}x{dim}"
            )));
        }
        update_rate(0, alpha)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..num_classes * dim)
            .map(|_| rng.gen_range(-0.01..=0.01))
            .collect();
        Ok(CenterBank {
            num_classes,
            dim,
            centers,
            counters: vec![0; num_classes],
            alpha,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn counters(&self) -> &[u64] {
        &self.counters
    }

    pub fn center(&self, class: usize) -> Result<&[f64]> {
        self.check_class(class)?;
        Ok(&self.centers[class * self.dim..(class + 1) * self.dim])
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class < self.num_classes {
            Ok(())
        } else {
            Err(Error::input(format!(
                "class {class} not in bank of {} classes",
                self.num_classes
            )))
        }
    }

    /// `w <- (1 - eta) * w + eta * a` with `eta = e^(-alpha * t)`, then `t += 1`.
    pub fn update_center(&mut self, class: usize, rep: &[f64]) -> Result<()> {
        self.check_class(class)?;
        if rep.len() != self.dim {
            return Err(Error::input(format!(
                "representation has {} values, bank dimension is {}",
                rep.len(),
                self.dim
            )));
        }
        if rep.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite representation for class {class}"
            )));
        }
        let eta = update_rate(self.counters[class], self.alpha)?;
        let w = &mut self.centers[class * self.dim..(class + 1) * self.dim];
        for (wi, &ai) in w.iter_mut().zip(rep) {
            *wi = (1.0 - eta) * *wi + eta * ai;
        }
        self.counters[class] += 1;
        Ok(())
    }

    /// Independent copy of the current state.
    pub fn snapshot(&self) -> CenterBank {
        self.clone()
    }

    /// Serializes as `u32 Y, u32 D, f64 alpha`, the `Y*D` centers as f32,
    /// then the `Y` update counters as u64, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.num_classes * (4 * self.dim + 8));
        out.extend_from_slice(&(self.num_classes as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for &v in &self.centers {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &c in &self.counters {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Inverse of [`CenterBank::to_bytes`]; returns the bank and the bytes consumed.
    pub fn restore(bytes: &[u8]) -> Result<(CenterBank, usize)> {
        let mut r = crate::io::ByteReader::new(bytes);
        let num_classes = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let alpha_at = r.offset();
        let alpha = r.f64()?;
        if num_classes == 0 || dim == 0 {
            return Err(Error::format(0, "bank dimensions must be positive"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::format(alpha_at, format!("invalid alpha {alpha}")));
        }
        let need = num_classes
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(num_classes * 8));
        if need.is_none_or(|n| n > r.remaining()) {
            return Err(Error::format(r.offset(), format!("bank of {num_classes}x{dim} exceeds the data")));
        }
        let mut centers = Vec::with_capacity(num_classes * dim);
        for _ in 0..num_classes * dim {
            centers.push(r.f32()? as f64);
        }
        let mut counters = Vec::with_capacity(num_classes);
        for _ in 0..num_classes {
            counters.push(r.u64()?);
        }
        Ok((
            CenterBank {
                num_classes,
                dim,
                centers,
                counters,
                alpha,
            },
            r.offset(),
        ))
    }
}
