use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + grad`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::config(format!("learning rate must be >= 0, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update and zeroes the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::usage(format!("parameter {i} has no gradient slot")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(&params).any(|(v, p)| v.len() != p.numel())
        {
            return Err(Error::usage("parameter set changed between optimizer steps"));
        }
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            for (vi, gi) in v.iter_mut().zip(&grad) {
                *vi = self.momentum * *vi + gi;
            }
            for (pi, vi) in p.data_mut().iter_mut().zip(v.iter()) {
                *pi -= self.lr * vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_grad();
        t.grad_mut().unwrap()[0] = g;
        t
    }

    #[test]
    fn set_lr_changes_step_size() {
        let mut opt = Sgd::new(0.1, 0.0).unwrap();
        opt.set_lr(0.5).unwrap();
        let mut p = param(1.0, 2.0);
        opt.step([&mut p]).unwrap();
        assert_eq!(p.data()[0], 0.0);
        assert!(matches!(opt.set_lr(f64::NAN), Err(Error::Config(_))));
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 2.0);
        Sgd::new(0.1, 0.0).unwrap().step([&mut p]).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(p.grad().unwrap()[0], 0.0);
    }

    #[test]
    fn zero_lr_is_noop() {
        let mut p = param(1.25, 7.0);
        Sgd::new(0.0, 0.5).unwrap().step([&mut p]).unwrap();
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn momentum_unrolls() {
        let mut p = param(0.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step([&mut p]).unwrap();
        p.grad_mut().unwrap()[0] = 1.0;
        opt.step([&mut p]).unwrap();
        // v1 = 1, v2 = 1.9; p = -0.1 - 0.19
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut p = Tensor::scalar(1.0);
        let err = Sgd::new(0.1, 0.0).unwrap().step([&mut p]).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn rejects_bad_momentum() {
        assert!(Sgd::new(0.1, 1.0).is_err());
        assert!(Sgd::new(-0.1, 0.0).is_err());
    }
}
