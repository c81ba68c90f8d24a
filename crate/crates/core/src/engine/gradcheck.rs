//! Central finite-difference gradient checking.

use crate::engine::graph::{Graph, Var};
use crate::engine::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Set aside mismatches where the function is not smooth at the scale of
    /// `epsilon` (a relu or max-pool kink inside the difference interval).
    pub skip_kinks: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-4,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            skip_kinks: false,
        }
    }
}

/// Worst mismatch observed during a check, over the elements not counted as
/// kinks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub failures: usize,
    /// Mismatches set aside as kinks; always 0 unless `skip_kinks` is set.
    pub kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares analytic gradients of `build` with central differences for every
/// element of every input. `build` must return a scalar loss node.
///
/// An element passes when `|a - n| <= abs_floor` or
/// `|a - n| / max(|a|, |n|) <= rel_tol`. With `skip_kinks`, a mismatch whose
/// difference estimate changes when the step is halved is counted in
/// `kinks` instead of `failures`; an analytic error cannot pass that way,
/// since the test looks only at the function.
pub fn check_gradients<F>(inputs: &[Tensor], config: GradCheckConfig, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        g.value(loss)
            .item()
            .ok_or_else(|| Error::usage("gradient check needs a scalar loss"))
    };

    let tracked: Vec<Tensor> = inputs.iter().map(|t| t.clone().with_grad()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = tracked.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        failures: 0,
        kinks: 0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (t, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[t].numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let numeric = central_difference(&eval, &mut probe, t, i, config.epsilon)?;
            let abs = (a - numeric).abs();
            let rel = relative(a, numeric);
            report.checked += 1;
            if abs <= config.abs_floor || rel <= config.rel_tol {
                report.max_abs_error = report.max_abs_error.max(abs);
                report.max_rel_error = report.max_rel_error.max(if abs > config.abs_floor { rel } else { 0.0 });
                continue;
            }
            if config.skip_kinks {
                // a smooth function gives the same estimate at half the step
                let half = central_difference(&eval, &mut probe, t, i, config.epsilon / 2.0)?;
                let drift = (half - numeric).abs();
                if drift > config.abs_floor && relative(half, numeric) > config.rel_tol {
                    report.kinks += 1;
                    continue;
                }
            }
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.failures += 1;
        }
    }
    Ok(report)
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn central_difference(
    eval: &impl Fn(&[Tensor]) -> Result<f64>,
    probe: &mut [Tensor],
    t: usize,
    i: usize,
    eps: f64,
) -> Result<f64> {
    let orig = probe[t].data()[i];
    probe[t].data_mut()[i] = orig + eps;
    let plus = eval(probe)?;
    probe[t].data_mut()[i] = orig - eps;
    let minus = eval(probe)?;
    probe[t].data_mut()[i] = orig;
    Ok((plus - minus) / (2.0 * eps))
}
