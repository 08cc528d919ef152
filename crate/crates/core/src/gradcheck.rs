//! Central finite-difference gradient checking for `f64` parameter stores.

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries_checked: usize,
    /// Name and flat index of the entry with the largest relative error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric gradient at that entry.
    pub worst_values: (f64, f64),
}

impl GradCheckReport {
    fn merge(&mut self, other: GradCheckReport) {
        self.entries_checked += other.entries_checked;
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
            self.worst_values = other.worst_values;
        }
    }
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Compares the analytic gradient of `loss` with central differences for every
/// entry (up to `max_entries` per variable) of each variable in `vars`.
pub fn check_vars<F>(vars: &[(String, Var)], loss: F, step: f64, max_entries: usize) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let l = loss()?;
    if l.dtype() != DType::F64 {
        return Err(Error::Numerical("gradient checks require f64".into()));
    }
    let grads = l.backward()?;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries_checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
    };
    for (name, var) in vars {
        let shape = var.shape().clone();
        let base = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let stride = (n / max_entries.max(1)).max(1);
        let mut sub = GradCheckReport {
            max_rel_error: 0.0,
            entries_checked: 0,
            worst: None,
            worst_values: (0.0, 0.0),
        };
        for i in (0..n).step_by(stride) {
            let mut plus = base.clone();
            plus[i] += step;
            var.set(&Tensor::from_vec(plus, shape.clone(), var.device())?)?;
            let lp = loss()?.to_scalar::<f64>()?;
            let mut minus = base.clone();
            minus[i] -= step;
            var.set(&Tensor::from_vec(minus, shape.clone(), var.device())?)?;
            let lm = loss()?.to_scalar::<f64>()?;
            let numeric = (lp - lm) / (2.0 * step);
            let err = rel_error(analytic[i], numeric);
            sub.entries_checked += 1;
            if err > sub.max_rel_error {
                sub.max_rel_error = err;
                sub.worst = Some((name.clone(), i));
                sub.worst_values = (analytic[i], numeric);
            }
        }
        var.set(&Tensor::from_vec(base, shape, var.device())?)?;
        report.merge(sub);
    }
    Ok(report)
}

/// Gradient check over every parameter of a store.
pub fn check_store<F>(ps: &ParamStore, loss: F, step: f64, max_entries: usize) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let vars: Vec<(String, Var)> = ps.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    check_vars(&vars, loss, step, max_entries)
}
