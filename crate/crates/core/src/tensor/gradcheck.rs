use super::Tensor;
use crate::error::{MoleError, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Per-parameter maximum relative error between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }
}

/// Compares each parameter's stored gradient (its grad slot; absent means
/// zero) against `(f(p+h) - f(p-h)) / 2h`, entry by entry.
///
/// Relative error is `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_diff_gradcheck<F>(
    mut f: F,
    params: &[(String, Tensor<f64>)],
    h: f64,
) -> Result<GradcheckReport>
where
    F: FnMut(&[(String, Tensor<f64>)]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(MoleError::Config(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut work: Vec<(String, Tensor<f64>)> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.detached()))
        .collect();
    let mut per_param = Vec::with_capacity(params.len());
    let mut entries_checked = 0;

    for (pi, (name, original)) in params.iter().enumerate() {
        let analytic = original.grad();
        let mut worst = 0.0f64;
        for j in 0..original.numel() {
            let base = original.data()[j];
            work[pi].1.data_mut()[j] = base + h;
            let plus = f(&work)?;
            work[pi].1.data_mut()[j] = base - h;
            let minus = f(&work)?;
            work[pi].1.data_mut()[j] = base;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(MoleError::Evaluation {
                    param: name.clone(),
                });
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[j]);
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
            entries_checked += 1;
        }
        per_param.push((name.clone(), worst));
    }
    Ok(GradcheckReport {
        per_param,
        entries_checked,
    })
}
