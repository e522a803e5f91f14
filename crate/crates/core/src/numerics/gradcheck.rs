use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Result, SegError};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the per-parameter max relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub num_entries: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst entry, with its analytic and numeric values.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub config: GradCheckConfig,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `analytic` gradients against central finite differences of `f`
/// for every entry of every parameter in `params`.
///
/// `f` must be deterministic. Parameters are restored after each probe.
pub fn grad_check<F>(
    params: &mut ParamStore,
    analytic: &[Tensor],
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != params.len() {
        return Err(SegError::Usage(format!(
            "{} analytic gradients for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let name = params.name(id).to_string();
        let mut check = ParamCheck {
            name: name.clone(),
            num_entries: grad.len(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..grad.len() {
            let orig = params.get(id).data()[i];
            params.get_mut(id).data_mut()[i] = orig + cfg.eps;
            let plus = f(params);
            params.get_mut(id).data_mut()[i] = orig - cfg.eps;
            let minus = f(params);
            params.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(SegError::NonFinite(format!(
                    "objective while perturbing {name}[{i}]"
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = grad.data()[i];
            let err = relative_error(a, numeric, cfg.denom_floor);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error < cfg.tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        config: *cfg,
        params: report,
    })
}
