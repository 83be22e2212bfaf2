//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// A scalar function of a list of parameter matrices with an analytic
/// gradient. Both methods must be deterministic for the check to be
/// meaningful, so any noise (dropout masks, reparameterization draws) has to
/// be frozen by the implementor.
pub trait Objective {
    fn value(&mut self, params: &[Matrix]) -> Result<f64>;
    fn gradient(&mut self, params: &[Matrix]) -> Result<Vec<Matrix>>;
}

/// Adapts a pair of closures into an [`Objective`].
pub struct FnObjective<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: FnMut(&[Matrix]) -> Result<f64>,
    G: FnMut(&[Matrix]) -> Result<Vec<Matrix>>,
{
    fn value(&mut self, params: &[Matrix]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&mut self, params: &[Matrix]) -> Result<Vec<Matrix>> {
        (self.gradient)(params)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Magnitude below which errors are measured absolutely rather than
/// relative to the gradient size.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error used by [`grad_check`]:
/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient against `(f(p+h) - f(p-h)) / 2h` for every
/// entry of every parameter.
pub fn grad_check(
    f: &mut impl Objective,
    params: &[Matrix],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::Numeric(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    for (g, p) in analytic.iter().zip(params) {
        if g.shape() != p.shape() {
            return Err(Error::dim("grad_check", p.shape(), g.shape()));
        }
    }

    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut entries_checked = 0;
    for pi in 0..params.len() {
        for ei in 0..params[pi].len() {
            let orig = params[pi].as_slice()[ei];
            work[pi].as_mut_slice()[ei] = orig + h;
            let plus = eval(f, &work)?;
            work[pi].as_mut_slice()[ei] = orig - h;
            let minus = eval(f, &work)?;
            work[pi].as_mut_slice()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic[pi].as_slice()[ei], numeric);
            if err > max_rel_error || worst.is_none() {
                max_rel_error = max_rel_error.max(err);
                worst = Some((pi, ei));
            }
            entries_checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_error,
        worst,
        entries_checked,
        tol,
        passed: max_rel_error < tol,
    })
}

fn eval(f: &mut impl Objective, params: &[Matrix]) -> Result<f64> {
    let v = f.value(params)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
