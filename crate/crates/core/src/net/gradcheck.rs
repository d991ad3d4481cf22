//! Central finite-difference check of analytic gradients.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

use super::params::Params;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Denominator floor so components that are zero up to rounding do not
/// produce meaningless relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// `count` distinct parameter indices, sorted.
pub fn sample_indices(len: usize, count: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, len, count.min(len)).into_vec();
    idx.sort_unstable();
    idx
}

/// Compare `analytic` against `(L(p + h e_i) - L(p - h e_i)) / 2h` at each index.
/// Every probed parameter is restored bit-exactly.
pub fn check_gradient<M>(
    model: &mut M,
    params: impl Fn(&mut M) -> &mut Params,
    analytic: &Params,
    indices: &[usize],
    h: f64,
    loss: impl Fn(&M) -> Result<f64>,
) -> Result<GradCheckReport> {
    params(model).check_same(analytic)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in indices {
        if i >= analytic.len() {
            return Err(Error::Index {
                what: "parameter",
                index: i,
                limit: analytic.len(),
            });
        }
        let orig = params(model).values[i];
        params(model).values[i] = orig + h;
        let plus = loss(model);
        params(model).values[i] = orig - h;
        let minus = loss(model);
        params(model).values[i] = orig;
        let numeric = (plus? - minus?) / (2.0 * h);
        let err = relative_error(analytic.values[i], numeric);
        report.checked += 1;
        if err >= report.max_rel_err {
            report = GradCheckReport {
                max_rel_err: err,
                worst_index: i,
                analytic: analytic.values[i],
                numeric,
                checked: report.checked,
            };
        }
    }
    Ok(report)
}
