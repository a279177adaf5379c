//! Central finite-difference gradient checking.
//!
//! The reference derivative is computed only from forward evaluations of the
//! scalar loss, independent of the reverse pass being checked.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::NetworkParams;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate with (analytic, numeric) values.
    pub worst: Option<(usize, f64, f64)>,
    /// Every probed coordinate as (flat index, analytic, numeric).
    pub entries: Vec<(usize, f64, f64)>,
}

impl GradCheckReport {
    /// True when each coordinate agrees within `abs_tol` or `rel_tol`.
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.entries
            .iter()
            .all(|&(_, a, n)| (a - n).abs() <= abs_tol || relative_error(a, n) <= rel_tol)
    }
}

/// Absolute floor of the relative-error denominator, so coordinates whose
/// true derivative is ~0 are judged by absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares `analytic` against central differences of `loss` at `coords`
/// uniformly drawn flat coordinates.
pub fn check_gradients<F>(
    params: &NetworkParams,
    analytic: &NetworkParams,
    loss: F,
    coords: usize,
    seed: u64,
    step: f64,
) -> GradCheckReport
where
    F: Fn(&NetworkParams) -> f64,
{
    let total = params.param_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        entries: Vec::with_capacity(coords),
    };
    let mut probe = params.clone();
    for _ in 0..coords {
        let i = rng.random_range(0..total);
        let x = params.scalar(i);
        probe.set_scalar(i, x + step);
        let up = loss(&probe);
        probe.set_scalar(i, x - step);
        let down = loss(&probe);
        probe.set_scalar(i, x);
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.scalar(i);
        let err = relative_error(a, numeric);
        report.checked += 1;
        report.entries.push((i, a, numeric));
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, a, numeric));
        }
    }
    report
}
