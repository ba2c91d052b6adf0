use super::tape::{ParamId, ParamStore};
use crate::error::Result;
use crate::imagecore::Rng64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Coordinates sampled per parameter.
    pub max_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub id: ParamId,
    pub name: String,
    pub coords: Vec<CoordCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn coords_checked(&self) -> usize {
        self.params.iter().map(|p| p.coords.len()).sum()
    }

    /// Coordinates at or above the tolerance the check ran with.
    pub fn failures(&self) -> Vec<(&str, &CoordCheck)> {
        self.params
            .iter()
            .flat_map(|p| p.coords.iter().map(move |c| (p.name.as_str(), c)))
            .filter(|(_, c)| !(c.rel_error < self.tol))
            .collect()
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences.
///
/// `loss_and_grad` must zero nothing itself: it runs forward and backward on
/// the given store, accumulating into `grad`, and returns the loss. Grads are
/// zeroed here before the analytic pass and hold the analytic values again on
/// return.
pub fn grad_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss_and_grad: impl FnMut(&mut ParamStore) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    store.zero_grads();
    loss_and_grad(store)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.get(id).grad.data().to_vec()).collect();
    let mut rng = Rng64::new(opts.seed);
    let mut report = GradCheckReport {
        params: Vec::new(),
        tol: opts.tol,
    };
    for (k, &id) in ids.iter().enumerate() {
        let n = store.get(id).value.len();
        let coords = sample_coords(n, opts.max_coords, &mut rng);
        let mut checks = Vec::with_capacity(coords.len());
        for idx in coords {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + opts.h;
            let f_plus = loss_and_grad(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - opts.h;
            let f_minus = loss_and_grad(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * opts.h);
            let a = analytic[k][idx];
            checks.push(CoordCheck {
                index: idx,
                analytic: a,
                numeric,
                rel_error: relative_error(a, numeric),
            });
        }
        let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        report.params.push(ParamCheck {
            id,
            name: store.name(id).to_string(),
            passed: checks.iter().all(|c| c.rel_error < opts.tol),
            max_rel_error,
            coords: checks,
        });
    }
    store.zero_grads();
    for (k, &id) in ids.iter().enumerate() {
        store.get_mut(id).grad.data_mut().copy_from_slice(&analytic[k]);
    }
    Ok(report)
}

fn sample_coords(n: usize, max: usize, rng: &mut Rng64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n <= max {
        return all;
    }
    for i in 0..max {
        let j = i + rng.uniform_int(0, (n - 1 - i) as u64).expect("valid range") as usize;
        all.swap(i, j);
    }
    all.truncate(max);
    all.sort_unstable();
    all
}
