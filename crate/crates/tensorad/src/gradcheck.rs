//! Central finite-difference checks of analytic gradients.

use crate::error::Result;
use crate::tensor::{lit, Real, Tensor};

/// One probed scalar coordinate: `(parameter index, flat element index)`.
pub type Probe = (usize, usize);

#[derive(Clone, Debug)]
pub struct ProbeResult<F> {
    pub probe: Probe,
    pub analytic: F,
    pub numeric: F,
    pub rel_err: F,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport<F> {
    pub results: Vec<ProbeResult<F>>,
    /// Largest relative error seen for each parameter (zero if not probed).
    pub max_rel_err_per_param: Vec<F>,
    pub max_rel_err: F,
    pub tol: F,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true gradient is zero from dividing by round-off.
pub fn relative_error<F: Real>(analytic: F, numeric: F, floor: F) -> F {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against `(f(θ + h) - f(θ - h)) / 2h` at every probe
/// (or at every coordinate when `probes` is `None`). `params` is perturbed
/// in place and restored bit-exactly afterwards.
pub fn finite_diff_check<F, Fun>(
    mut f: Fun,
    params: &mut [Tensor<F>],
    analytic: &[Tensor<F>],
    probes: Option<&[Probe]>,
    h: F,
    tol: F,
) -> Result<GradCheckReport<F>>
where
    F: Real,
    Fun: FnMut(&[Tensor<F>]) -> Result<F>,
{
    let all: Vec<Probe>;
    let probes = match probes {
        Some(p) => p,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    let floor: F = lit(1e-8);
    let two: F = lit(2.0);
    let mut results = Vec::with_capacity(probes.len());
    let mut per_param = vec![F::zero(); params.len()];
    for &(pi, ei) in probes {
        let orig = params[pi].data()[ei];
        params[pi].data_mut()[ei] = orig + h;
        let plus = f(params);
        params[pi].data_mut()[ei] = orig - h;
        let minus = f(params);
        params[pi].data_mut()[ei] = orig;
        let numeric = (plus? - minus?) / (two * h);
        let a = analytic[pi].data()[ei];
        let rel_err = relative_error(a, numeric, floor);
        per_param[pi] = per_param[pi].max(rel_err);
        results.push(ProbeResult {
            probe: (pi, ei),
            analytic: a,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = results
        .iter()
        .map(|r| r.rel_err)
        .fold(F::zero(), F::max);
    Ok(GradCheckReport {
        results,
        max_rel_err_per_param: per_param,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}
