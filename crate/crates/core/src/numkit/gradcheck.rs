//! Central-difference gradient oracle.

use super::params::ParamSet;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(x+h) − f(x−h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(1, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs() + numeric.abs())
}

/// Numerical gradient of `loss` at `params`, one coordinate at a time.
pub fn numerical_grad(mut loss: impl FnMut(&ParamSet) -> f64, params: &ParamSet, h: f64) -> ParamSet {
    let mut probe = params.clone();
    let mut out = params.zeros_like();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in &names {
        let len = params.get(name).expect("own name").len();
        for i in 0..len {
            let orig = params.get(name).expect("own name").data()[i];
            probe.get_mut(name).expect("own name").data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe.get_mut(name).expect("own name").data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe.get_mut(name).expect("own name").data_mut()[i] = orig;
            out.get_mut(name).expect("own name").data_mut()[i] = (up - down) / (2.0 * h);
        }
    }
    out
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its loss and reports the worst coordinate.
pub fn finite_diff_check(
    mut f: impl FnMut(&ParamSet) -> (f64, ParamSet),
    params: &ParamSet,
    h: f64,
) -> GradCheckReport {
    let (_, analytic) = f(params);
    let numeric = numerical_grad(|p| f(p).0, params, h);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for ((name, a), (_, n)) in analytic.iter().zip(numeric.iter()) {
        for (i, (&ga, &gn)) in a.data().iter().zip(n.data()).enumerate() {
            report.coordinates += 1;
            let err = relative_error(ga, gn);
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.to_owned(), i));
            }
        }
    }
    report
}
