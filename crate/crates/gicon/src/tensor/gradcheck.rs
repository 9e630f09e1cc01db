//! Central finite-difference verification of analytic gradients.

use super::{Real, Tensor};

/// Worst-coordinate result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compare analytic gradients against central differences.
///
/// `f` evaluates the scalar objective; `analytic` returns one gradient tensor
/// per parameter (same shapes). The relative error per coordinate is
/// `|analytic - numeric| / (|numeric| + floor)`, and the maximum over all
/// coordinates is returned. The numeric side only ever calls `f`, so it stays
/// independent of the backward implementation under test.
pub fn grad_check<F, G>(
    f: F,
    analytic: G,
    params: &[Tensor<f64>],
    step: f64,
    floor: f64,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> f64,
    G: Fn(&[Tensor<f64>]) -> Vec<Tensor<f64>>,
{
    assert!(step > 0.0);
    let grads = analytic(params);
    assert_eq!(grads.len(), params.len());

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords_checked: 0,
    };

    for p in 0..params.len() {
        assert_eq!(grads[p].shape(), params[p].shape());
        for c in 0..params[p].len() {
            let orig = params[p].data()[c];

            work[p].data_mut()[c] = orig + step;
            let plus = f(&work);
            work[p].data_mut()[c] = orig - step;
            let minus = f(&work);
            work[p].data_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[p].data()[c];
            let rel = (a - numeric).abs() / (numeric.abs() + floor);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = p;
                report.worst_coord = c;
            }
        }
    }
    report
}

/// Convenience floor used throughout the test suites.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[allow(dead_code)]
fn _assert_real_bound<T: Real>() {}
