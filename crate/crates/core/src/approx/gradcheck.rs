//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use super::Parameterized;

/// Relative error floor: entries smaller than this in magnitude are compared
/// against it instead of against themselves.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Numerical gradient of `loss` at `model`'s parameters.
///
/// Parameters are f32, so the perturbation actually applied is recovered
/// from the stored values and used as the divisor.
pub fn central_differences<P, F>(model: &P, loss: F, step: f64) -> Vec<Vec<f64>>
where
    P: Parameterized + Clone,
    F: Fn(&P) -> f64,
{
    let mut probe = model.clone();
    let n_blocks = probe.param_blocks().len();
    let mut out = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        let len = probe.param_blocks()[b].data.len();
        let mut grads = Vec::with_capacity(len);
        for j in 0..len {
            let original = probe.param_blocks()[b].data[j];
            let plus = (original as f64 + step) as f32;
            let minus = (original as f64 - step) as f32;
            probe.param_blocks_mut()[b].data[j] = plus;
            let lp = loss(&probe);
            probe.param_blocks_mut()[b].data[j] = minus;
            let lm = loss(&probe);
            probe.param_blocks_mut()[b].data[j] = original;
            grads.push((lp - lm) / (plus as f64 - minus as f64));
        }
        out.push(grads);
    }
    out
}

/// Largest entrywise `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.len(), n.len());
        for (x, y) in a.iter().zip(n) {
            let denom = x.abs().max(y.abs()).max(RELATIVE_FLOOR);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}
