use rand::seq::index::sample;

use super::{DenseNet, Params};
use super::rng_from_seed;

/// Minimum number of parameters compared (all of them when fewer exist).
pub const MIN_CHECKED: usize = 50;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Flat index of the parameter with the largest error.
    pub worst_parameter: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central differences with step
/// [`STEP`] on a random subset of at least [`MIN_CHECKED`] parameters.
///
/// `loss_and_grad` returns the loss and its analytic gradient for the given
/// network.  Relative error is `|a − n| / max(|a|, |n|, 1e-6)`; the check
/// passes when the largest error is strictly below `tolerance`.
pub fn grad_check<F>(net: &DenseNet, loss_and_grad: F, tolerance: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&DenseNet) -> (f64, Params),
{
    let (_, analytic) = loss_and_grad(net);
    let total = net.params.len();
    let count = total.min(MIN_CHECKED.max(total / 10));
    let mut rng = rng_from_seed(seed);
    let mut indices = sample(&mut rng, total, count).into_vec();
    indices.sort_unstable();

    let mut probe = net.clone();
    let mut worst = (0usize, 0.0f64);
    for k in indices {
        let orig = probe.params.get(k);
        probe.params.set(k, orig + STEP);
        let up = loss_and_grad(&probe).0;
        probe.params.set(k, orig - STEP);
        let down = loss_and_grad(&probe).0;
        probe.params.set(k, orig);
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.get(k);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > worst.1 || !rel.is_finite() {
            worst = (k, rel);
        }
    }
    GradCheckReport {
        checked: count,
        max_relative_error: worst.1,
        worst_parameter: worst.0,
        tolerance,
        passed: worst.1 < tolerance,
    }
}
