use rand::seq::index::sample;

use super::approx::Approximator;
use crate::rng::RngStream;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Distinct random coordinates to probe (all of them if `n_probes >= n_params`).
pub fn probe_coords(n_params: usize, n_probes: usize, rng: &mut RngStream) -> Vec<usize> {
    if n_probes >= n_params {
        return (0..n_params).collect();
    }
    sample(rng, n_params, n_probes).into_vec()
}

/// Max relative error between the analytic gradient returned by `loss` and
/// central differences of its value, over `coords`.
pub fn grad_check(
    net: &Approximator,
    loss: impl Fn(&Approximator) -> (f64, Vec<f64>),
    coords: &[usize],
    h: f64,
) -> f64 {
    let (_, analytic) = loss(net);
    let mut probe = net.clone();
    grad_check_coords(&mut probe.params.clone(), &analytic, |p| {
        probe.params.copy_from_slice(p);
        loss(&probe).0
    }, coords, h)
}

/// Parameter-vector form of [`grad_check`].
pub fn grad_check_coords(
    params: &mut [f64],
    analytic: &[f64],
    mut value: impl FnMut(&[f64]) -> f64,
    coords: &[usize],
    h: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = params[i];
        params[i] = orig + h;
        let up = value(params);
        params[i] = orig - h;
        let down = value(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}
