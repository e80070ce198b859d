//! Central finite differences, kept independent of the analytic backward passes they check.

use rayon::prelude::*;

use crate::backbone::ModelParams;

/// `∂f/∂x_i ≈ (f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Vector-valued variant: one finite difference per output for every coordinate.
pub fn central_difference_multi<const K: usize>(
    x: &[f64],
    h: f64,
    mut f: impl FnMut(&[f64]) -> [f64; K],
) -> Vec<[f64; K]> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            std::array::from_fn(|k| (up[k] - down[k]) / (2.0 * h))
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both sides are below `floor`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < floor {
        diff
    } else {
        diff / scale
    }
}

/// Relative error of one parameter tensor's analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub rel_err: f64,
}

/// Compares `analytic` against central differences of `f`, one tensor at a time.
///
/// Every coordinate of every tensor is perturbed; work is spread across threads.
pub fn check_param_gradients(
    params: &ModelParams<f64>,
    analytic: &ModelParams<f64>,
    h: f64,
    floor: f64,
    f: impl Fn(&ModelParams<f64>) -> f64 + Sync,
) -> Vec<TensorCheck> {
    let [checks] = check_param_gradients_multi(params, [analytic], h, floor, |p| [f(p)]);
    checks
}

/// Checks `K` scalar functions against their analytic gradients with a single sweep of perturbations.
///
/// `f` evaluates all `K` functions at once, which pays off when they share a forward pass.
pub fn check_param_gradients_multi<const K: usize>(
    params: &ModelParams<f64>,
    analytic: [&ModelParams<f64>; K],
    h: f64,
    floor: f64,
    f: impl Fn(&ModelParams<f64>) -> [f64; K] + Sync,
) -> [Vec<TensorCheck>; K] {
    let tensors = params.tensors();
    let coords: Vec<(usize, usize)> =
        tensors.iter().enumerate().flat_map(|(t, (_, m))| (0..m.len()).map(move |i| (t, i))).collect();
    let numeric: Vec<[f64; K]> = coords
        .par_iter()
        .map_init(
            || params.clone(),
            |probe, &(t, i)| {
                let set = |p: &mut ModelParams<f64>, v: f64| p.tensors_mut()[t].1.as_mut_slice()[i] = v;
                let orig = tensors[t].1.as_slice()[i];
                set(probe, orig + h);
                let up = f(probe);
                set(probe, orig - h);
                let down = f(probe);
                set(probe, orig);
                std::array::from_fn(|k| (up[k] - down[k]) / (2.0 * h))
            },
        )
        .collect();
    std::array::from_fn(|k| {
        let mut offset = 0;
        analytic[k]
            .tensors()
            .into_iter()
            .map(|(name, m)| {
                let num: Vec<f64> = numeric[offset..offset + m.len()].iter().map(|v| v[k]).collect();
                offset += m.len();
                TensorCheck { name, len: m.len(), rel_err: relative_error(m.as_slice(), &num, floor) }
            })
            .collect()
    })
}
