//! Finite-difference gradient oracle.

use databright::model_split::{
    backward_segment, forward_segment, monolithic, split_model, Loss, ModelParams, Tensor,
};

/// Central finite differences of the monolithic loss, one parameter at a
/// time. Independent of every backward pass.
pub fn numeric_gradients(
    params: &ModelParams,
    x: &Tensor,
    t: &Tensor,
    loss: Loss,
    h: f64,
) -> Vec<f64> {
    let mut out = Vec::new();
    for l in 0..params.layers.len() {
        let n_w = params.layers[l].weights.len();
        let n_b = params.layers[l].bias.len();
        for k in 0..n_w + n_b {
            let eval = |delta: f64| {
                let mut p = params.clone();
                if k < n_w {
                    p.layers[l].weights[k] += delta;
                } else {
                    p.layers[l].bias[k - n_w] += delta;
                }
                monolithic::loss(&p, x, t, loss).unwrap()
            };
            out.push((eval(h) - eval(-h)) / (2.0 * h));
        }
    }
    out
}

/// Analytic gradients through the split path, flattened like
/// `numeric_gradients`.
pub fn split_gradients(
    params: &ModelParams,
    cuts: &[usize],
    x: &Tensor,
    t: &Tensor,
    loss: Loss,
) -> Vec<f64> {
    let segs = split_model(params, cuts).unwrap();
    let mut caches = Vec::new();
    let mut act = x.clone();
    for s in &segs {
        let (y, c) = forward_segment(s, &act).unwrap();
        caches.push(c);
        act = y;
    }
    let (_, mut g) = loss.evaluate(&act, t).unwrap();
    let mut per_segment = Vec::new();
    for (s, c) in segs.iter().zip(&caches).rev() {
        let (grads, down) = backward_segment(s, c, &g).unwrap();
        per_segment.push(grads);
        g = down;
    }
    per_segment.reverse();
    per_segment
        .into_iter()
        .flatten()
        .flat_map(|lg| lg.weights.into_iter().chain(lg.bias))
        .collect()
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs());
            if scale == 0.0 {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .fold(0.0, f64::max)
}
