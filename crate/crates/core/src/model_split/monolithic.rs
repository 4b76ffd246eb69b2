//! Unsplit reference training path.
//!
//! Operates on the whole [`ModelParams`] with its own loops; no segment,
//! cache or boundary machinery is involved. It follows the same documented
//! accumulation order, so split training must match it bit for bit.

use super::{Loss, ModelParams, Result, Tensor};
use crate::ledger::Digest;

/// Layer inputs and outputs of a whole-network forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.outputs.last().expect("network has layers")
    }
}

pub fn forward(params: &ModelParams, input: &Tensor) -> Trace {
    let n = params.layers.len();
    let mut inputs = Vec::with_capacity(n);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(n);
    for (l, layer) in params.layers.iter().enumerate() {
        let x = if l == 0 { input } else { &outputs[l - 1] };
        let batch = x.rows();
        let mut y = Tensor::zeros(batch, layer.fan_out);
        for b in 0..batch {
            for j in 0..layer.fan_out {
                let mut acc = 0.0;
                for i in 0..layer.fan_in {
                    acc += layer.weights[j * layer.fan_in + i] * x.get(b, i);
                }
                let z = acc + layer.bias[j];
                y.data_mut()[b * layer.fan_out + j] = if l + 1 < n {
                    params.activation.apply(z)
                } else {
                    z
                };
            }
        }
        inputs.push(x.clone());
        outputs.push(y);
    }
    Trace { inputs, outputs }
}

/// Loss value only.
pub fn loss(params: &ModelParams, input: &Tensor, targets: &Tensor, loss: Loss) -> Result<f64> {
    let trace = forward(params, input);
    loss.evaluate(trace.output(), targets).map(|(v, _)| v)
}

/// (weights, bias) gradients of one layer.
pub type DenseGrads = (Vec<f64>, Vec<f64>);

/// Parameter gradients of `loss` for one batch, one entry per layer.
pub fn gradients(
    params: &ModelParams,
    input: &Tensor,
    targets: &Tensor,
    loss: Loss,
) -> Result<(f64, Vec<DenseGrads>)> {
    let trace = forward(params, input);
    let (value, mut delta) = loss.evaluate(trace.output(), targets)?;
    let n = params.layers.len();
    let mut grads = vec![(Vec::new(), Vec::new()); n];
    for l in (0..n).rev() {
        let layer = &params.layers[l];
        let x = &trace.inputs[l];
        let batch = x.rows();
        if l + 1 < n {
            let y = &trace.outputs[l];
            for k in 0..delta.data().len() {
                let a = y.data()[k];
                delta.data_mut()[k] *= params.activation.derivative_from_output(a);
            }
        }
        let mut gw = vec![0.0; layer.fan_out * layer.fan_in];
        let mut gb = vec![0.0; layer.fan_out];
        for j in 0..layer.fan_out {
            for i in 0..layer.fan_in {
                let mut acc = 0.0;
                for b in 0..batch {
                    acc += delta.get(b, j) * x.get(b, i);
                }
                gw[j * layer.fan_in + i] = acc;
            }
            let mut acc = 0.0;
            for b in 0..batch {
                acc += delta.get(b, j);
            }
            gb[j] = acc;
        }
        let mut prev = Tensor::zeros(batch, layer.fan_in);
        for b in 0..batch {
            for i in 0..layer.fan_in {
                let mut acc = 0.0;
                for j in 0..layer.fan_out {
                    acc += delta.get(b, j) * layer.weights[j * layer.fan_in + i];
                }
                prev.data_mut()[b * layer.fan_in + i] = acc;
            }
        }
        grads[l] = (gw, gb);
        delta = prev;
    }
    Ok((value, grads))
}

pub fn train_step(
    params: &mut ModelParams,
    input: &Tensor,
    targets: &Tensor,
    loss: Loss,
    lr: f64,
) -> Result<f64> {
    let (value, grads) = gradients(params, input, targets, loss)?;
    for (layer, (gw, gb)) in params.layers.iter_mut().zip(grads) {
        for (w, g) in layer.weights.iter_mut().zip(gw) {
            *w -= lr * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
    Ok(value)
}

/// One epoch over `batches`; returns the mean batch loss and the digest of
/// the updated parameters.
pub fn train_epoch<'a, I>(
    params: &mut ModelParams,
    batches: I,
    loss: Loss,
    lr: f64,
) -> Result<(f64, Digest)>
where
    I: IntoIterator<Item = (&'a Tensor, &'a Tensor)>,
{
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, t) in batches {
        total += train_step(params, x, t, loss, lr)?;
        count += 1;
    }
    let mean = if count == 0 {
        0.0
    } else {
        total / count as f64
    };
    Ok((mean, params.digest()))
}
