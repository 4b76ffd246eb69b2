//! Dense feed-forward network that can be cut at layer boundaries.
//!
//! A network with `layer_dims = [d0, d1, ..., dL]` has `L` weight layers;
//! layer `l` maps `d_l` inputs to `d_{l+1}` outputs. Hidden layers apply the
//! configured activation, the last layer is linear and feeds the loss.
//! A cut point `c` (with `0 < c < L`) starts a new segment at layer `c`.
//!
//! # Operation order
//!
//! Every kernel below accumulates in a fixed order starting from `0.0`, with
//! no reassociation, so the split path and the monolithic path produce the
//! same bits:
//!
//! ```text
//! forward   z[b][j]  = (sum_{i asc} w[j][i]*x[b][i]) + bias[j]
//! hidden    a = act(z);  dz = da * act'(a)        (act' written in terms of a)
//! grad w    gw[j][i] = sum_{b asc} dz[b][j]*x[b][i]
//! grad bias gb[j]    = sum_{b asc} dz[b][j]
//! grad in   dx[b][i] = sum_{j asc} dz[b][j]*w[j][i]
//! sgd       p = p - lr*g
//! ```
//!
//! Initialization draws `U[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from a ChaCha8
//! stream seeded with `init_seed`: layer by layer, weights row-major, then
//! biases.

pub mod data;
pub mod monolithic;
mod tensor;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{sha256, CodecError, Decoder, Digest, Encoder};

pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("invalid cut points {cuts:?} for a {layers}-layer network")]
    InvalidCutPoints { cuts: Vec<usize>, layers: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("forward cache does not belong to the current segment parameters")]
    StaleCache,
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the activation output `a`.
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Mse,
    SoftmaxCrossEntropy,
}

impl Loss {
    /// Mean loss over the batch and its gradient with respect to `output`.
    ///
    /// MSE averages over every entry. Cross-entropy treats each target row
    /// as a probability distribution and averages over rows.
    pub fn evaluate(self, output: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
        if output.shape() != targets.shape() {
            return Err(ModelError::ShapeMismatch {
                expected: output.shape(),
                got: targets.shape(),
            });
        }
        let (rows, cols) = output.shape();
        let mut grad = Tensor::zeros(rows, cols);
        match self {
            Loss::Mse => {
                let n = (rows * cols) as f64;
                let scale = 2.0 / n;
                let mut total = 0.0;
                for (k, (y, t)) in output.data().iter().zip(targets.data()).enumerate() {
                    let d = y - t;
                    total += d * d;
                    grad.data_mut()[k] = d * scale;
                }
                Ok((total / n, grad))
            }
            Loss::SoftmaxCrossEntropy => {
                let inv_rows = 1.0 / rows as f64;
                let mut total = 0.0;
                for b in 0..rows {
                    let y = output.row(b);
                    let t = targets.row(b);
                    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for v in y {
                        s += (v - m).exp();
                    }
                    let log_s = s.ln();
                    let mut row_loss = 0.0;
                    for k in 0..cols {
                        row_loss -= t[k] * (y[k] - m - log_s);
                        let p = (y[k] - m).exp() / s;
                        grad.data_mut()[b * cols + k] = (p - t[k]) * inv_rows;
                    }
                    total += row_loss;
                }
                Ok((total * inv_rows, grad))
            }
        }
    }
}

/// Network architecture plus training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: Loss,
    pub init_seed: u64,
    pub learning_rate: f64,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(ModelError::InvalidSpec(
                "layer_dims needs at least an input and an output width".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(ModelError::InvalidSpec("layer widths must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidSpec(
                "learning_rate must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

/// One weight layer: `weights` is `fan_out x fan_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn encode(&self, enc: &mut Encoder) {
        enc.u32(self.fan_in as u32).u32(self.fan_out as u32);
        for w in &self.weights {
            enc.f64(*w);
        }
        for b in &self.bias {
            enc.f64(*b);
        }
    }

    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        let fan_in = dec.u32()? as usize;
        let fan_out = dec.u32()? as usize;
        let weights = (0..fan_in * fan_out)
            .map(|_| dec.f64())
            .collect::<Result<Vec<_>, _>>()?;
        let bias = (0..fan_out)
            .map(|_| dec.f64())
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            fan_in,
            fan_out,
            weights,
            bias,
        })
    }
}

/// Canonical bytes of a layer list: per layer `u32 fan_in, u32 fan_out`,
/// then weights and biases as f64. Concatenating the encodings of a model's
/// segments yields the encoding of the whole model.
pub fn encode_layers(layers: &[Layer]) -> Vec<u8> {
    let mut enc = Encoder::new();
    for l in layers {
        l.encode(&mut enc);
    }
    enc.finish()
}

pub fn decode_layers(bytes: &[u8], count: usize) -> Result<Vec<Layer>, CodecError> {
    let mut dec = Decoder::new(bytes);
    let layers = (0..count)
        .map(|_| Layer::decode(&mut dec))
        .collect::<Result<Vec<_>, _>>()?;
    dec.finish()?;
    Ok(layers)
}

/// Gradients for one layer, shaped like the layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The full, unsplit parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

impl ModelParams {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_layers(&self.layers)
    }

    pub fn digest(&self) -> Digest {
        sha256(&[&self.to_bytes()])
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

pub fn init_model(spec: &ModelSpec) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
    let layers = spec
        .layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let weights = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            let bias = (0..fan_out).map(|_| dist.sample(&mut rng)).collect();
            Layer {
                fan_in,
                fan_out,
                weights,
                bias,
            }
        })
        .collect();
    Ok(ModelParams {
        activation: spec.activation,
        layers,
    })
}

/// Checks that cut points are strictly increasing and interior to
/// `1..num_layers`.
pub fn validate_cut_points(cut_points: &[usize], num_layers: usize) -> Result<()> {
    let interior = cut_points.iter().all(|c| *c > 0 && *c < num_layers);
    let increasing = cut_points.windows(2).all(|w| w[0] < w[1]);
    if interior && increasing {
        Ok(())
    } else {
        Err(ModelError::InvalidCutPoints {
            cuts: cut_points.to_vec(),
            layers: num_layers,
        })
    }
}

/// Layer ranges `[start, end)` produced by `cut_points`.
pub fn segment_ranges(cut_points: &[usize], num_layers: usize) -> Vec<(usize, usize)> {
    let mut bounds = vec![0];
    bounds.extend_from_slice(cut_points);
    bounds.push(num_layers);
    bounds.windows(2).map(|w| (w[0], w[1])).collect()
}

/// A contiguous slice of the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub index: usize,
    pub start: usize,
    pub end: usize,
    pub total_layers: usize,
    pub activation: Activation,
    pub layers: Vec<Layer>,
    version: u64,
}

impl Segment {
    pub fn new(
        index: usize,
        start: usize,
        total_layers: usize,
        activation: Activation,
        layers: Vec<Layer>,
    ) -> Self {
        Self {
            index,
            start,
            end: start + layers.len(),
            total_layers,
            activation,
            layers,
            version: 0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("segments are non-empty").fan_out
    }

    /// Whether this segment ends with the network's linear output layer.
    pub fn is_last(&self) -> bool {
        self.end == self.total_layers
    }

    pub fn layer_count(&self) -> usize {
        self.end - self.start
    }

    /// Bumped on every parameter change; invalidates outstanding caches.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_layers(&self.layers)
    }

    /// Replaces the parameters with a decoded copy (a handoff between workers).
    pub fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let layers = decode_layers(bytes, self.layer_count())?;
        for (new, old) in layers.iter().zip(&self.layers) {
            if (new.fan_in, new.fan_out) != (old.fan_in, old.fan_out) {
                return Err(ModelError::ShapeMismatch {
                    expected: (old.fan_out, old.fan_in),
                    got: (new.fan_out, new.fan_in),
                });
            }
        }
        self.layers = layers;
        self.version += 1;
        Ok(())
    }

    fn hidden(&self, local: usize) -> bool {
        self.start + local + 1 < self.total_layers
    }
}

pub fn split_model(params: &ModelParams, cut_points: &[usize]) -> Result<Vec<Segment>> {
    let n = params.num_layers();
    validate_cut_points(cut_points, n)?;
    Ok(segment_ranges(cut_points, n)
        .into_iter()
        .enumerate()
        .map(|(index, (start, end))| {
            Segment::new(
                index,
                start,
                n,
                params.activation,
                params.layers[start..end].to_vec(),
            )
        })
        .collect())
}

/// Concatenates segments back into a full parameter set.
pub fn reassemble(segments: &[Segment]) -> Result<ModelParams> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.end <= s.start {
            return Err(ModelError::InvalidSpec(format!(
                "segment {} covers [{}, {}), expected start {next}",
                s.index, s.start, s.end
            )));
        }
        next = s.end;
    }
    let first = segments
        .first()
        .ok_or_else(|| ModelError::InvalidSpec("no segments".into()))?;
    if next != first.total_layers {
        return Err(ModelError::InvalidSpec(format!(
            "segments cover {next} of {} layers",
            first.total_layers
        )));
    }
    Ok(ModelParams {
        activation: first.activation,
        layers: segments.iter().flat_map(|s| s.layers.clone()).collect(),
    })
}

/// SHA-256 over the concatenated canonical bytes of `segments`, in order.
/// Equal to [`ModelParams::digest`] of the reassembled model.
pub fn segments_digest(segments: &[Segment]) -> Digest {
    let bytes: Vec<u8> = segments.iter().flat_map(|s| s.to_bytes()).collect();
    sha256(&[&bytes])
}

/// Intermediates kept by [`forward_segment`] for the matching backward call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    segment_index: usize,
    version: u64,
    /// Input of each layer.
    inputs: Vec<Tensor>,
    /// Output of each layer (after the activation on hidden layers).
    outputs: Vec<Tensor>,
}

pub(crate) fn layer_forward(layer: &Layer, x: &Tensor, act: Option<Activation>) -> Tensor {
    let batch = x.rows();
    let mut out = Tensor::zeros(batch, layer.fan_out);
    for b in 0..batch {
        let xr = x.row(b);
        for j in 0..layer.fan_out {
            let w = &layer.weights[j * layer.fan_in..(j + 1) * layer.fan_in];
            let mut acc = 0.0;
            for i in 0..layer.fan_in {
                acc += w[i] * xr[i];
            }
            let z = acc + layer.bias[j];
            out.data_mut()[b * layer.fan_out + j] = match act {
                Some(a) => a.apply(z),
                None => z,
            };
        }
    }
    out
}

pub fn forward_segment(seg: &Segment, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
    if input.cols() != seg.input_width() {
        return Err(ModelError::ShapeMismatch {
            expected: (input.rows(), seg.input_width()),
            got: input.shape(),
        });
    }
    let mut inputs = Vec::with_capacity(seg.layers.len());
    let mut outputs = Vec::with_capacity(seg.layers.len());
    let mut x = input.clone();
    for (local, layer) in seg.layers.iter().enumerate() {
        let act = seg.hidden(local).then_some(seg.activation);
        let y = layer_forward(layer, &x, act);
        inputs.push(x);
        outputs.push(y.clone());
        x = y;
    }
    Ok((
        x,
        ForwardCache {
            segment_index: seg.index,
            version: seg.version,
            inputs,
            outputs,
        },
    ))
}

pub fn backward_segment(
    seg: &Segment,
    cache: &ForwardCache,
    upstream_grad: &Tensor,
) -> Result<(Vec<LayerGrads>, Tensor)> {
    if cache.segment_index != seg.index || cache.version != seg.version {
        return Err(ModelError::StaleCache);
    }
    let out_shape = cache.outputs.last().expect("non-empty segment").shape();
    if upstream_grad.shape() != out_shape {
        return Err(ModelError::ShapeMismatch {
            expected: out_shape,
            got: upstream_grad.shape(),
        });
    }
    let mut grads = Vec::with_capacity(seg.layers.len());
    let mut upstream = upstream_grad.clone();
    for local in (0..seg.layers.len()).rev() {
        let layer = &seg.layers[local];
        let x = &cache.inputs[local];
        let y = &cache.outputs[local];
        let batch = x.rows();
        let mut dz = upstream;
        if seg.hidden(local) {
            for (d, a) in dz.data_mut().iter_mut().zip(y.data()) {
                *d *= seg.activation.derivative_from_output(*a);
            }
        }
        let mut gw = vec![0.0; layer.fan_in * layer.fan_out];
        let mut gb = vec![0.0; layer.fan_out];
        for j in 0..layer.fan_out {
            for i in 0..layer.fan_in {
                let mut acc = 0.0;
                for b in 0..batch {
                    acc += dz.get(b, j) * x.get(b, i);
                }
                gw[j * layer.fan_in + i] = acc;
            }
            let mut acc = 0.0;
            for b in 0..batch {
                acc += dz.get(b, j);
            }
            gb[j] = acc;
        }
        let mut dx = Tensor::zeros(batch, layer.fan_in);
        for b in 0..batch {
            for i in 0..layer.fan_in {
                let mut acc = 0.0;
                for j in 0..layer.fan_out {
                    acc += dz.get(b, j) * layer.weights[j * layer.fan_in + i];
                }
                dx.data_mut()[b * layer.fan_in + i] = acc;
            }
        }
        grads.push(LayerGrads {
            weights: gw,
            bias: gb,
        });
        upstream = dx;
    }
    grads.reverse();
    Ok((grads, upstream))
}

pub(crate) fn sgd_layer(layer: &mut Layer, grads: &LayerGrads, lr: f64) {
    for (w, g) in layer.weights.iter_mut().zip(&grads.weights) {
        *w -= lr * g;
    }
    for (b, g) in layer.bias.iter_mut().zip(&grads.bias) {
        *b -= lr * g;
    }
}

/// Plain SGD step on one segment.
pub fn apply_update(seg: &mut Segment, grads: &[LayerGrads], lr: f64) {
    for (layer, g) in seg.layers.iter_mut().zip(grads) {
        sgd_layer(layer, g, lr);
    }
    seg.version += 1;
}

/// Forward through every segment, loss on the last, backward in reverse
/// with each segment updated right after its own backward pass. Returns the
/// batch loss.
pub fn train_step_split(
    segments: &mut [Segment],
    input: &Tensor,
    targets: &Tensor,
    loss: Loss,
    lr: f64,
) -> Result<f64> {
    let mut caches = Vec::with_capacity(segments.len());
    let mut x = input.clone();
    for seg in segments.iter() {
        let (y, cache) = forward_segment(seg, &x)?;
        caches.push(cache);
        x = y;
    }
    let (value, mut grad) = loss.evaluate(&x, targets)?;
    for (seg, cache) in segments.iter_mut().zip(&caches).rev() {
        let (g, down) = backward_segment(seg, cache, &grad)?;
        apply_update(seg, &g, lr);
        grad = down;
    }
    Ok(value)
}

/// One epoch of split training over `batches` in order. Returns the mean
/// batch loss and the digest of the resulting parameters.
pub fn train_epoch_split<'a, I>(
    segments: &mut [Segment],
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
        total += train_step_split(segments, x, t, loss, lr)?;
        count += 1;
    }
    let mean = if count == 0 {
        0.0
    } else {
        total / count as f64
    };
    Ok((mean, segments_digest(segments)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(dims: &[usize], seed: u64) -> ModelSpec {
        ModelSpec {
            layer_dims: dims.to_vec(),
            activation: Activation::Tanh,
            loss: Loss::Mse,
            init_seed: seed,
            learning_rate: 0.1,
        }
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_model(&spec(&[2, 1], 5)).unwrap();
        assert_eq!(a, init_model(&spec(&[2, 1], 5)).unwrap());
        assert_eq!(a.layers[0].weights.len(), 2);
        assert_eq!(a.layers[0].bias.len(), 1);
        let bound = 1.0 / 2f64.sqrt();
        assert!(a.layers[0]
            .weights
            .iter()
            .chain(&a.layers[0].bias)
            .all(|v| v.abs() <= bound));
        assert_ne!(a, init_model(&spec(&[2, 1], 6)).unwrap());
    }

    #[test]
    fn invalid_specs() {
        assert!(init_model(&spec(&[3], 1)).is_err());
        assert!(init_model(&spec(&[3, 0, 1], 1)).is_err());
        let mut s = spec(&[3, 1], 1);
        s.learning_rate = 0.0;
        assert!(init_model(&s).is_err());
    }

    #[test]
    fn split_ranges_and_identity() {
        let p = init_model(&spec(&[3, 4, 4, 4, 2], 1)).unwrap();
        let whole = split_model(&p, &[]).unwrap();
        assert_eq!(whole.len(), 1);
        assert_eq!((whole[0].start, whole[0].end), (0, 4));
        let two = split_model(&p, &[2]).unwrap();
        assert_eq!(
            two.iter().map(|s| (s.start, s.end)).collect::<Vec<_>>(),
            vec![(0, 2), (2, 4)]
        );
        assert_eq!(reassemble(&two).unwrap(), p);
        assert_eq!(segments_digest(&two), p.digest());
        for bad in [vec![0], vec![4], vec![2, 2], vec![3, 1]] {
            assert!(matches!(
                split_model(&p, &bad),
                Err(ModelError::InvalidCutPoints { .. })
            ));
        }
    }

    #[test]
    fn zero_parameters_give_activation_of_zero() {
        let seg = Segment::new(0, 0, 2, Activation::Sigmoid, vec![Layer::zeros(3, 2)]);
        let x = Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.25, 9.0]).unwrap();
        let (y, _) = forward_segment(&seg, &x).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.5));
        let wrong = Tensor::zeros(2, 4);
        assert!(matches!(
            forward_segment(&seg, &wrong),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = init_model(&spec(&[4, 3, 2], 2)).unwrap();
        let segs = split_model(&p, &[]).unwrap();
        let x = Tensor::from_vec(2, 4, (0..8).map(|v| v as f64 / 8.0).collect()).unwrap();
        let (_, cache) = forward_segment(&segs[0], &x).unwrap();
        let (grads, down) = backward_segment(&segs[0], &cache, &Tensor::zeros(2, 2)).unwrap();
        assert!(grads
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|v| *v == 0.0)));
        assert!(down.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = init_model(&spec(&[4, 3, 2], 2)).unwrap();
        let mut segs = split_model(&p, &[1]).unwrap();
        let x = Tensor::zeros(1, 4);
        let (_, cache) = forward_segment(&segs[0], &x).unwrap();
        let g = Tensor::zeros(1, 3);
        assert_eq!(
            backward_segment(&segs[1], &cache, &Tensor::zeros(1, 2)).unwrap_err(),
            ModelError::StaleCache
        );
        let (grads, _) = backward_segment(&segs[0], &cache, &g).unwrap();
        apply_update(&mut segs[0], &grads, 0.1);
        assert_eq!(
            backward_segment(&segs[0], &cache, &g).unwrap_err(),
            ModelError::StaleCache
        );
        let (_, cache) = forward_segment(&segs[0], &x).unwrap();
        assert!(matches!(
            backward_segment(&segs[0], &cache, &Tensor::zeros(2, 3)),
            Err(ModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn segment_bytes_round_trip() {
        let p = init_model(&spec(&[4, 3, 2], 2)).unwrap();
        let mut segs = split_model(&p, &[1]).unwrap();
        let bytes = segs[1].to_bytes();
        let before = segs[1].version();
        segs[1].load_bytes(&bytes).unwrap();
        assert_eq!(segs[1].layers, p.layers[1..].to_vec());
        assert!(segs[1].version() > before);
        assert!(segs[1].load_bytes(&bytes[..bytes.len() - 1]).is_err());
        let t = Tensor::from_vec(1, 2, vec![0.1, -3.5]).unwrap();
        assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
        assert_eq!(t.to_bytes().len() as u64, Tensor::wire_size(1, 2));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero_per_row() {
        let y = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let t = Tensor::from_vec(2, 3, vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let (l, g) = Loss::SoftmaxCrossEntropy.evaluate(&y, &t).unwrap();
        assert!(l > 0.0);
        for b in 0..2 {
            assert!(g.row(b).iter().sum::<f64>().abs() < 1e-15);
        }
    }
}
