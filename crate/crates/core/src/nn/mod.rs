//! Minimal dense-network engine.
//!
//! Affine + ReLU stacks with a linear logit layer, softmax cross-entropy,
//! squared-error reconstruction loss, Adam, inverted dropout, and a
//! central-finite-difference gradient oracle. Everything is a deterministic
//! function of explicit inputs plus an explicit RNG state.

mod sae;
mod train;

pub use sae::{pretrain_sae, SaeLayerLog};
pub use train::{
    classification_accuracy, train_supervised, EarlyStopConfig, EpochRecord, TrainLog, TrainScope,
};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One affine layer: `out = w . in + b`, weights stored out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<S> {
    pub w: Array2<S>,
    pub b: Array1<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }
}

/// An MLP: ReLU hidden layers followed by a linear logit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<S> {
    pub layers: Vec<Dense<S>>,
}

impl<S: Scalar> MlpParams<S> {
    /// He-style uniform fan-in initialization with zero biases.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::param("dims", "need at least input and output dims"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::param("dims", format!("zero layer width in {dims:?}")));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                S::cast_from(rng.gen_range(-limit..limit))
            });
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
            });
        }
        Ok(MlpParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    /// Layer widths including input and output.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.w.nrows()));
        dims
    }

    pub fn n_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    fn check_finite(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.w.iter().any(|v| !v.is_finite()) || layer.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite parameter in layer {i}")));
            }
        }
        Ok(())
    }
}

/// Gradients shaped like [`MlpParams`].
pub type Grads<S> = Vec<Dense<S>>;

/// Intermediates from a forward pass, sufficient for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    /// Batch inputs, batch x in_dim.
    pub inputs: Array2<S>,
    /// Post-activation (ReLU, then dropout if masked) per hidden layer.
    pub hidden: Vec<Array2<S>>,
    /// Final affine outputs, batch x out_dim.
    pub logits: Array2<S>,
}

fn affine<S: Scalar>(x: &Array2<S>, layer: &Dense<S>) -> Array2<S> {
    let mut out = x.dot(&layer.w.t());
    out += &layer.b;
    out
}

/// Forward pass. `dropout` supplies one mask per hidden layer; masks hold
/// 0 or the inverted-dropout scale and multiply the post-ReLU activations.
pub fn forward_mlp<S: Scalar>(
    params: &MlpParams<S>,
    inputs: &Array2<S>,
    dropout: Option<&[Array2<S>]>,
) -> Result<ForwardCache<S>> {
    if inputs.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "input dim {} does not match first layer {}",
            inputs.ncols(),
            params.input_dim()
        )));
    }
    if let Some(masks) = dropout {
        if masks.len() != params.n_hidden() {
            return Err(Error::Shape(format!(
                "{} dropout masks for {} hidden layers",
                masks.len(),
                params.n_hidden()
            )));
        }
    }
    let n_hidden = params.n_hidden();
    let mut hidden = Vec::with_capacity(n_hidden);
    let mut current = inputs.clone();
    for (l, layer) in params.layers[..n_hidden].iter().enumerate() {
        let mut h = affine(&current, layer);
        h.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
        if let Some(masks) = dropout {
            if h.dim() != masks[l].dim() {
                return Err(Error::Shape(format!(
                    "dropout mask {:?} for activation {:?} at layer {l}",
                    masks[l].dim(),
                    h.dim()
                )));
            }
            h *= &masks[l];
        }
        current = h.clone();
        hidden.push(h);
    }
    let logits = affine(&current, params.layers.last().unwrap());
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in forward pass".into()));
    }
    Ok(ForwardCache {
        inputs: inputs.clone(),
        hidden,
        logits,
    })
}

/// Row-wise softmax with log-sum-exp stabilization.
pub fn softmax<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Mean softmax cross-entropy over the batch for two-class logits.
/// Returns the loss and `dloss/dlogits = (softmax - onehot) / n`.
pub fn loss_cross_entropy<S: Scalar>(
    logits: &Array2<S>,
    labels: &[usize],
) -> Result<(f64, Array2<S>)> {
    if logits.ncols() != 2 {
        return Err(Error::Shape(format!("expected 2-class logits, got {}", logits.ncols())));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows vs {} labels",
            logits.nrows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::param("labels", format!("label {bad} outside {{0,1}}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits in loss".into()));
    }
    let n = labels.len();
    let inv_n = S::cast_from(1.0 / n as f64);
    let mut dlogits = softmax(logits);
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp().cast_f64()).sum::<f64>().ln()
            + max.cast_f64();
        loss += lse - row[label].cast_f64();
        dlogits[[i, label]] = dlogits[[i, label]] - S::one();
    }
    dlogits.mapv_inplace(|v| v * inv_n);
    Ok((loss / n as f64, dlogits))
}

/// Mean squared-error reconstruction loss `mean_i 0.5 ||x_i - z_i||^2`.
/// Returns the loss and `dloss/dz = (z - x) / n`.
pub fn loss_reconstruction<S: Scalar>(x: &Array2<S>, z: &Array2<S>) -> Result<(f64, Array2<S>)> {
    if x.dim() != z.dim() {
        return Err(Error::Shape(format!("x {:?} vs z {:?}", x.dim(), z.dim())));
    }
    let n = x.nrows() as f64;
    let diff = z - x;
    let loss = 0.5 * diff.iter().map(|v| v.cast_f64() * v.cast_f64()).sum::<f64>() / n;
    let dz = diff.mapv(|v| v / S::cast_from(n));
    Ok((loss, dz))
}

/// ReLU/dropout derivative read off the cached post-activation: positions
/// with zero output pass no gradient; surviving positions carry the mask
/// scale (1 when no mask was applied).
fn activation_deriv<S: Scalar>(post: &Array2<S>, mask: Option<&Array2<S>>) -> Array2<S> {
    match mask {
        Some(m) => {
            let mut d = m.clone();
            d.zip_mut_with(post, |dv, &pv| {
                if pv <= S::zero() {
                    *dv = S::zero();
                }
            });
            d
        }
        None => post.mapv(|v| if v > S::zero() { S::one() } else { S::zero() }),
    }
}

/// Exact reverse-mode gradients of the scalar loss wrt every weight and bias.
/// `dropout` must replay the masks used in the forward pass.
pub fn backward_gradients<S: Scalar>(
    params: &MlpParams<S>,
    cache: &ForwardCache<S>,
    dlogits: &Array2<S>,
    dropout: Option<&[Array2<S>]>,
) -> Result<Grads<S>> {
    if dlogits.dim() != cache.logits.dim() {
        return Err(Error::Shape(format!(
            "dlogits {:?} vs logits {:?}",
            dlogits.dim(),
            cache.logits.dim()
        )));
    }
    backward_through(params, cache, dlogits.clone(), dropout, params.layers.len())
}

/// Backpropagate from a gradient on the top hidden activation instead of the
/// logits; used for end-to-end tuning where a downstream network supplies
/// the gradient. Returns gradients for the hidden layers only.
pub fn backward_from_hidden<S: Scalar>(
    params: &MlpParams<S>,
    cache: &ForwardCache<S>,
    d_hidden_top: &Array2<S>,
    dropout: Option<&[Array2<S>]>,
) -> Result<Grads<S>> {
    let n_hidden = params.n_hidden();
    if n_hidden == 0 {
        return Err(Error::Shape("no hidden layers".into()));
    }
    let top = &cache.hidden[n_hidden - 1];
    if d_hidden_top.dim() != top.dim() {
        return Err(Error::Shape(format!(
            "d_hidden {:?} vs activation {:?}",
            d_hidden_top.dim(),
            top.dim()
        )));
    }
    let mask = dropout.map(|m| &m[n_hidden - 1]);
    let delta = d_hidden_top * &activation_deriv(top, mask);
    backward_through(params, cache, delta, dropout, n_hidden)
}

/// Common reverse sweep. `delta` is the gradient on the pre-activation of
/// layer `top_layer - 1`; returns gradients for layers `0..top_layer`.
fn backward_through<S: Scalar>(
    params: &MlpParams<S>,
    cache: &ForwardCache<S>,
    mut delta: Array2<S>,
    dropout: Option<&[Array2<S>]>,
    top_layer: usize,
) -> Result<Grads<S>> {
    if cache.hidden.len() != params.n_hidden() {
        return Err(Error::Shape("cache does not match network depth".into()));
    }
    let mut grads: Vec<Dense<S>> = Vec::with_capacity(top_layer);
    for l in (0..top_layer).rev() {
        let input = if l == 0 { &cache.inputs } else { &cache.hidden[l - 1] };
        let dw = delta.t().dot(input);
        let db = delta.sum_axis(Axis(0));
        grads.push(Dense { w: dw, b: db });
        if l > 0 {
            let mut dprev = delta.dot(&params.layers[l].w);
            let mask = dropout.map(|m| &m[l - 1]);
            dprev *= &activation_deriv(&cache.hidden[l - 1], mask);
            delta = dprev;
        }
    }
    grads.reverse();
    Ok(grads)
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub m: Vec<Dense<S>>,
    pub v: Vec<Dense<S>>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &MlpParams<S>, learning_rate: f64) -> Self {
        let zeros: Vec<Dense<S>> = params
            .layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Adam over an arbitrary prefix of layers (for staged training the
    /// state covers exactly the trainable layers).
    pub fn for_layers(layers: &[Dense<S>], learning_rate: f64) -> Self {
        let zeros: Vec<Dense<S>> = layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn adam_update_tensor<S: Scalar>(
    param: &mut Array2<S>,
    grad: &Array2<S>,
    m: &mut Array2<S>,
    v: &mut Array2<S>,
    lr: f64,
    c1: f64,
    c2: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = S::cast_from(beta1);
    let b2 = S::cast_from(beta2);
    let one = S::one();
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = m.cast_f64() / c1;
            let v_hat = v.cast_f64() / c2;
            *p = *p - S::cast_from(lr * m_hat / (v_hat.sqrt() + eps));
        });
}

fn adam_update_vector<S: Scalar>(
    param: &mut Array1<S>,
    grad: &Array1<S>,
    m: &mut Array1<S>,
    v: &mut Array1<S>,
    lr: f64,
    c1: f64,
    c2: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let b1 = S::cast_from(beta1);
    let b2 = S::cast_from(beta2);
    let one = S::one();
    ndarray::Zip::from(param)
        .and(grad)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = m.cast_f64() / c1;
            let v_hat = v.cast_f64() / c2;
            *p = *p - S::cast_from(lr * m_hat / (v_hat.sqrt() + eps));
        });
}

/// One bias-corrected Adam update over a layer slice.
pub fn adam_step_layers<S: Scalar>(
    layers: &mut [Dense<S>],
    grads: &[Dense<S>],
    state: &mut AdamState<S>,
) -> Result<()> {
    if layers.len() != grads.len() || layers.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam: {} layers, {} grads, {} states",
            layers.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    // Bias-correction denominators for the first and second moments.
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((layer, grad), (m, v)) in layers
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if layer.w.dim() != grad.w.dim() {
            return Err(Error::Shape(format!(
                "adam: param {:?} vs grad {:?}",
                layer.w.dim(),
                grad.w.dim()
            )));
        }
        adam_update_tensor(
            &mut layer.w, &grad.w, &mut m.w, &mut v.w, state.learning_rate, c1, c2,
            state.beta1, state.beta2, state.epsilon,
        );
        adam_update_vector(
            &mut layer.b, &grad.b, &mut m.b, &mut v.b, state.learning_rate, c1, c2,
            state.beta1, state.beta2, state.epsilon,
        );
    }
    Ok(())
}

/// One Adam update over full network parameters.
pub fn adam_step<S: Scalar>(
    params: &mut MlpParams<S>,
    grads: &Grads<S>,
    state: &mut AdamState<S>,
) -> Result<()> {
    adam_step_layers(&mut params.layers, grads, state)?;
    params.check_finite()
}

/// Inverted-dropout keep mask: entries are `1/(1-rate)` with probability
/// `1-rate` and 0 otherwise, so expectations match the unmasked pass.
pub fn dropout_mask<S: Scalar>(shape: (usize, usize), rate: f64, rng: &mut impl Rng) -> Array2<S> {
    debug_assert!((0.0..1.0).contains(&rate));
    if rate == 0.0 {
        return Array2::from_elem(shape, S::one());
    }
    let keep = 1.0 - rate;
    let scale = S::cast_from(1.0 / keep);
    Array2::from_shape_fn(shape, |_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            S::zero()
        }
    })
}

/// Build one mask per hidden layer for a batch.
pub fn dropout_masks<S: Scalar>(
    params: &MlpParams<S>,
    batch: usize,
    rate: f64,
    rng: &mut impl Rng,
) -> Vec<Array2<S>> {
    params.layers[..params.n_hidden()]
        .iter()
        .map(|l| dropout_mask((batch, l.w.nrows()), rate, rng))
        .collect()
}

/// Central-finite-difference gradient oracle.
///
/// Compares backprop gradients of the cross-entropy loss against
/// `(L(p+eps) - L(p-eps)) / 2 eps` on up to `max_coords` sampled parameter
/// coordinates and reports the max relative error. Dropout is disabled.
pub fn finite_diff_check<S: Scalar>(
    params: &MlpParams<S>,
    inputs: &Array2<S>,
    labels: &[usize],
    epsilon: f64,
    max_coords: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::param("epsilon", "must be in [1e-7, 1e-3]"));
    }
    let cache = forward_mlp(params, inputs, None)?;
    let (_, dlogits) = loss_cross_entropy(&cache.logits, labels)?;
    let analytic = backward_gradients(params, &cache, &dlogits, None)?;

    let loss_at = |p: &MlpParams<S>| -> Result<f64> {
        let c = forward_mlp(p, inputs, None)?;
        Ok(loss_cross_entropy(&c.logits, labels)?.0)
    };

    // Enumerate all (layer, kind, index) coordinates, then subsample.
    let mut coords: Vec<(usize, bool, usize)> = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        for i in 0..layer.w.len() {
            coords.push((l, true, i));
        }
        for i in 0..layer.b.len() {
            coords.push((l, false, i));
        }
    }
    let picked: Vec<(usize, bool, usize)> = if coords.len() <= max_coords {
        coords
    } else {
        (0..max_coords)
            .map(|_| coords[rng.gen_range(0..coords.len())])
            .collect()
    };

    let mut max_rel = 0.0f64;
    let mut work = params.clone();
    for (l, is_w, idx) in picked {
        let (orig, grad) = if is_w {
            let slice = work.layers[l].w.as_slice_mut().unwrap();
            (slice[idx], analytic[l].w.as_slice().unwrap()[idx].cast_f64())
        } else {
            let slice = work.layers[l].b.as_slice_mut().unwrap();
            (slice[idx], analytic[l].b.as_slice().unwrap()[idx].cast_f64())
        };
        let set = |w: &mut MlpParams<S>, v: S| {
            if is_w {
                w.layers[l].w.as_slice_mut().unwrap()[idx] = v;
            } else {
                w.layers[l].b.as_slice_mut().unwrap()[idx] = v;
            }
        };
        set(&mut work, orig + S::cast_from(epsilon));
        let plus = loss_at(&work)?;
        set(&mut work, orig - S::cast_from(epsilon));
        let minus = loss_at(&work)?;
        set(&mut work, orig);
        let numeric = (plus - minus) / (2.0 * epsilon);
        let denom = grad.abs().max(numeric.abs()).max(1e-8);
        let rel = (grad - numeric).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    dims: Vec<usize>,
    step_count: u64,
    dtype: String,
}

/// Write network parameters: one JSON header line, then raw little-endian
/// `f32` payloads per tensor (w then b, layer by layer). Bit-exact.
pub fn write_mlp(params: &MlpParams<f32>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        dims: params.dims(),
        step_count: 0,
        dtype: "f32".into(),
    };
    let mut line = serde_json::to_string(&header).map_err(|e| Error::json("checkpoint", e))?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for layer in &params.layers {
        for &v in layer.w.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
        for &v in layer.b.iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a checkpoint written by [`write_mlp`].
pub fn read_mlp(path: &Path) -> Result<MlpParams<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unterminated header: {e}"),
        })?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let expected: usize = header
        .dims
        .windows(2)
        .map(|p| p[0] * p[1] + p[1])
        .sum();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != expected * 4 {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() / 4,
        });
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut layers = Vec::new();
    for pair in header.dims.windows(2) {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w_data: Vec<f32> = values.by_ref().take(fan_out * fan_in).collect();
        let b_data: Vec<f32> = values.by_ref().take(fan_out).collect();
        layers.push(Dense {
            w: Array2::from_shape_vec((fan_out, fan_in), w_data)
                .map_err(|e| Error::Shape(e.to_string()))?,
            b: Array1::from_vec(b_data),
        });
    }
    Ok(MlpParams { layers })
}

/// Argmax class per row; ties break toward the lower class index.
pub fn argmax_rows<S: Scalar>(probs: &Array2<S>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;

    fn seeded(path: u64) -> rand_chacha::ChaCha8Rng {
        crate::rng::stream(1234, &[path])
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let params = MlpParams::<f64> {
            layers: vec![Dense::zeros(3, 4), Dense::zeros(2, 3)],
        };
        let x = Array2::from_elem((5, 4), 1.7);
        let cache = forward_mlp(&params, &x, None).unwrap();
        assert!(cache.logits.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_layer_hand_case() {
        // W=[[2]], b=[-1], input [2] -> logit [3]
        let params = MlpParams::<f64> {
            layers: vec![Dense {
                w: array![[2.0]],
                b: array![-1.0],
            }],
        };
        let cache = forward_mlp(&params, &array![[2.0]], None).unwrap();
        assert_relative_eq!(cache.logits[[0, 0]], 3.0);
    }

    #[test]
    fn relu_kills_negative() {
        let params = MlpParams::<f64> {
            layers: vec![
                Dense { w: array![[1.0]], b: array![0.0] },
                Dense { w: array![[1.0]], b: array![0.0] },
            ],
        };
        let cache = forward_mlp(&params, &array![[-5.0]], None).unwrap();
        assert_eq!(cache.logits[[0, 0]], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = array![[0.0, 0.0], [0.0, 0.0]];
        let (loss, _) = loss_cross_entropy(&logits, &[0, 1]).unwrap();
        assert_relative_eq!(loss, (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let logits = array![[20.0, 0.0]];
        let (loss, _) = loss_cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn cross_entropy_closed_form() {
        // logits (1, -1), label 1 -> ln(1 + e^2)
        let logits = array![[1.0, -1.0]];
        let (loss, _) = loss_cross_entropy(&logits, &[1]).unwrap();
        assert_relative_eq!(loss, (1.0 + (2.0f64).exp()).ln(), epsilon = 1e-12);
        assert_relative_eq!(loss, 2.126928011, epsilon = 1e-8);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = seeded(1);
        use rand::Rng;
        let logits = Array2::from_shape_fn((20, 2), |_| rng.gen_range(-30.0..30.0));
        let p = softmax(&logits);
        for row in p.rows() {
            let s: f64 = row.sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let shifted = &logits + 7.5;
        let q = softmax(&shifted);
        for (a, b) in p.iter().zip(q.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn reconstruction_cases() {
        let x = array![[1.0, 0.0]];
        let (zero, _) = loss_reconstruction(&x, &x).unwrap();
        assert_eq!(zero, 0.0);
        let (half, dz) = loss_reconstruction(&x, &array![[0.0, 0.0]]).unwrap();
        assert_relative_eq!(half, 0.5);
        assert_relative_eq!(dz[[0, 0]], -1.0);
        let (big, _) = loss_reconstruction(&array![[3.0, 4.0]], &array![[0.0, 0.0]]).unwrap();
        assert_relative_eq!(big, 12.5);
    }

    #[test]
    fn backward_zero_dlogits_gives_zero_grads() {
        let mut rng = seeded(2);
        let params = MlpParams::<f64>::init(&[4, 6, 2], &mut rng).unwrap();
        use rand::Rng;
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let cache = forward_mlp(&params, &x, None).unwrap();
        let dlogits = Array2::zeros((3, 2));
        let grads = backward_gradients(&params, &cache, &dlogits, None).unwrap();
        for g in grads {
            assert!(g.w.iter().all(|&v| v == 0.0));
            assert!(g.b.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn linear_layer_quadratic_loss_gradient() {
        // loss = 0.5 ||Wx - t||^2 on a 2x2 case: dW = (Wx - t) x^T.
        let w = array![[1.0, 2.0], [3.0, -1.0]];
        let x = array![[0.5, -1.5]];
        let t = array![[1.0, -2.0]];
        let params = MlpParams::<f64> {
            layers: vec![Dense { w: w.clone(), b: Array1::zeros(2) }],
        };
        let cache = forward_mlp(&params, &x, None).unwrap();
        let (_, dz) = loss_reconstruction(&t, &cache.logits).unwrap();
        let grads = backward_gradients(&params, &cache, &dz, None).unwrap();
        let residual = &cache.logits - &t; // 1x2
        let expected = residual.t().dot(&x); // 2x2
        for (a, b) in grads[0].w.iter().zip(expected.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = seeded(3);
        let params = MlpParams::<f64>::init(&[6, 9, 7, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let labels = vec![0, 1, 1, 0];
        let err = finite_diff_check(&params, &x, &labels, 1e-4, 200, &mut rng).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut rng = seeded(4);
        let mut params = MlpParams::<f64>::init(&[3, 4, 2], &mut rng).unwrap();
        let before = params.clone();
        let grads: Grads<f64> = params
            .layers
            .iter()
            .map(|l| Dense::zeros(l.w.nrows(), l.w.ncols()))
            .collect();
        let mut state = AdamState::new(&params, 1e-3);
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut params = MlpParams::<f64> {
            layers: vec![Dense { w: array![[1.0, -2.0]], b: array![0.5] }],
        };
        let grads = vec![Dense { w: array![[0.3, -0.7]], b: array![2.0] }];
        let mut state = AdamState::new(&params, 0.1);
        adam_step(&mut params, &grads, &mut state).unwrap();
        // At t=1, m_hat = g, v_hat = g^2, so the step is ~ -lr * sign(g).
        assert_relative_eq!(params.layers[0].w[[0, 0]], 1.0 - 0.1, epsilon = 1e-6);
        assert_relative_eq!(params.layers[0].w[[0, 1]], -2.0 + 0.1, epsilon = 1e-6);
        assert_relative_eq!(params.layers[0].b[0], 0.5 - 0.1, epsilon = 1e-6);
    }

    #[test]
    fn adam_two_steps_match_hand_unroll() {
        let g = 0.5f64;
        let (lr, b1, b2, eps) = (0.1f64, 0.9, 0.999, 1e-8);
        // Hand-unrolled recurrence for a single scalar parameter.
        let mut m = 0.0;
        let mut v = 0.0;
        let mut p_ref = 1.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            p_ref -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let mut params = MlpParams::<f64> {
            layers: vec![Dense { w: array![[1.0]], b: array![0.0] }],
        };
        let grads = vec![Dense { w: array![[g]], b: array![0.0] }];
        let mut state = AdamState::new(&params, lr);
        adam_step(&mut params, &grads, &mut state).unwrap();
        adam_step(&mut params, &grads, &mut state).unwrap();
        assert_relative_eq!(params.layers[0].w[[0, 0]], p_ref, epsilon = 1e-12);
    }

    #[test]
    fn dropout_rate_zero_is_all_ones() {
        let mut rng = seeded(5);
        let mask: Array2<f64> = dropout_mask((4, 7), 0.0, &mut rng);
        assert!(mask.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn dropout_keep_fraction_and_expectation() {
        let mut rng = seeded(6);
        let mask: Array2<f64> = dropout_mask((100, 1000), 0.5, &mut rng);
        let kept = mask.iter().filter(|&&v| v > 0.0).count() as f64 / mask.len() as f64;
        assert!((kept - 0.5).abs() < 0.01, "keep fraction {kept}");
        // Inverted scaling preserves expectation.
        let mean: f64 = mask.iter().sum::<f64>() / mask.len() as f64;
        assert!((mean - 1.0).abs() < 0.02, "mask mean {mean}");
    }

    #[test]
    fn dropout_rate_zero_matches_plain_forward() {
        use rand::Rng;
        let mut rng = seeded(7);
        let params = MlpParams::<f64>::init(&[5, 8, 8, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 5), |_| rng.gen_range(-1.0..1.0));
        let masks = dropout_masks(&params, 3, 0.0, &mut rng);
        let a = forward_mlp(&params, &x, Some(&masks)).unwrap();
        let b = forward_mlp(&params, &x, None).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn dropped_gradients_match_finite_differences() {
        // Backprop through fixed dropout masks must still be exact.
        use rand::Rng;
        let mut rng = seeded(8);
        let params = MlpParams::<f64>::init(&[5, 8, 6, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((4, 5), |_| rng.gen_range(-1.0..1.0));
        let labels = vec![0, 1, 0, 1];
        let masks = dropout_masks(&params, 4, 0.5, &mut rng);
        let cache = forward_mlp(&params, &x, Some(&masks)).unwrap();
        let (_, dlogits) = loss_cross_entropy(&cache.logits, &labels).unwrap();
        let analytic = backward_gradients(&params, &cache, &dlogits, Some(&masks)).unwrap();

        // Spot-check a handful of coordinates by central differences with
        // the same masks replayed.
        let eps = 1e-5;
        let mut work = params.clone();
        for (l, i, j) in [(0usize, 2usize, 3usize), (1, 4, 1), (2, 1, 5)] {
            let orig = work.layers[l].w[[i, j]];
            work.layers[l].w[[i, j]] = orig + eps;
            let cp = forward_mlp(&work, &x, Some(&masks)).unwrap();
            let lp = loss_cross_entropy(&cp.logits, &labels).unwrap().0;
            work.layers[l].w[[i, j]] = orig - eps;
            let cm = forward_mlp(&work, &x, Some(&masks)).unwrap();
            let lm = loss_cross_entropy(&cm.logits, &labels).unwrap().0;
            work.layers[l].w[[i, j]] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[l].w[[i, j]];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-4);
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let mut rng = seeded(9);
        let params = MlpParams::<f32>::init(&[7, 5, 3, 2], &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mlp");
        write_mlp(&params, &path).unwrap();
        let back = read_mlp(&path).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn backward_from_hidden_matches_full_backward_on_hidden_layers() {
        // Feeding the exact upstream gradient into backward_from_hidden must
        // reproduce the hidden-layer gradients of the full backward pass.
        use rand::Rng;
        let mut rng = seeded(10);
        let params = MlpParams::<f64>::init(&[4, 6, 5, 2], &mut rng).unwrap();
        let x = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let labels = vec![1, 0, 1];
        let cache = forward_mlp(&params, &x, None).unwrap();
        let (_, dlogits) = loss_cross_entropy(&cache.logits, &labels).unwrap();
        let full = backward_gradients(&params, &cache, &dlogits, None).unwrap();
        // Gradient on the top hidden activation, before the ReLU derivative.
        let d_hidden = dlogits.dot(&params.layers.last().unwrap().w);
        let partial = backward_from_hidden(&params, &cache, &d_hidden, None).unwrap();
        assert_eq!(partial.len(), 2);
        for l in 0..2 {
            for (a, b) in partial[l].w.iter().zip(full[l].w.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-12);
            }
        }
    }
}
