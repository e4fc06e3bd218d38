//! Greedy layer-wise autoencoder pretraining.
//!
//! Each hidden layer is trained as a one-layer autoencoder on the codes of
//! the layers below it: encoder `y = relu(W x + b_enc)`, decoder
//! `z = W^T y + b_dec` with tied weights and a free decoder bias, squared
//! error loss, Adam updates on mini-batches. The trained encoder weights
//! are copied back into the network; deeper layers stay untouched until
//! their turn.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{loss_reconstruction, AdamState, Dense, MlpParams};

/// Per-layer pretraining record.
#[derive(Debug, Clone)]
pub struct SaeLayerLog {
    pub layer: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Encode `inputs` through the first `n_layers` hidden layers (ReLU, no dropout).
fn encode_through<S: Scalar>(
    params: &MlpParams<S>,
    inputs: &Array2<S>,
    n_layers: usize,
) -> Array2<S> {
    let mut current = inputs.clone();
    for layer in &params.layers[..n_layers] {
        let mut h = current.dot(&layer.w.t());
        h += &layer.b;
        h.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
        current = h;
    }
    current
}

fn full_recon_loss<S: Scalar>(
    w: &Array2<S>,
    b_enc: &Array1<S>,
    b_dec: &Array1<S>,
    x: &Array2<S>,
) -> Result<f64> {
    let mut y = x.dot(&w.t());
    y += b_enc;
    y.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
    let mut z = y.dot(w);
    z += b_dec;
    Ok(loss_reconstruction(x, &z)?.0)
}

/// Pretrain every hidden layer of `branch` in order. Returns per-layer
/// initial and final reconstruction losses over the full input set.
pub fn pretrain_sae<S: Scalar>(
    branch: &mut MlpParams<S>,
    inputs: &Array2<S>,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SaeLayerLog>> {
    if inputs.ncols() != branch.input_dim() {
        return Err(Error::Shape(format!(
            "sae inputs dim {} vs network input {}",
            inputs.ncols(),
            branch.input_dim()
        )));
    }
    let n_hidden = branch.n_hidden();
    let n_samples = inputs.nrows();
    let mut logs = Vec::with_capacity(n_hidden);
    if epochs == 0 {
        return Ok(logs);
    }

    for l in 0..n_hidden {
        let codes = if l == 0 {
            inputs.clone()
        } else {
            encode_through(branch, inputs, l)
        };
        let in_dim = codes.ncols();
        debug_assert_eq!(in_dim, branch.layers[l].w.ncols());

        let mut w = branch.layers[l].w.clone();
        let mut b_enc = branch.layers[l].b.clone();
        let mut b_dec: Array1<S> = Array1::zeros(in_dim);
        let initial_loss = full_recon_loss(&w, &b_enc, &b_dec, &codes)?;

        // Adam state over (w, b_enc) as one layer plus b_dec as a bias-only layer.
        let layer_shapes = vec![
            Dense { w: w.clone(), b: b_enc.clone() },
            Dense { w: Array2::zeros((in_dim, 0)), b: b_dec.clone() },
        ];
        let mut adam = AdamState::for_layers(&layer_shapes, learning_rate);

        let mut order: Vec<usize> = (0..n_samples).collect();
        for _epoch in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                let x = codes.select(Axis(0), chunk);
                let batch = chunk.len();

                // Forward.
                let mut y_pre = x.dot(&w.t());
                y_pre += &b_enc;
                let y = y_pre.mapv(|v| if v > S::zero() { v } else { S::zero() });
                let mut z = y.dot(&w);
                z += &b_dec;
                let (loss, dz) = loss_reconstruction(&x, &z)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite sae loss at layer {l}")));
                }

                // Backward with tied weights: dW collects decoder and encoder terms.
                let db_dec = dz.sum_axis(Axis(0));
                let dw_dec = y.t().dot(&dz);
                let mut dy = dz.dot(&w.t());
                dy.zip_mut_with(&y, |d, &yy| {
                    if yy <= S::zero() {
                        *d = S::zero();
                    }
                });
                let dw_enc = dy.t().dot(&x);
                let db_enc = dy.sum_axis(Axis(0));
                let dw = dw_dec + dw_enc;

                let grads = vec![
                    Dense { w: dw, b: db_enc },
                    Dense { w: Array2::zeros((in_dim, 0)), b: db_dec },
                ];
                let mut layers = vec![
                    Dense { w, b: b_enc },
                    Dense { w: Array2::zeros((in_dim, 0)), b: b_dec },
                ];
                super::adam_step_layers(&mut layers, &grads, &mut adam)?;
                let dec = layers.pop().unwrap();
                let enc = layers.pop().unwrap();
                w = enc.w;
                b_enc = enc.b;
                b_dec = dec.b;
                let _ = batch;
            }
        }

        let final_loss = full_recon_loss(&w, &b_enc, &b_dec, &codes)?;
        branch.layers[l].w = w;
        branch.layers[l].b = b_enc;
        logs.push(SaeLayerLog {
            layer: l,
            initial_loss,
            final_loss,
        });
    }
    Ok(logs)
}
