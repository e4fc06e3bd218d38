//! Supervised training with mini-batches, Adam, dropout, and early stopping.
//!
//! Early stopping tracks validation accuracy, keeps the best snapshot
//! (ties resolved toward the earliest epoch), and halts once accuracy has
//! not improved for `patience` epochs or the epoch cap is reached.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{
    adam_step_layers, argmax_rows, backward_gradients, dropout_masks, forward_mlp,
    loss_cross_entropy, softmax, AdamState, Dense, MlpParams,
};

#[derive(Debug, Clone)]
pub struct EarlyStopConfig {
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Which parameters a supervised stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    /// Only the final softmax layer; hidden layers frozen, no dropout.
    OutputOnly,
    /// All layers, with dropout on every hidden layer.
    Full,
}

pub fn classification_accuracy<S: Scalar>(
    params: &MlpParams<S>,
    x: &Array2<S>,
    labels: &[usize],
) -> Result<f64> {
    let cache = forward_mlp(params, x, None)?;
    let probs = softmax(&cache.logits);
    let pred = argmax_rows(&probs);
    let correct = pred.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn encode_hidden<S: Scalar>(params: &MlpParams<S>, x: &Array2<S>) -> Array2<S> {
    let mut current = x.clone();
    for layer in &params.layers[..params.n_hidden()] {
        let mut h = current.dot(&layer.w.t());
        h += &layer.b;
        h.mapv_inplace(|v| if v > S::zero() { v } else { S::zero() });
        current = h;
    }
    current
}

/// Train `params` on `(train_x, train_y)` with early stopping on
/// `(val_x, val_y)` accuracy. Returns the log; `params` holds the
/// best-validation snapshot on return.
pub fn train_supervised<S: Scalar>(
    params: &mut MlpParams<S>,
    scope: TrainScope,
    train_x: &Array2<S>,
    train_y: &[usize],
    val_x: &Array2<S>,
    val_y: &[usize],
    cfg: &EarlyStopConfig,
    rng: &mut impl Rng,
) -> Result<TrainLog> {
    if val_y.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    if train_y.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if train_x.nrows() != train_y.len() || val_x.nrows() != val_y.len() {
        return Err(Error::Shape("sample/label count mismatch".into()));
    }

    // For output-only training the frozen encoder runs once.
    let (head_tr, head_val) = match scope {
        TrainScope::OutputOnly => (
            Some(encode_hidden(params, train_x)),
            Some(encode_hidden(params, val_x)),
        ),
        TrainScope::Full => (None, None),
    };

    let initial_acc = match scope {
        TrainScope::OutputOnly => {
            head_accuracy(params, head_val.as_ref().unwrap(), val_y)?
        }
        TrainScope::Full => classification_accuracy(params, val_x, val_y)?,
    };
    let mut best = params.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = initial_acc;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_accuracy: initial_acc,
    }];

    let mut adam = match scope {
        TrainScope::OutputOnly => AdamState::for_layers(
            std::slice::from_ref(params.layers.last().unwrap()),
            cfg.learning_rate,
        ),
        TrainScope::Full => AdamState::new(params, cfg.learning_rate),
    };

    let n = train_y.len();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            match scope {
                TrainScope::OutputOnly => {
                    let h = head_tr.as_ref().unwrap().select(Axis(0), chunk);
                    let head = params.layers.last().unwrap();
                    let mut logits = h.dot(&head.w.t());
                    logits += &head.b;
                    let (loss, dlogits) = loss_cross_entropy(&logits, &labels)?;
                    epoch_loss += loss;
                    let grads = vec![Dense {
                        w: dlogits.t().dot(&h),
                        b: dlogits.sum_axis(Axis(0)),
                    }];
                    let last = params.layers.len() - 1;
                    adam_step_layers(&mut params.layers[last..], &grads, &mut adam)?;
                }
                TrainScope::Full => {
                    let x = train_x.select(Axis(0), chunk);
                    let masks = dropout_masks(params, chunk.len(), cfg.dropout_rate, rng);
                    let cache = forward_mlp(params, &x, Some(&masks))?;
                    let (loss, dlogits) = loss_cross_entropy(&cache.logits, &labels)?;
                    epoch_loss += loss;
                    let grads = backward_gradients(params, &cache, &dlogits, Some(&masks))?;
                    adam_step_layers(&mut params.layers, &grads, &mut adam)?;
                }
            }
            batches += 1;
        }
        let val_accuracy = match scope {
            TrainScope::OutputOnly => {
                head_accuracy(params, head_val.as_ref().unwrap(), val_y)?
            }
            TrainScope::Full => classification_accuracy(params, val_x, val_y)?,
        };
        records.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_accuracy,
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best = params.clone();
        }
        if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    *params = best;
    Ok(TrainLog {
        records,
        best_epoch,
        best_val_accuracy: best_acc,
    })
}

fn head_accuracy<S: Scalar>(
    params: &MlpParams<S>,
    latents: &Array2<S>,
    labels: &[usize],
) -> Result<f64> {
    let head = params.layers.last().unwrap();
    let mut logits = latents.dot(&head.w.t());
    logits += &head.b;
    let pred = argmax_rows(&softmax(&logits));
    let correct = pred.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / labels.len() as f64)
}
