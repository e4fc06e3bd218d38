//! The multimodal multiscale network: one branch per (modality, scale)
//! with autoencoder pretraining and staged fine-tuning, a fusion network
//! over the concatenated 100-dim branch latents, and joint end-to-end
//! tuning. Hidden widths follow the 3N, floor(3N/4), 100 rule everywhere.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::CohortFeatures;
use crate::nn::{
    adam_step_layers, argmax_rows, backward_from_hidden, backward_gradients, dropout_masks,
    forward_mlp, loss_cross_entropy, pretrain_sae, read_mlp, softmax, train_supervised,
    write_mlp, AdamState, MlpParams, SaeLayerLog, TrainLog, TrainScope,
};
use crate::rng::stream;
use crate::scalar::Scalar;

pub use crate::nn::EarlyStopConfig;

/// Latent width of every branch (and of the fusion network output layer's
/// last hidden layer).
pub const LATENT_DIM: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, Hash)]
pub enum Modality {
    #[serde(rename = "volume")]
    Volume,
    #[serde(rename = "pet")]
    Pet,
}

/// One branch: a modality at one scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub modality: Modality,
    pub scale_index: usize,
    pub input_dim: usize,
}

/// Hidden widths for an input of width `n`: 3N, floor(3N/4), 100.
pub fn hidden_dims(n: usize) -> [usize; 3] {
    [3 * n, (3 * n) / 4, LATENT_DIM]
}

impl BranchSpec {
    pub fn hidden_dims(&self) -> [usize; 3] {
        hidden_dims(self.input_dim)
    }

    /// Full layer-width chain including input and the 2-class output.
    pub fn layer_dims(&self) -> Vec<usize> {
        let h = self.hidden_dims();
        vec![self.input_dim, h[0], h[1], h[2], 2]
    }
}

/// Fusion input width for `n_branches` active branches.
pub fn fusion_input_dim(n_branches: usize) -> usize {
    n_branches * LATENT_DIM
}

/// Training configuration for the staged pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub dropout_rate: f64,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub lr_pretrain: f64,
    pub lr_head: f64,
    pub lr_finetune: f64,
    pub lr_joint: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 50,
            dropout_rate: 0.5,
            patience_epochs: 50,
            max_epochs: 500,
            pretrain_epochs: 30,
            lr_pretrain: 1e-3,
            lr_head: 1e-3,
            lr_finetune: 1e-4,
            lr_joint: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Reduced budget for fast desk-scale runs.
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            patience_epochs: 8,
            max_epochs: 40,
            pretrain_epochs: 8,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience_epochs == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch/patience/epoch settings must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    fn stop(&self, learning_rate: f64, dropout_rate: f64) -> EarlyStopConfig {
        EarlyStopConfig {
            batch_size: self.batch_size,
            dropout_rate,
            patience: self.patience_epochs,
            max_epochs: self.max_epochs,
            learning_rate,
        }
    }
}

/// Per-feature z-scoring statistics from the training fold.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm<S> {
    pub mean: Array1<S>,
    pub std: Array1<S>,
}

impl<S: Scalar> FeatureNorm<S> {
    pub fn fit(data: &Array2<S>) -> Self {
        let n = data.nrows() as f64;
        let mean = data.sum_axis(Axis(0)).mapv(|v| v / S::cast_from(n));
        let mut var = Array1::<f64>::zeros(data.ncols());
        for row in data.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v.cast_f64() - mean[j].cast_f64();
                var[j] += d * d;
            }
        }
        let std = Array1::from_iter(var.iter().map(|&v| {
            let s = (v / n).sqrt();
            // Constant features pass through unscaled.
            S::cast_from(if s < 1e-12 { 1.0 } else { s })
        }));
        FeatureNorm { mean, std }
    }

    pub fn apply(&self, data: &Array2<S>) -> Array2<S> {
        let mut out = data.clone();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.std[j];
            }
        }
        out
    }
}

/// Full model: branch networks, fusion network, and the normalization
/// statistics frozen from the training fold.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdnnParams<S> {
    pub specs: Vec<BranchSpec>,
    pub branches: Vec<MlpParams<S>>,
    pub fusion: MlpParams<S>,
    pub norm: Vec<FeatureNorm<S>>,
}

impl<S: Scalar> MmdnnParams<S> {
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }
}

/// Per-branch raw feature matrices for one set of scans (row = scan),
/// ordered exactly like the model's branch specs.
pub type BranchInputs<S> = Vec<Array2<S>>;

/// Extract the branch input matrix for `spec` over the scans selected by
/// `indices`, in fixed branch order: volume scales ascending, then PET.
pub fn branch_matrix<S: Scalar>(
    features: &CohortFeatures,
    indices: &[usize],
    spec: &BranchSpec,
) -> Array2<S> {
    let n = indices.len();
    let mut out = Array2::zeros((n, spec.input_dim));
    for (row, &idx) in indices.iter().enumerate() {
        let scan = &features.scans[idx];
        let values = match spec.modality {
            Modality::Volume => &scan.vol_features[spec.scale_index],
            Modality::Pet => &scan.pet_features[spec.scale_index],
        };
        for (col, &v) in values.iter().enumerate() {
            out[[row, col]] = S::cast_from(v as f64);
        }
    }
    out
}

/// Branch specs for the given modality/scale masks in canonical order.
pub fn branch_specs(
    features: &CohortFeatures,
    modalities: &[Modality],
    scales: &[usize],
) -> Result<Vec<BranchSpec>> {
    if modalities.is_empty() || scales.is_empty() {
        return Err(Error::Config("modality and scale masks must be non-empty".into()));
    }
    let mut specs = Vec::new();
    for &modality in [Modality::Volume, Modality::Pet]
        .iter()
        .filter(|m| modalities.contains(m))
    {
        let mut sorted: Vec<usize> = scales.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for &scale_index in &sorted {
            if scale_index >= features.n_scales() {
                return Err(Error::Config(format!(
                    "scale index {scale_index} outside 0..{}",
                    features.n_scales()
                )));
            }
            specs.push(BranchSpec {
                modality,
                scale_index,
                input_dim: features.patch_counts[scale_index],
            });
        }
    }
    Ok(specs)
}

/// Encode z-scored branch inputs to the 100-dim latent of each branch and
/// concatenate in branch order. No dropout.
pub fn fuse_latents<S: Scalar>(
    model: &MmdnnParams<S>,
    inputs: &BranchInputs<S>,
) -> Result<Array2<S>> {
    if inputs.len() != model.n_branches() {
        return Err(Error::Config(format!(
            "{} input blocks for {} branches",
            inputs.len(),
            model.n_branches()
        )));
    }
    let n = inputs[0].nrows();
    let mut fused = Array2::zeros((n, fusion_input_dim(model.n_branches())));
    for (b, raw) in inputs.iter().enumerate() {
        let x = model.norm[b].apply(raw);
        let cache = forward_mlp(&model.branches[b], &x, None)?;
        let latent = &cache.hidden[model.branches[b].n_hidden() - 1];
        fused
            .slice_mut(s![.., b * LATENT_DIM..(b + 1) * LATENT_DIM])
            .assign(latent);
    }
    Ok(fused)
}

/// Class probabilities from the full model. Dropout-free and pure.
pub fn predict_proba<S: Scalar>(
    model: &MmdnnParams<S>,
    inputs: &BranchInputs<S>,
) -> Result<Array2<S>> {
    for (b, raw) in inputs.iter().enumerate() {
        if raw.ncols() != model.specs[b].input_dim {
            return Err(Error::Shape(format!(
                "branch {b}: {} features vs spec {}",
                raw.ncols(),
                model.specs[b].input_dim
            )));
        }
    }
    let fused = fuse_latents(model, inputs)?;
    let cache = forward_mlp(&model.fusion, &fused, None)?;
    Ok(softmax(&cache.logits))
}

fn model_accuracy<S: Scalar>(
    model: &MmdnnParams<S>,
    inputs: &BranchInputs<S>,
    labels: &[usize],
) -> Result<f64> {
    let probs = predict_proba(model, inputs)?;
    let pred = argmax_rows(&probs);
    Ok(pred.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64)
}

/// Logs from one staged supervised training (head then full fine-tune).
#[derive(Debug, Clone)]
pub struct StagedLog {
    pub head: TrainLog,
    pub finetune: TrainLog,
}

#[derive(Debug, Clone)]
pub struct MmdnnTrainLog {
    pub branch_sae: Vec<Vec<SaeLayerLog>>,
    pub branch_staged: Vec<StagedLog>,
    pub fusion_sae: Vec<SaeLayerLog>,
    pub fusion_staged: StagedLog,
    pub joint: TrainLog,
}

fn staged_supervised<S: Scalar>(
    params: &mut MlpParams<S>,
    train_x: &Array2<S>,
    train_y: &[usize],
    val_x: &Array2<S>,
    val_y: &[usize],
    cfg: &TrainConfig,
    seed_path: &[u64],
) -> Result<StagedLog> {
    // Stage A: softmax layer only, hidden layers frozen.
    let mut rng = stream(cfg.seed, &[seed_path, &[1]].concat());
    let head = train_supervised(
        params,
        TrainScope::OutputOnly,
        train_x,
        train_y,
        val_x,
        val_y,
        &cfg.stop(cfg.lr_head, 0.0),
        &mut rng,
    )?;
    // Stage B: everything unfrozen, dropout on.
    let mut rng = stream(cfg.seed, &[seed_path, &[2]].concat());
    let finetune = train_supervised(
        params,
        TrainScope::Full,
        train_x,
        train_y,
        val_x,
        val_y,
        &cfg.stop(cfg.lr_finetune, cfg.dropout_rate),
        &mut rng,
    )?;
    Ok(StagedLog { head, finetune })
}

/// Train the complete model on raw branch inputs: z-scoring, per-branch SAE
/// pretraining and staged supervision, fusion training, joint tuning.
pub fn train_mmdnn<S: Scalar>(
    specs: &[BranchSpec],
    train_inputs: &BranchInputs<S>,
    train_y: &[usize],
    val_inputs: &BranchInputs<S>,
    val_y: &[usize],
    cfg: &TrainConfig,
    member_seed: u64,
) -> Result<(MmdnnParams<S>, MmdnnTrainLog)> {
    cfg.validate()?;
    if specs.is_empty() {
        return Err(Error::Config("no branch specs".into()));
    }
    if train_inputs.len() != specs.len() || val_inputs.len() != specs.len() {
        return Err(Error::Config("branch input count does not match specs".into()));
    }
    if val_y.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }

    // Normalization statistics from the training fold only.
    let norm: Vec<FeatureNorm<S>> = train_inputs.iter().map(FeatureNorm::fit).collect();
    let train_z: Vec<Array2<S>> = train_inputs
        .iter()
        .zip(&norm)
        .map(|(x, n)| n.apply(x))
        .collect();
    let val_z: Vec<Array2<S>> = val_inputs.iter().zip(&norm).map(|(x, n)| n.apply(x)).collect();

    let mut branches = Vec::with_capacity(specs.len());
    let mut branch_sae = Vec::with_capacity(specs.len());
    let mut branch_staged = Vec::with_capacity(specs.len());
    for (b, spec) in specs.iter().enumerate() {
        let mut rng = stream(cfg.seed, &[member_seed, 10, b as u64]);
        let mut params = MlpParams::<S>::init(&spec.layer_dims(), &mut rng)?;
        let sae_log = pretrain_sae(
            &mut params,
            &train_z[b],
            cfg.pretrain_epochs,
            cfg.batch_size,
            cfg.lr_pretrain,
            &mut rng,
        )
        .map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("branch {b}: {msg}")),
            other => other,
        })?;
        let staged = staged_supervised(
            &mut params,
            &train_z[b],
            train_y,
            &val_z[b],
            val_y,
            cfg,
            &[member_seed, 20, b as u64],
        )?;
        branches.push(params);
        branch_sae.push(sae_log);
        branch_staged.push(staged);
    }

    let mut model = MmdnnParams {
        specs: specs.to_vec(),
        branches,
        fusion: {
            let n = fusion_input_dim(specs.len());
            let h = hidden_dims(n);
            let mut rng = stream(cfg.seed, &[member_seed, 30]);
            MlpParams::<S>::init(&[n, h[0], h[1], h[2], 2], &mut rng)?
        },
        norm,
    };

    // Fusion training on frozen branch latents.
    let fused_train = fuse_latents_z(&model, &train_z)?;
    let fused_val = fuse_latents_z(&model, &val_z)?;
    let mut rng = stream(cfg.seed, &[member_seed, 31]);
    let fusion_sae = pretrain_sae(
        &mut model.fusion,
        &fused_train,
        cfg.pretrain_epochs,
        cfg.batch_size,
        cfg.lr_pretrain,
        &mut rng,
    )?;
    let fusion_staged = staged_supervised(
        &mut model.fusion,
        &fused_train,
        train_y,
        &fused_val,
        val_y,
        cfg,
        &[member_seed, 32],
    )?;

    let joint = joint_finetune(&mut model, &train_z, train_y, &val_z, val_y, cfg, member_seed)?;

    Ok((
        model,
        MmdnnTrainLog {
            branch_sae,
            branch_staged,
            fusion_sae,
            fusion_staged,
            joint,
        },
    ))
}

/// `fuse_latents` over inputs that are already z-scored.
fn fuse_latents_z<S: Scalar>(model: &MmdnnParams<S>, z: &[Array2<S>]) -> Result<Array2<S>> {
    let n = z[0].nrows();
    let mut fused = Array2::zeros((n, fusion_input_dim(model.n_branches())));
    for (b, x) in z.iter().enumerate() {
        let cache = forward_mlp(&model.branches[b], x, None)?;
        let latent = &cache.hidden[model.branches[b].n_hidden() - 1];
        fused
            .slice_mut(s![.., b * LATENT_DIM..(b + 1) * LATENT_DIM])
            .assign(latent);
    }
    Ok(fused)
}

fn model_accuracy_z<S: Scalar>(
    model: &MmdnnParams<S>,
    z: &[Array2<S>],
    labels: &[usize],
) -> Result<f64> {
    let fused = fuse_latents_z(model, z)?;
    let cache = forward_mlp(&model.fusion, &fused, None)?;
    let pred = argmax_rows(&softmax(&cache.logits));
    Ok(pred.iter().zip(labels).filter(|(p, t)| p == t).count() as f64 / labels.len() as f64)
}

/// End-to-end tuning: the fusion loss backpropagates through the fusion
/// network and every branch's hidden layers (branch classifiers are kept
/// for diagnostics but receive no joint gradient). Early stopping keeps
/// the best snapshot, seeded with the pre-joint model at epoch 0, so the
/// returned validation accuracy never drops.
pub fn joint_finetune<S: Scalar>(
    model: &mut MmdnnParams<S>,
    train_z: &[Array2<S>],
    train_y: &[usize],
    val_z: &[Array2<S>],
    val_y: &[usize],
    cfg: &TrainConfig,
    member_seed: u64,
) -> Result<TrainLog> {
    use rand::seq::SliceRandom;
    let mut rng = stream(cfg.seed, &[member_seed, 40]);
    let n = train_y.len();
    let n_branches = model.n_branches();

    let initial_acc = model_accuracy_z(model, val_z, val_y)?;
    let mut best = model.clone();
    let mut best_epoch = 0usize;
    let mut best_acc = initial_acc;
    let mut records = vec![crate::nn::EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        val_accuracy: initial_acc,
    }];

    let mut fusion_adam = AdamState::new(&model.fusion, cfg.lr_joint);
    let mut branch_adams: Vec<AdamState<S>> = model
        .branches
        .iter()
        .map(|b| AdamState::for_layers(&b.layers[..b.n_hidden()], cfg.lr_joint))
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let batch = chunk.len();

            // Branch forwards with dropout; collect latents.
            let mut caches = Vec::with_capacity(n_branches);
            let mut masks = Vec::with_capacity(n_branches);
            let mut fused = Array2::zeros((batch, fusion_input_dim(n_branches)));
            for b in 0..n_branches {
                let x = train_z[b].select(Axis(0), chunk);
                let m = dropout_masks(&model.branches[b], batch, cfg.dropout_rate, &mut rng);
                let cache = forward_mlp(&model.branches[b], &x, Some(&m))?;
                fused
                    .slice_mut(s![.., b * LATENT_DIM..(b + 1) * LATENT_DIM])
                    .assign(&cache.hidden[model.branches[b].n_hidden() - 1]);
                caches.push(cache);
                masks.push(m);
            }

            // Fusion forward/backward with dropout.
            let fusion_masks = dropout_masks(&model.fusion, batch, cfg.dropout_rate, &mut rng);
            let fusion_cache = forward_mlp(&model.fusion, &fused, Some(&fusion_masks))?;
            let (loss, dlogits) = loss_cross_entropy(&fusion_cache.logits, &labels)
                .map_err(|e| Error::Numeric(format!("joint stage: {e}")))?;
            epoch_loss += loss;
            let fusion_grads =
                backward_gradients(&model.fusion, &fusion_cache, &dlogits, Some(&fusion_masks))?;

            // Gradient on the fusion input, split per branch.
            let mut delta = dlogits.clone();
            for l in (1..model.fusion.layers.len()).rev() {
                let mut dprev = delta.dot(&model.fusion.layers[l].w);
                let post = &fusion_cache.hidden[l - 1];
                dprev.zip_mut_with(post, |d, &p| {
                    if p <= S::zero() {
                        *d = S::zero();
                    }
                });
                // Re-apply the mask scale where the unit survived.
                dprev *= &fusion_masks[l - 1];
                delta = dprev;
            }
            let d_fused = delta.dot(&model.fusion.layers[0].w);

            adam_step_layers(&mut model.fusion.layers, &fusion_grads, &mut fusion_adam)?;

            for b in 0..n_branches {
                let d_latent = d_fused
                    .slice(s![.., b * LATENT_DIM..(b + 1) * LATENT_DIM])
                    .to_owned();
                let grads = backward_from_hidden(
                    &model.branches[b],
                    &caches[b],
                    &d_latent,
                    Some(&masks[b]),
                )?;
                let n_hidden = model.branches[b].n_hidden();
                adam_step_layers(
                    &mut model.branches[b].layers[..n_hidden],
                    &grads,
                    &mut branch_adams[b],
                )?;
            }
            batches += 1;
        }
        let val_accuracy = model_accuracy_z(model, val_z, val_y)?;
        records.push(crate::nn::EpochRecord {
            epoch,
            train_loss: epoch_loss / batches as f64,
            val_accuracy,
        });
        if val_accuracy > best_acc {
            best_acc = val_accuracy;
            best_epoch = epoch;
            best = model.clone();
        }
        if epoch - best_epoch >= cfg.patience_epochs {
            break;
        }
    }
    *model = best;
    Ok(TrainLog {
        records,
        best_epoch,
        best_val_accuracy: best_acc,
    })
}

/// Validation accuracy helper on raw (unnormalized) inputs.
pub fn validation_accuracy<S: Scalar>(
    model: &MmdnnParams<S>,
    inputs: &BranchInputs<S>,
    labels: &[usize],
) -> Result<f64> {
    model_accuracy(model, inputs, labels)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    specs: Vec<BranchSpec>,
    norm_mean: Vec<Vec<f32>>,
    norm_std: Vec<Vec<f32>>,
    branch_files: Vec<String>,
    fusion_file: String,
    stage_flags: BTreeMap<String, bool>,
}

/// Write the model as a checkpoint directory: per-network parameter files
/// plus a JSON manifest with branch specs and normalization statistics.
pub fn write_model(model: &MmdnnParams<f32>, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut branch_files = Vec::new();
    for (b, branch) in model.branches.iter().enumerate() {
        let name = format!("branch_{b}.mlp");
        write_mlp(branch, &dir.join(&name))?;
        branch_files.push(name);
    }
    write_mlp(&model.fusion, &dir.join("fusion.mlp"))?;
    let manifest = ModelManifest {
        specs: model.specs.clone(),
        norm_mean: model.norm.iter().map(|n| n.mean.to_vec()).collect(),
        norm_std: model.norm.iter().map(|n| n.std.to_vec()).collect(),
        branch_files,
        fusion_file: "fusion.mlp".into(),
        stage_flags: [
            ("pretrained".to_string(), true),
            ("branches_trained".to_string(), true),
            ("fusion_trained".to_string(), true),
            ("joint_tuned".to_string(), true),
        ]
        .into_iter()
        .collect(),
    };
    let path = dir.join("model_manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("model manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Read a checkpoint directory written by [`write_model`].
pub fn read_model(dir: &Path) -> Result<MmdnnParams<f32>> {
    let manifest_path = dir.join("model_manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: ModelManifest =
        serde_json::from_str(&text).map_err(|e| Error::json("model manifest", e))?;
    let mut branches = Vec::new();
    for name in &manifest.branch_files {
        branches.push(read_mlp(&dir.join(name))?);
    }
    let fusion = read_mlp(&dir.join(&manifest.fusion_file))?;
    let norm = manifest
        .norm_mean
        .iter()
        .zip(&manifest.norm_std)
        .map(|(m, s)| FeatureNorm {
            mean: Array1::from_vec(m.clone()),
            std: Array1::from_vec(s.clone()),
        })
        .collect();
    Ok(MmdnnParams {
        specs: manifest.specs,
        branches,
        fusion,
        norm,
    })
}

/// Dump fusion inputs (concatenated latents) as CSV, one row per scan.
pub fn write_latents_csv<S: Scalar>(
    model: &MmdnnParams<S>,
    inputs: &BranchInputs<S>,
    scan_ids: &[String],
    path: &Path,
) -> Result<()> {
    let fused = fuse_latents(model, inputs)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut header = String::from("scan_id");
    for j in 0..fused.ncols() {
        header.push_str(&format!(",z{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for (i, id) in scan_ids.iter().enumerate() {
        let mut line = id.clone();
        for &v in fused.row(i).iter() {
            line.push_str(&format!(",{}", v.cast_f64()));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
