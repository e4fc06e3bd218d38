//! Subject-level cross-validation, ensemble voting, metrics, and the three
//! experiment families: stable-vs-progressive MCI, the training-composition
//! study, and the conversion-horizon analysis.
//!
//! Leakage is impossible by construction: folds and ensemble validation
//! subsets are partitions of subjects, never scans, and every report logs
//! the train/test subject id sets per fold for mechanical auditing.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::Group;
use crate::error::{Error, Result};
use crate::features::CohortFeatures;
use crate::model::{
    branch_matrix, branch_specs, predict_proba, train_mmdnn, BranchInputs, BranchSpec,
    MmdnnParams, MmdnnTrainLog, Modality, TrainConfig,
};
use crate::rng::stream;

/// Classification task: which groups train which class, and which groups
/// are never trained on but always tested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    /// Stable MCI (class 0) vs progressive MCI (class 1).
    #[serde(rename = "smci-pmci")]
    SmciVsPmci,
    /// Train sAD vs sNC; pNC and pMCI scans are always-test positives.
    #[serde(rename = "l1")]
    PathologyL1,
    /// Train sAD+pMCI vs sNC; pNC scans are always-test positives.
    #[serde(rename = "l2")]
    PathologyL2,
    /// Train sAD+pMCI+pNC vs sNC.
    #[serde(rename = "l3")]
    PathologyL3,
}

impl Task {
    /// Groups whose subjects enter cross-validation, with their class label.
    pub fn train_groups(&self) -> Vec<(Group, usize)> {
        match self {
            Task::SmciVsPmci => vec![(Group::StableMci, 0), (Group::ProgressiveMci, 1)],
            Task::PathologyL1 => vec![(Group::StableNc, 0), (Group::StableAd, 1)],
            Task::PathologyL2 => vec![
                (Group::StableNc, 0),
                (Group::StableAd, 1),
                (Group::ProgressiveMci, 1),
            ],
            Task::PathologyL3 => vec![
                (Group::StableNc, 0),
                (Group::StableAd, 1),
                (Group::ProgressiveMci, 1),
                (Group::ProgressiveNc, 1),
            ],
        }
    }

    /// Groups excluded from training but included in every fold's test set.
    pub fn always_test_groups(&self) -> Vec<(Group, usize)> {
        match self {
            Task::SmciVsPmci | Task::PathologyL3 => vec![],
            Task::PathologyL1 => vec![(Group::ProgressiveNc, 1), (Group::ProgressiveMci, 1)],
            Task::PathologyL2 => vec![(Group::ProgressiveNc, 1)],
        }
    }

    /// Test-time truth label for a group, if the group participates.
    pub fn test_label(&self, group: Group) -> Option<usize> {
        self.train_groups()
            .into_iter()
            .chain(self.always_test_groups())
            .find(|(g, _)| *g == group)
            .map(|(_, l)| l)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Task::SmciVsPmci => "smci-pmci",
            Task::PathologyL1 => "l1",
            Task::PathologyL2 => "l2",
            Task::PathologyL3 => "l3",
        }
    }
}

/// Subject-level fold assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Stratified subject-level folds: subjects are shuffled within each group
/// and dealt round-robin with a cursor that continues across groups, so
/// fold sizes differ by at most one subject overall and by at most one
/// within each group.
pub fn split_subject_folds(
    subjects: &[(String, Group)],
    n_folds: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if n_folds == 0 {
        return Err(Error::param("n_folds", "must be positive"));
    }
    if n_folds > subjects.len() {
        return Err(Error::param(
            "n_folds",
            format!("{} folds for {} subjects", n_folds, subjects.len()),
        ));
    }
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for (id, _) in subjects {
        if !ids.insert(id) {
            return Err(Error::param("subjects", format!("duplicate subject id {id}")));
        }
    }
    let mut by_group: BTreeMap<Group, Vec<&String>> = BTreeMap::new();
    for (id, group) in subjects {
        by_group.entry(*group).or_default().push(id);
    }
    let mut assignment = BTreeMap::new();
    let mut cursor = 0usize;
    for (group, mut members) in by_group {
        use rand::seq::SliceRandom;
        let mut rng = stream(seed, &[0xf01d, group as u64]);
        members.sort();
        members.shuffle(&mut rng);
        for id in members {
            assignment.insert(id.clone(), cursor % n_folds);
            cursor += 1;
        }
    }
    Ok(FoldPlan {
        n_folds,
        assignment,
        seed,
    })
}

/// One experiment: a task over masked modalities/scales, with an ensemble
/// of independently validated networks per fold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentSpec {
    pub task: Task,
    pub modalities: Vec<Modality>,
    pub scales: Vec<usize>,
    pub ensemble_size: usize,
    pub cfg: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(task: Task, cfg: TrainConfig) -> Self {
        ExperimentSpec {
            task,
            modalities: vec![Modality::Volume, Modality::Pet],
            scales: vec![0, 1, 2],
            ensemble_size: 10,
            cfg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() || self.scales.is_empty() {
            return Err(Error::Config("modality and scale masks must be non-empty".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be positive".into()));
        }
        self.cfg.validate()
    }
}

/// Train one ensemble: the training subjects are partitioned into
/// `ensemble_size` validation subsets (stratified by class); member `i`
/// holds out subset `i` for early stopping and trains on the rest.
pub fn train_ensemble<S: crate::scalar::Scalar>(
    features: &CohortFeatures,
    specs: &[BranchSpec],
    train_subjects: &[(String, usize)],
    spec: &ExperimentSpec,
    seed: u64,
) -> Result<Vec<(MmdnnParams<S>, MmdnnTrainLog)>> {
    spec.validate()?;
    let classes: BTreeSet<usize> = train_subjects.iter().map(|(_, c)| *c).collect();
    if classes.len() < 2 {
        return Err(Error::Config("training pool must contain both classes".into()));
    }
    if spec.ensemble_size > train_subjects.len() {
        return Err(Error::Config(format!(
            "{} ensemble members for {} training subjects",
            spec.ensemble_size,
            train_subjects.len()
        )));
    }

    // Stratified partition of subjects into validation subsets.
    let mut by_class: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, class) in train_subjects {
        by_class.entry(*class).or_default().push(id);
    }
    let mut subset_of: BTreeMap<&String, usize> = BTreeMap::new();
    let mut cursor = 0usize;
    for (class, mut members) in by_class {
        use rand::seq::SliceRandom;
        let mut rng = stream(seed, &[0xe5b1, class as u64]);
        members.sort();
        members.shuffle(&mut rng);
        for id in members {
            subset_of.insert(id, cursor % spec.ensemble_size);
            cursor += 1;
        }
    }

    // Scan indices and labels per subject.
    let class_of: BTreeMap<&String, usize> =
        train_subjects.iter().map(|(id, c)| (id, *c)).collect();
    let mut scans_of: BTreeMap<&String, Vec<usize>> = BTreeMap::new();
    for (idx, scan) in features.scans.iter().enumerate() {
        if let Some((id, _)) = class_of.get_key_value(&scan.subject_id) {
            scans_of.entry(id).or_default().push(idx);
        }
    }

    (0..spec.ensemble_size)
        .into_par_iter()
        .map(|member| {
            let mut train_idx = Vec::new();
            let mut train_y = Vec::new();
            let mut val_idx = Vec::new();
            let mut val_y = Vec::new();
            for (id, scan_ids) in &scans_of {
                let class = class_of[*id];
                if subset_of[*id] == member {
                    for &i in scan_ids {
                        val_idx.push(i);
                        val_y.push(class);
                    }
                } else {
                    for &i in scan_ids {
                        train_idx.push(i);
                        train_y.push(class);
                    }
                }
            }
            let train_classes: BTreeSet<usize> = train_y.iter().copied().collect();
            if train_classes.len() < 2 {
                return Err(Error::Config(format!(
                    "member {member}: a class is absent from the training portion"
                )));
            }
            if val_idx.is_empty() {
                return Err(Error::Config(format!("member {member}: empty validation subset")));
            }
            let train_inputs: BranchInputs<S> = specs
                .iter()
                .map(|s| branch_matrix(features, &train_idx, s))
                .collect();
            let val_inputs: BranchInputs<S> = specs
                .iter()
                .map(|s| branch_matrix(features, &val_idx, s))
                .collect();
            train_mmdnn(
                specs,
                &train_inputs,
                &train_y,
                &val_inputs,
                &val_y,
                &spec.cfg,
                seed ^ ((member as u64 + 1) << 40),
            )
        })
        .collect()
}

/// Sum the members' probability rows (in f64) and take the argmax; exact
/// ties resolve toward class 0.
pub fn ensemble_predict<S: crate::scalar::Scalar>(
    members: &[MmdnnParams<S>],
    inputs: &BranchInputs<S>,
) -> Result<(Vec<usize>, Array2<f64>)> {
    if members.is_empty() {
        return Err(Error::Config("ensemble has no members".into()));
    }
    let n = inputs[0].nrows();
    let mut summed = Array2::<f64>::zeros((n, 2));
    for member in members {
        let p = predict_proba(member, inputs)?;
        if p.dim() != summed.dim() {
            return Err(Error::Shape(format!(
                "member output {:?} vs {:?}",
                p.dim(),
                summed.dim()
            )));
        }
        ndarray::Zip::from(&mut summed).and(&p).for_each(|s, &v| *s += v.cast_f64());
    }
    let labels = summed
        .rows()
        .into_iter()
        .map(|row| if row[1] > row[0] { 1 } else { 0 })
        .collect();
    Ok((labels, summed))
}

/// Integer confusion counts: positives are the disease class (1).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, pred: usize, truth: usize) {
        match (pred, truth) {
            (1, 1) => self.tp += 1,
            (1, 0) => self.fp += 1,
            (0, 0) => self.tn += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub confusion: Confusion,
    pub accuracy: f64,
    /// `None` when the truth contains no positives.
    pub sensitivity: Option<f64>,
    /// `None` when the truth contains no negatives.
    pub specificity: Option<f64>,
}

pub fn compute_metrics(predictions: &[usize], truths: &[usize]) -> Result<Metrics> {
    if predictions.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions vs {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::param("predictions", "must be non-empty"));
    }
    let mut c = Confusion::default();
    for (&p, &t) in predictions.iter().zip(truths) {
        c.add(p, t);
    }
    Ok(metrics_from_confusion(c))
}

fn metrics_from_confusion(c: Confusion) -> Metrics {
    let pos = c.tp + c.fn_;
    let neg = c.tn + c.fp;
    Metrics {
        confusion: c,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: (pos > 0).then(|| c.tp as f64 / pos as f64),
        specificity: (neg > 0).then(|| c.tn as f64 / neg as f64),
    }
}

/// One horizon bucket of the conversion analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonBucket {
    pub label: String,
    /// Upper edge in months-to-conversion; bucket 0 is at/after conversion.
    pub count: usize,
    /// Fraction of progressive scans classified as the disease class;
    /// `None` for empty buckets.
    pub accuracy: Option<f64>,
}

const BUCKET_LABELS: [&str; 5] = ["0", "(0,12]", "(12,24]", "(24,36]", "(36,+)"];

fn bucket_index(months: usize) -> usize {
    match months {
        0 => 0,
        1..=12 => 1,
        13..=24 => 2,
        25..=36 => 3,
        _ => 4,
    }
}

/// Detection accuracy per months-to-conversion bucket over progressive
/// test scans. Every scan must carry conversion metadata.
pub fn conversion_report(
    predictions: &[usize],
    months_to_conversion: &[Option<usize>],
) -> Result<Vec<HorizonBucket>> {
    if predictions.len() != months_to_conversion.len() {
        return Err(Error::Shape("prediction/metadata length mismatch".into()));
    }
    let mut hits = [0usize; 5];
    let mut counts = [0usize; 5];
    for (&p, m) in predictions.iter().zip(months_to_conversion) {
        let months = m.ok_or_else(|| {
            Error::validation("months_to_conversion", "missing on a progressive scan")
        })?;
        let b = bucket_index(months);
        counts[b] += 1;
        if p == 1 {
            hits[b] += 1;
        }
    }
    Ok(BUCKET_LABELS
        .iter()
        .enumerate()
        .map(|(b, label)| HorizonBucket {
            label: label.to_string(),
            count: counts[b],
            accuracy: (counts[b] > 0).then(|| hits[b] as f64 / counts[b] as f64),
        })
        .collect())
}

/// Per-fold audit log: subject id sets and the fold confusion (held-out
/// scans plus always-test scans).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub confusion: Confusion,
}

/// Published results shown for side-by-side orientation only: they come
/// from clinical imaging cohorts this artifact has no access to and are
/// not reproduced by the synthetic experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub reproduced: bool,
    pub note: String,
    /// Stable-vs-progressive MCI: accuracy / sensitivity / specificity (%).
    pub smci_vs_pmci: [f64; 3],
    /// Multimodal accuracy / sensitivity / specificity (%) per training
    /// composition level (L1, L2, L3).
    pub composition_multimodal: [[f64; 3]; 3],
    /// Multiscale-fused accuracy (%) per composition level, PET then volume.
    pub multiscale_pet: [f64; 3],
    pub multiscale_volume: [f64; 3],
    /// Detection accuracy (%) at about 1, 2, 3 years before conversion.
    pub horizon_years: [f64; 3],
}

impl Default for PublishedReference {
    fn default() -> Self {
        PublishedReference {
            reproduced: false,
            note: "published clinical-cohort results; displayed for orientation, \
                   not reproduced by synthetic runs"
                .into(),
            smci_vs_pmci: [82.93, 79.69, 83.84],
            composition_multimodal: [
                [84.59, 80.17, 91.77],
                [85.96, 85.65, 86.45],
                [86.44, 86.52, 86.32],
            ],
            multiscale_pet: [84.46, 85.46, 85.89],
            multiscale_volume: [81.89, 82.77, 82.45],
            horizon_years: [90.08, 85.61, 81.20],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub task: Task,
    pub n_folds: usize,
    pub ensemble_size: usize,
    pub n_test_scans: usize,
    pub folds: Vec<FoldLog>,
    /// Metrics over unique test scans (held-out scans use their fold's
    /// ensemble; always-test scans use probabilities summed over all folds).
    pub pooled: Metrics,
    /// Secondary view: one prediction per subject from its summed scan
    /// probabilities.
    pub subject_level: Metrics,
    /// Horizon table over progressive test scans; empty when the task's
    /// test pool has none.
    pub horizon: Vec<HorizonBucket>,
    pub published_reference: PublishedReference,
}

/// One scan's ensemble output within one fold's test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanPrediction {
    pub scan_id: String,
    pub truth: usize,
    /// Summed class probabilities over the fold's ensemble.
    pub probs: [f64; 2],
}

/// The raw outcome of testing one fold's ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPredictions {
    pub fold: usize,
    pub train_subjects: Vec<String>,
    pub predictions: Vec<ScanPrediction>,
}

/// Check the cohort and fold plan cover what the task requires and return
/// the cross-validation class per subject.
fn cv_classes(
    features: &CohortFeatures,
    task: Task,
    plan: &FoldPlan,
) -> Result<BTreeMap<String, usize>> {
    let class_of_group: BTreeMap<Group, usize> = task.train_groups().into_iter().collect();
    let mut classes: BTreeMap<String, usize> = BTreeMap::new();
    for scan in &features.scans {
        if let Some(&class) = class_of_group.get(&scan.group) {
            classes.insert(scan.subject_id.clone(), class);
        }
    }
    for group in class_of_group.keys() {
        if !features.scans.iter().any(|s| &s.group == group) {
            return Err(Error::Config(format!(
                "task {} needs group {} which is absent from the cohort",
                task.tag(),
                group.tag()
            )));
        }
    }
    for id in classes.keys() {
        if !plan.assignment.contains_key(id) {
            return Err(Error::Config(format!("subject {id} missing from the fold plan")));
        }
    }
    Ok(classes)
}

/// The training subject/class pairs for one fold.
pub fn fold_train_subjects(
    features: &CohortFeatures,
    task: Task,
    plan: &FoldPlan,
    fold: usize,
) -> Result<Vec<(String, usize)>> {
    let classes = cv_classes(features, task, plan)?;
    Ok(classes
        .into_iter()
        .filter(|(id, _)| plan.assignment[id] != fold)
        .collect())
}

/// Test one fold's trained ensemble on the held-out fold plus all
/// always-test scans.
pub fn evaluate_fold<S: crate::scalar::Scalar>(
    features: &CohortFeatures,
    specs: &[BranchSpec],
    models: &[MmdnnParams<S>],
    task: Task,
    plan: &FoldPlan,
    fold: usize,
) -> Result<FoldPredictions> {
    let classes = cv_classes(features, task, plan)?;
    let always_of_group: BTreeMap<Group, usize> = task.always_test_groups().into_iter().collect();
    let mut test: Vec<(usize, usize)> = Vec::new();
    for (i, scan) in features.scans.iter().enumerate() {
        if let Some(&class) = classes.get(&scan.subject_id) {
            if plan.assignment[&scan.subject_id] == fold {
                test.push((i, class));
            }
        } else if let Some(&label) = always_of_group.get(&scan.group) {
            test.push((i, label));
        }
    }
    let test_idx: Vec<usize> = test.iter().map(|&(i, _)| i).collect();
    let inputs: BranchInputs<S> = specs
        .iter()
        .map(|s| branch_matrix(features, &test_idx, s))
        .collect();
    let (_, probs) = ensemble_predict(models, &inputs)?;
    Ok(FoldPredictions {
        fold,
        train_subjects: classes
            .keys()
            .filter(|id| plan.assignment[*id] != fold)
            .cloned()
            .collect(),
        predictions: test
            .iter()
            .enumerate()
            .map(|(r, &(i, truth))| ScanPrediction {
                scan_id: features.scans[i].scan_id.clone(),
                truth,
                probs: [probs[[r, 0]], probs[[r, 1]]],
            })
            .collect(),
    })
}

fn argmax2(p: [f64; 2]) -> usize {
    if p[1] > p[0] {
        1
    } else {
        0
    }
}

/// Assemble the final report from per-fold predictions. Pooled metrics run
/// over unique scans: held-out scans appear in exactly one fold, while
/// always-test scans accumulate probabilities across every fold.
pub fn assemble_report(
    features: &CohortFeatures,
    task: Task,
    ensemble_size: usize,
    folds: &[FoldPredictions],
) -> Result<ExperimentReport> {
    if folds.is_empty() {
        return Err(Error::Config("no fold predictions".into()));
    }
    let scan_index: BTreeMap<&str, usize> = features
        .scans
        .iter()
        .enumerate()
        .map(|(i, s)| (s.scan_id.as_str(), i))
        .collect();

    let mut fold_logs = Vec::with_capacity(folds.len());
    let mut pooled: BTreeMap<usize, (usize, [f64; 2])> = BTreeMap::new();
    for fp in folds {
        let mut confusion = Confusion::default();
        let mut test_subjects: BTreeSet<String> = BTreeSet::new();
        for p in &fp.predictions {
            let &idx = scan_index.get(p.scan_id.as_str()).ok_or_else(|| {
                Error::validation("scan_id", format!("{} not in the feature set", p.scan_id))
            })?;
            confusion.add(argmax2(p.probs), p.truth);
            test_subjects.insert(features.scans[idx].subject_id.clone());
            let entry = pooled.entry(idx).or_insert((p.truth, [0.0; 2]));
            entry.1[0] += p.probs[0];
            entry.1[1] += p.probs[1];
        }
        fold_logs.push(FoldLog {
            fold: fp.fold,
            train_subjects: fp.train_subjects.clone(),
            test_subjects: test_subjects.into_iter().collect(),
            confusion,
        });
    }

    let mut pooled_conf = Confusion::default();
    let mut per_subject: BTreeMap<&str, (usize, [f64; 2])> = BTreeMap::new();
    let mut h_preds = Vec::new();
    let mut h_months = Vec::new();
    for (&idx, &(truth, p)) in &pooled {
        let scan = &features.scans[idx];
        let pred = argmax2(p);
        pooled_conf.add(pred, truth);
        let entry = per_subject
            .entry(scan.subject_id.as_str())
            .or_insert((truth, [0.0; 2]));
        entry.1[0] += p[0];
        entry.1[1] += p[1];
        if scan.group.is_progressive() {
            h_preds.push(pred);
            h_months.push(scan.months_to_conversion);
        }
    }
    let mut subject_conf = Confusion::default();
    for &(truth, p) in per_subject.values() {
        subject_conf.add(argmax2(p), truth);
    }
    let horizon = if h_preds.is_empty() {
        Vec::new()
    } else {
        conversion_report(&h_preds, &h_months)?
    };

    Ok(ExperimentReport {
        task,
        n_folds: folds.len(),
        ensemble_size,
        n_test_scans: pooled.len(),
        folds: fold_logs,
        pooled: metrics_from_confusion(pooled_conf),
        subject_level: metrics_from_confusion(subject_conf),
        horizon,
        published_reference: PublishedReference::default(),
    })
}

/// Run the full cross-validated experiment: per fold, train an ensemble on
/// the other folds' subjects and test on the held-out fold plus all
/// always-test scans.
pub fn run_experiment(
    features: &CohortFeatures,
    spec: &ExperimentSpec,
    plan: &FoldPlan,
) -> Result<ExperimentReport> {
    spec.validate()?;
    let specs = branch_specs(features, &spec.modalities, &spec.scales)?;
    cv_classes(features, spec.task, plan)?;

    let fold_preds: Vec<FoldPredictions> = (0..plan.n_folds)
        .into_par_iter()
        .map(|fold| {
            let train_subjects = fold_train_subjects(features, spec.task, plan, fold)?;
            let members = train_ensemble::<crate::Real>(
                features,
                &specs,
                &train_subjects,
                spec,
                plan.seed ^ ((fold as u64 + 1) << 48),
            )?;
            let models: Vec<MmdnnParams<crate::Real>> =
                members.into_iter().map(|(m, _)| m).collect();
            evaluate_fold(features, &specs, &models, spec.task, plan, fold)
        })
        .collect::<Result<Vec<_>>>()?;

    assemble_report(features, spec.task, spec.ensemble_size, &fold_preds)
}

/// Cross-validation pool for a task: (subject id, group) of every subject
/// whose group participates in training.
pub fn cv_subjects(features: &CohortFeatures, task: Task) -> Vec<(String, Group)> {
    let groups: BTreeSet<Group> = task.train_groups().into_iter().map(|(g, _)| g).collect();
    let mut seen = BTreeMap::new();
    for scan in &features.scans {
        if groups.contains(&scan.group) {
            seen.insert(scan.subject_id.clone(), scan.group);
        }
    }
    seen.into_iter().collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "   n/a".into(), |x| format!("{:6.4}", x))
}

/// Aligned-column text rendering of a report.
pub fn render_text(report: &ExperimentReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(out, "task: {}", report.task.tag());
    let _ = writeln!(
        out,
        "folds: {}   ensemble: {}   test scans: {}",
        report.n_folds, report.ensemble_size, report.n_test_scans
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<14} {:>8} {:>8} {:>8}", "", "acc", "sens", "spec");
    for (name, m) in [("pooled", &report.pooled), ("subject-level", &report.subject_level)] {
        let _ = writeln!(
            out,
            "{:<14} {:>8.4} {:>8} {:>8}",
            name,
            m.accuracy,
            fmt_opt(m.sensitivity),
            fmt_opt(m.specificity)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<6} {:>6} {:>6} {:>6} {:>6}", "fold", "tp", "fp", "tn", "fn");
    for f in &report.folds {
        let c = f.confusion;
        let _ = writeln!(
            out,
            "{:<6} {:>6} {:>6} {:>6} {:>6}",
            f.fold, c.tp, c.fp, c.tn, c.fn_
        );
    }
    if !report.horizon.is_empty() {
        let _ = writeln!(out);
        let _ = writeln!(out, "months-to-conversion bucket accuracy:");
        let _ = writeln!(out, "{:<10} {:>6} {:>8}", "bucket", "n", "acc");
        for b in &report.horizon {
            let _ = writeln!(out, "{:<10} {:>6} {:>8}", b.label, b.count, fmt_opt(b.accuracy));
        }
    }
    let r = &report.published_reference;
    let _ = writeln!(out);
    let _ = writeln!(out, "published reference (reproduced: {}):", r.reproduced);
    let _ = writeln!(
        out,
        "  smci-pmci acc/sens/spec: {:.2} / {:.2} / {:.2}",
        r.smci_vs_pmci[0], r.smci_vs_pmci[1], r.smci_vs_pmci[2]
    );
    let _ = writeln!(
        out,
        "  horizon ~1/2/3 years: {:.2} / {:.2} / {:.2}",
        r.horizon_years[0], r.horizon_years[1], r.horizon_years[2]
    );
    let _ = writeln!(out, "  note: {}", r.note);
    out
}

/// Mechanical leakage audit: in every fold, train and test subject id sets
/// must be disjoint.
pub fn audit_leakage(report: &ExperimentReport) -> Result<()> {
    for fold in &report.folds {
        let train: BTreeSet<&String> = fold.train_subjects.iter().collect();
        for id in &fold.test_subjects {
            if train.contains(id) {
                return Err(Error::Validation {
                    field: "fold plan".into(),
                    reason: format!("subject {id} on both sides of fold {}", fold.fold),
                });
            }
        }
    }
    Ok(())
}
