//! Staged pipeline: cohort generation, patch-atlas construction,
//! featurization, ensemble training, evaluation, and reporting, each
//! leaving replayable artifacts (with a config-hash manifest) on disk.
//!
//! Stage boundaries are strict: every stage reads only prior-stage
//! artifacts plus its own config section, so deleting downstream artifacts
//! and rerunning downstream stages reproduces them exactly.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::atlas::{build_patch_atlas, read_patch_atlas, write_patch_atlas};
use crate::cohort::{
    make_template, read_cohort_manifest, read_scan, sample_cohort, write_cohort, CohortSpec,
};
use crate::error::{Error, Result};
use crate::experiment::{
    assemble_report, cv_subjects, evaluate_fold, fold_train_subjects, render_text,
    split_subject_folds, train_ensemble, ExperimentReport, ExperimentSpec, FoldPlan,
    FoldPredictions, Task,
};
use crate::features::{read_features, write_features, CohortFeatures};
use crate::model::{branch_specs, read_model, write_model, MmdnnParams, TrainConfig};
use crate::volume::{read_volume, RoiAtlas};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Gen,
    Atlas,
    Featurize,
    Train,
    Eval,
    Report,
    All,
}

impl Stage {
    pub const ORDERED: [Stage; 6] = [
        Stage::Gen,
        Stage::Atlas,
        Stage::Featurize,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct PipelineConfig {
    pub cohort: CohortSpec,
    pub atlas_targets: Vec<usize>,
    pub experiment: ExperimentSpec,
    pub n_folds: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            cohort: CohortSpec::desk_scale(0),
            atlas_targets: vec![500, 1000, 2000],
            experiment: ExperimentSpec::new(Task::PathologyL1, TrainConfig::desk_scale(0)),
            n_folds: 10,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Default configuration rebased onto one master seed.
    pub fn with_seed(seed: u64) -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.set_seed(seed);
        cfg
    }

    /// Propagate one master seed into every seeded component.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.cohort.seed = seed;
        self.experiment.cfg.seed = seed;
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::json("pipeline config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.experiment.validate()?;
        if self.atlas_targets.is_empty() {
            return Err(Error::Config("atlas_targets must be non-empty".into()));
        }
        if self.n_folds == 0 {
            return Err(Error::Config("n_folds must be positive".into()));
        }
        for &s in &self.experiment.scales {
            if s >= self.atlas_targets.len() {
                return Err(Error::Config(format!(
                    "scale index {s} outside the {} atlas targets",
                    self.atlas_targets.len()
                )));
            }
        }
        Ok(())
    }

    /// Canonical hash of the configuration, recorded in every manifest.
    /// The output directory is excluded: it names where artifacts land,
    /// not what is computed, and identical runs to different directories
    /// must produce identical reports.
    pub fn sha256(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        let text =
            serde_json::to_string(&canonical).map_err(|e| Error::json("pipeline config", e))?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        Ok(format!("{:x}", hasher.finalize()))
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.output_dir.join(sub)
    }
}

/// Per-stage replay manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub config_sha256: String,
    pub seed: u64,
}

fn write_stage_manifest(cfg: &PipelineConfig, stage: Stage, dir: &Path) -> Result<()> {
    let manifest = StageManifest {
        stage,
        config_sha256: cfg.sha256()?,
        seed: cfg.seed,
    };
    let path = dir.join("stage_manifest.json");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::json("stage manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path, context: &'static str) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(context, e))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, context: &'static str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(context, e))
}

fn run_gen(cfg: &PipelineConfig) -> Result<()> {
    let dir = cfg.dir("cohort");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log(&format!("gen: sampling cohort into {}", dir.display()));
    let template = make_template(&cfg.cohort)?;
    let scans = sample_cohort(&cfg.cohort, &template)?;
    write_cohort(&cfg.cohort, &template, &scans, &dir)?;
    write_stage_manifest(cfg, Stage::Gen, &dir)
}

fn load_roi(cfg: &PipelineConfig) -> Result<(RoiAtlas, usize)> {
    let cohort_dir = require(cfg.dir("cohort"))?;
    let manifest = read_cohort_manifest(&cohort_dir)?;
    let roi_vol = read_volume(&require(cohort_dir.join(&manifest.roi_atlas_file))?)?;
    Ok((
        RoiAtlas::new(roi_vol, manifest.n_rois)?,
        manifest.brainstem_roi_id,
    ))
}

fn run_atlas(cfg: &PipelineConfig) -> Result<()> {
    let (roi, _) = load_roi(cfg)?;
    let dir = cfg.dir("atlas");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    log(&format!("atlas: clustering {} targets", cfg.atlas_targets.len()));
    let atlas = build_patch_atlas(&roi, &cfg.atlas_targets, cfg.seed)?;
    write_patch_atlas(&atlas, &dir)?;
    write_stage_manifest(cfg, Stage::Atlas, &dir)
}

fn run_featurize(cfg: &PipelineConfig) -> Result<()> {
    let cohort_dir = require(cfg.dir("cohort"))?;
    let manifest = read_cohort_manifest(&cohort_dir)?;
    let (roi, brainstem) = load_roi(cfg)?;
    let atlas_dir = require(cfg.dir("atlas"))?;
    let atlas = read_patch_atlas(&atlas_dir, &cfg.atlas_targets)?;
    log(&format!("featurize: {} scans", manifest.scans.len()));
    let scans = manifest
        .scans
        .iter()
        .map(|r| read_scan(&cohort_dir, r, brainstem))
        .collect::<Result<Vec<_>>>()?;
    let features = CohortFeatures::from_scans(&scans, &atlas, &roi)?;
    let dir = cfg.dir("features");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_features(&features, &dir)?;
    write_stage_manifest(cfg, Stage::Featurize, &dir)
}

fn load_cohort_features(cfg: &PipelineConfig) -> Result<CohortFeatures> {
    let dir = require(cfg.dir("features"))?;
    read_features(&dir)
}

fn run_train(cfg: &PipelineConfig) -> Result<()> {
    let features = load_cohort_features(cfg)?;
    let spec = &cfg.experiment;
    let specs = branch_specs(&features, &spec.modalities, &spec.scales)?;
    let pool = cv_subjects(&features, spec.task);
    let plan = split_subject_folds(&pool, cfg.n_folds, cfg.seed)?;
    let dir = cfg.dir("models");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&plan, &dir.join("fold_plan.json"), "fold plan")?;
    for fold in 0..plan.n_folds {
        log(&format!(
            "train: fold {}/{} ({} members)",
            fold + 1,
            plan.n_folds,
            spec.ensemble_size
        ));
        let train_subjects = fold_train_subjects(&features, spec.task, &plan, fold)?;
        let members = train_ensemble::<crate::Real>(
            &features,
            &specs,
            &train_subjects,
            spec,
            plan.seed ^ ((fold as u64 + 1) << 48),
        )?;
        for (m, (model, _)) in members.iter().enumerate() {
            write_model(model, &dir.join(format!("fold_{fold}/member_{m}")))?;
        }
    }
    write_stage_manifest(cfg, Stage::Train, &dir)
}

fn run_eval(cfg: &PipelineConfig) -> Result<()> {
    let features = load_cohort_features(cfg)?;
    let spec = &cfg.experiment;
    let specs = branch_specs(&features, &spec.modalities, &spec.scales)?;
    let models_dir = require(cfg.dir("models"))?;
    let plan: FoldPlan = read_json(&require(models_dir.join("fold_plan.json"))?, "fold plan")?;
    let mut folds = Vec::with_capacity(plan.n_folds);
    for fold in 0..plan.n_folds {
        log(&format!("eval: fold {}/{}", fold + 1, plan.n_folds));
        let mut models: Vec<MmdnnParams<crate::Real>> = Vec::new();
        for m in 0..spec.ensemble_size {
            let path = require(models_dir.join(format!("fold_{fold}/member_{m}")))?;
            models.push(read_model(&path)?);
        }
        folds.push(evaluate_fold(&features, &specs, &models, spec.task, &plan, fold)?);
    }
    let dir = cfg.dir("eval");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_json(&folds, &dir.join("predictions.json"), "fold predictions")?;
    write_stage_manifest(cfg, Stage::Eval, &dir)
}

/// Final report wrapper; `generated_at` (seconds since the Unix epoch) is
/// the only field allowed to differ between replays of the same config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub generated_at: u64,
    pub config_sha256: String,
    pub seed: u64,
    pub report: ExperimentReport,
}

fn run_report(cfg: &PipelineConfig) -> Result<PathBuf> {
    let features = load_cohort_features(cfg)?;
    let folds: Vec<FoldPredictions> = read_json(
        &require(cfg.dir("eval").join("predictions.json"))?,
        "fold predictions",
    )?;
    let report = assemble_report(
        &features,
        cfg.experiment.task,
        cfg.experiment.ensemble_size,
        &folds,
    )?;
    let dir = cfg.dir("report");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let wrapped = PipelineReport {
        generated_at: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config_sha256: cfg.sha256()?,
        seed: cfg.seed,
        report,
    };
    let json_path = dir.join("report.json");
    write_json(&wrapped, &json_path, "report")?;
    let txt_path = dir.join("report.txt");
    std::fs::write(&txt_path, render_text(&wrapped.report)).map_err(|e| Error::io(&txt_path, e))?;
    write_stage_manifest(cfg, Stage::Report, &dir)?;
    Ok(json_path)
}

fn log(msg: &str) {
    eprintln!("[patchnet] {msg}");
}

/// Run one stage (or the whole chain). Returns the report path when the
/// report stage ran.
pub fn run_pipeline(cfg: &PipelineConfig, stage: Stage) -> Result<Option<PathBuf>> {
    cfg.validate()?;
    match stage {
        Stage::Gen => run_gen(cfg).map(|_| None),
        Stage::Atlas => run_atlas(cfg).map(|_| None),
        Stage::Featurize => run_featurize(cfg).map(|_| None),
        Stage::Train => run_train(cfg).map(|_| None),
        Stage::Eval => run_eval(cfg).map(|_| None),
        Stage::Report => run_report(cfg).map(Some),
        Stage::All => {
            let mut path = None;
            for s in Stage::ORDERED {
                path = run_pipeline(cfg, s)?;
            }
            Ok(path)
        }
    }
}
