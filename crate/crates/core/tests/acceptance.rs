//! Acceptance suite: one test per acceptance criterion, each printing a
//! single PASS/FAIL line. Heavy criteria share cached experiment runs and
//! serialize on a gate so wall-clock budgets are measured cleanly.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array2;
use once_cell::sync::Lazy;
use rand::Rng;

use patchnet::atlas::{build_patch_atlas, kmeans_spatial, patch_count};
use patchnet::cohort::{make_template, sample_cohort, CohortSpec, Effect, Group};
use patchnet::experiment::{
    audit_leakage, run_experiment, split_subject_folds, ExperimentReport, ExperimentSpec, Task,
};
use patchnet::features::CohortFeatures;
use patchnet::model::{hidden_dims, BranchSpec, Modality, TrainConfig, LATENT_DIM};
use patchnet::nn::{finite_diff_check, pretrain_sae, MlpParams};
use patchnet::rng::stream;

/// Serializes the timed/heavy criteria so runtime budgets are meaningful.
static GATE: Lazy<Mutex<()>> = Lazy::new(|| Mutex::new(()));

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} failed: {detail}");
}

fn build_features(spec: &CohortSpec, targets: &[usize]) -> CohortFeatures {
    let template = make_template(spec).unwrap();
    let scans = sample_cohort(spec, &template).unwrap();
    let atlas = build_patch_atlas(&template.roi, targets, spec.seed).unwrap();
    CohortFeatures::from_scans(&scans, &atlas, &template.roi).unwrap()
}

fn run_task(
    features: &CohortFeatures,
    task: Task,
    scales: Vec<usize>,
    ensemble_size: usize,
    cfg: TrainConfig,
    n_folds: usize,
    seed: u64,
) -> ExperimentReport {
    let spec = ExperimentSpec {
        task,
        modalities: vec![Modality::Volume, Modality::Pet],
        scales,
        ensemble_size,
        cfg,
    };
    let pool = patchnet::experiment::cv_subjects(features, task);
    let plan = split_subject_folds(&pool, n_folds, seed).unwrap();
    run_experiment(features, &spec, &plan).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient oracle.

#[test]
fn criterion_01_gradient_oracle() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = stream(0x96ad, &[trial]);
        let input_dim = rng.gen_range(3..=20);
        let h1 = rng.gen_range(4..=12);
        let h2 = rng.gen_range(3..=8);
        let batch = rng.gen_range(2..=8);
        let mut params = MlpParams::<f64>::init(&[input_dim, h1, h2, 2], &mut rng).unwrap();
        // Jitter the zero-initialized biases so no ReLU sits exactly on its
        // kink (an all-dead previous layer would otherwise pin whole rows of
        // preactivations at 0, where the loss is not differentiable).
        for layer in &mut params.layers {
            layer.b.mapv_inplace(|v| v + rng.gen_range(0.01..0.1));
        }
        let inputs = Array2::from_shape_fn((batch, input_dim), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..2usize)).collect();
        let err = finite_diff_check(&params, &inputs, &labels, 1e-6, 200, &mut rng).unwrap();
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    verdict(
        "1 (gradient oracle)",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        &format!("max relative error {worst:.2e} over 20 networks in {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: autoencoder pretraining efficacy.

#[test]
fn criterion_02_sae_efficacy() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let mut rng = stream(0x5ae, &[1]);
    let dim = 50;
    let n = 500;
    // Rank-3 inputs: three random factors mixed by smooth coefficients.
    let basis: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let x = Array2::from_shape_fn((n, dim), |(i, j)| {
        (0..3)
            .map(|r| ((i as f64 + 1.0) * (r as f64 + 0.37)).sin() * basis[r][j])
            .sum::<f64>()
    });
    let mut params = MlpParams::<f64>::init(&[dim, 30, 12, 2], &mut rng).unwrap();
    let logs = pretrain_sae(&mut params, &x, 40, 25, 1e-3, &mut rng).unwrap();
    let elapsed = start.elapsed();
    let all_halved = logs.iter().all(|l| l.final_loss < 0.5 * l.initial_loss);
    let detail = logs
        .iter()
        .map(|l| format!("layer {}: {:.4} -> {:.4}", l.layer, l.initial_loss, l.final_loss))
        .collect::<Vec<_>>()
        .join("; ");
    verdict(
        "2 (sae pretraining)",
        all_halved && elapsed < Duration::from_secs(60),
        &format!("{detail} ({elapsed:.2?})"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: architecture conformance.

#[test]
fn criterion_03_architecture() {
    let mut ok = true;
    let expected = [
        (1488usize, [4464usize, 1116, 100]),
        (705, [2115, 528, 100]),
        (343, [1029, 257, 100]),
    ];
    for (n, dims) in expected {
        ok &= hidden_dims(n) == dims;
        let spec = BranchSpec {
            modality: Modality::Volume,
            scale_index: 0,
            input_dim: n,
        };
        let mut rng = stream(3, &[n as u64]);
        let params = MlpParams::<f32>::init(&spec.layer_dims(), &mut rng).unwrap();
        ok &= params.dims() == vec![n, dims[0], dims[1], dims[2], 2];
    }
    let fusion_in = 6 * LATENT_DIM;
    ok &= fusion_in == 600 && hidden_dims(fusion_in) == [1800, 450, 100];
    verdict(
        "3 (architecture rule)",
        ok,
        "branch dims (4464,1116,100)/(2115,528,100)/(1029,257,100), fusion (1800,450,100)",
    );
}

// ---------------------------------------------------------------------------
// Criteria 4 and 9 share one desk-scale strong-effect run.

static DESK_STRONG: Lazy<(ExperimentReport, Duration)> = Lazy::new(|| {
    let start = Instant::now();
    let spec = CohortSpec::desk_scale(42);
    let features = build_features(&spec, &[500, 1000, 2000]);
    let report = run_task(
        &features,
        Task::PathologyL1,
        vec![0, 1, 2],
        10,
        TrainConfig::desk_scale(42),
        10,
        42,
    );
    (report, start.elapsed())
});

#[test]
fn criterion_04_end_to_end_separation() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let (report, elapsed) = &*DESK_STRONG;
    let acc = report.pooled.accuracy;
    verdict(
        "4 (desk-scale separation)",
        acc >= 0.90 && *elapsed < Duration::from_secs(15 * 60),
        &format!(
            "pooled accuracy {acc:.4} over {} scans in {elapsed:.2?}",
            report.n_test_scans
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: null control.

#[test]
fn criterion_05_null_control() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let mut spec = CohortSpec::desk_scale(42);
    for effect in spec.effect.values_mut() {
        *effect = Effect { atrophy: 1.0, hypometabolism: 1.0 };
    }
    let features = build_features(&spec, &[500, 1000, 2000]);
    let report = run_task(
        &features,
        Task::PathologyL1,
        vec![0, 1, 2],
        10,
        TrainConfig::desk_scale(42),
        10,
        42,
    );
    let acc = report.pooled.accuracy;
    verdict(
        "5 (null control)",
        (0.40..=0.60).contains(&acc),
        &format!("pooled accuracy {acc:.4} over {} scans", report.n_test_scans),
    );
}

// ---------------------------------------------------------------------------
// Moderate cohort shared by criteria 6–8: smaller grid, genuinely distinct
// scales, steep ramp (full strength only near conversion), moderate effect.

fn moderate_spec(seed: u64) -> CohortSpec {
    let mut spec = CohortSpec::desk_scale(seed);
    spec.dims = [24, 24, 24];
    spec.n_rois = 8;
    spec.group_counts = [
        (Group::StableNc, 20),
        (Group::StableMci, 4),
        (Group::ProgressiveNc, 10),
        (Group::ProgressiveMci, 16),
        (Group::StableAd, 14),
    ]
    .into_iter()
    .collect::<BTreeMap<_, _>>();
    let moderate = Effect { atrophy: 0.78, hypometabolism: 0.78 };
    spec.effect.insert(Group::StableAd, moderate);
    spec.effect.insert(Group::ProgressiveMci, moderate);
    spec.effect.insert(Group::ProgressiveNc, moderate);
    spec.effect.insert(Group::StableMci, Effect { atrophy: 0.95, hypometabolism: 0.95 });
    spec.noise_sigma = 0.07;
    spec.horizon_months = 36;
    spec
}

const MODERATE_TARGETS: [usize; 3] = [60, 180, 540];
const MODERATE_SEEDS: [u64; 3] = [11, 12, 13];

fn moderate_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        patience_epochs: 5,
        max_epochs: 25,
        pretrain_epochs: 4,
        seed,
        ..TrainConfig::default()
    }
}

static MODERATE_FEATURES: Lazy<BTreeMap<u64, CohortFeatures>> = Lazy::new(|| {
    MODERATE_SEEDS
        .iter()
        .map(|&s| (s, build_features(&moderate_spec(s), &MODERATE_TARGETS)))
        .collect()
});

static MODERATE_REPORTS: Lazy<Mutex<BTreeMap<(u64, &'static str), ExperimentReport>>> =
    Lazy::new(|| Mutex::new(BTreeMap::new()));

fn moderate_report(seed: u64, task: Task, scales: Vec<usize>, key: &'static str) -> ExperimentReport {
    if let Some(r) = MODERATE_REPORTS.lock().unwrap().get(&(seed, key)) {
        return r.clone();
    }
    let report = run_task(
        &MODERATE_FEATURES[&seed],
        task,
        scales,
        2,
        moderate_cfg(seed),
        3,
        seed,
    );
    MODERATE_REPORTS
        .lock()
        .unwrap()
        .insert((seed, key), report.clone());
    report
}

#[test]
fn criterion_06_multiscale_benefit() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let mut fused = 0.0;
    let mut single = [0.0f64; 3];
    for &seed in &MODERATE_SEEDS {
        fused += moderate_report(seed, Task::PathologyL1, vec![0, 1, 2], "l1-multi").pooled.accuracy;
        for s in 0..3 {
            let key: &'static str = ["l1-s0", "l1-s1", "l1-s2"][s];
            single[s] += moderate_report(seed, Task::PathologyL1, vec![s], key).pooled.accuracy;
        }
    }
    let n = MODERATE_SEEDS.len() as f64;
    fused /= n;
    for s in &mut single {
        *s /= n;
    }
    let best = single.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        "6 (multiscale benefit)",
        fused >= best - 0.02,
        &format!("fused {fused:.4} vs single-scale {single:?} (best {best:.4})"),
    );
}

/// Detection rate over progressive test scans, from the horizon table.
fn progressive_sensitivity(report: &ExperimentReport) -> f64 {
    let mut hits = 0.0;
    let mut total = 0.0;
    for b in &report.horizon {
        if let Some(acc) = b.accuracy {
            hits += acc * b.count as f64;
            total += b.count as f64;
        }
    }
    hits / total
}

#[test]
fn criterion_07_composition_sensitivity() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let mut means = [0.0f64; 3];
    for &seed in &MODERATE_SEEDS {
        means[0] += progressive_sensitivity(&moderate_report(seed, Task::PathologyL1, vec![0, 1, 2], "l1-multi"));
        means[1] += progressive_sensitivity(&moderate_report(seed, Task::PathologyL2, vec![0, 1, 2], "l2-multi"));
        means[2] += progressive_sensitivity(&moderate_report(seed, Task::PathologyL3, vec![0, 1, 2], "l3-multi"));
    }
    for m in &mut means {
        *m /= MODERATE_SEEDS.len() as f64;
    }
    verdict(
        "7 (composition sensitivity)",
        means[0] <= means[1] + 1e-12 && means[1] <= means[2] + 1e-12,
        &format!(
            "mean progressive-scan sensitivity L1 {:.4} <= L2 {:.4} <= L3 {:.4}",
            means[0], means[1], means[2]
        ),
    );
}

#[test]
fn criterion_08_horizon_monotonicity() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    // Shares the L1 runs with criteria 6 and 7. The L1 model is trained on
    // full-strength disease only, so its detection rate tracks the ramped
    // effect strength, which decays with months to conversion.
    let mut acc = [0.0f64; 3];
    let mut counts = [0.0f64; 3];
    for &seed in &MODERATE_SEEDS {
        let report = moderate_report(seed, Task::PathologyL1, vec![0, 1, 2], "l1-multi");
        // Buckets (0,12], (12,24], (24,36] are indices 1..=3.
        for (slot, bucket) in report.horizon[1..=3].iter().enumerate() {
            if let Some(a) = bucket.accuracy {
                acc[slot] += a * bucket.count as f64;
                counts[slot] += bucket.count as f64;
            }
        }
    }
    for i in 0..3 {
        acc[i] /= counts[i].max(1.0);
    }
    verdict(
        "8 (horizon monotonicity)",
        counts.iter().all(|&c| c > 0.0)
            && acc[0] + 1e-12 >= acc[1]
            && acc[1] + 1e-12 >= acc[2],
        &format!(
            "mean bucket accuracy (0,12] {:.4} >= (12,24] {:.4} >= (24,36] {:.4}",
            acc[0], acc[1], acc[2]
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: leakage audit on the desk-scale run's logs.

#[test]
fn criterion_09_leakage_audit() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let (report, _) = &*DESK_STRONG;
    let disjoint = audit_leakage(report).is_ok();
    // Every cross-validated subject appears on the test side of exactly one
    // fold, so all of a subject's scans share a side in every fold.
    let mut test_appearances: BTreeMap<&String, usize> = BTreeMap::new();
    let always: Vec<(Group, usize)> = report.task.always_test_groups();
    let mut one_side = true;
    for fold in &report.folds {
        let train: std::collections::BTreeSet<&String> = fold.train_subjects.iter().collect();
        for id in &fold.test_subjects {
            one_side &= !train.contains(id);
            *test_appearances.entry(id).or_default() += 1;
        }
    }
    let n_folds = report.folds.len();
    let cv_once = test_appearances
        .iter()
        .all(|(id, &n)| n == 1 || (n == n_folds && always.iter().any(|(g, _)| id.starts_with(g.tag()))));
    verdict(
        "9 (leakage audit)",
        disjoint && one_side && cv_once,
        &format!(
            "train/test disjoint in all {n_folds} folds; cross-validated subjects held out exactly once"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 10: CLI determinism.

#[test]
fn criterion_10_cli_determinism() {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "cohort": {
            "dims": [12, 12, 12],
            "spacing_mm": [1.0, 1.0, 1.0],
            "n_rois": 4,
            "group_counts": {"sNC": 6, "sMCI": 2, "pNC": 2, "pMCI": 3, "sAD": 5},
            "effect": {
                "sAD": {"atrophy": 0.7, "hypometabolism": 0.7},
                "pMCI": {"atrophy": 0.7, "hypometabolism": 0.7},
                "pNC": {"atrophy": 0.7, "hypometabolism": 0.7},
                "sMCI": {"atrophy": 0.92, "hypometabolism": 0.92}
            },
            "affected_fraction": 0.25,
            "noise_sigma": 0.05,
            "scans_per_subject": 2,
            "months_between_scans": 12,
            "horizon_months": 36,
            "seed": 9
        },
        "atlas_targets": [60, 120],
        "experiment": {
            "task": "l1",
            "modalities": ["volume", "pet"],
            "scales": [0, 1],
            "ensemble_size": 2,
            "cfg": {
                "batch_size": 8, "dropout_rate": 0.5, "patience_epochs": 3,
                "max_epochs": 6, "pretrain_epochs": 2, "lr_pretrain": 0.001,
                "lr_head": 0.001, "lr_finetune": 0.0001, "lr_joint": 0.0001,
                "seed": 9
            }
        },
        "n_folds": 3,
        "output_dir": "replaced-per-run",
        "seed": 9
    });
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let run = |out: &Path| -> serde_json::Value {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_patchnet"))
            .args([
                "all",
                "--config",
                config_path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ])
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::null())
            .output()
            .unwrap();
        assert!(status.status.success(), "pipeline run failed");
        let mut report: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join("report/report.json")).unwrap(),
        )
        .unwrap();
        // The timestamp is the only field allowed to differ.
        report.as_object_mut().unwrap().remove("generated_at");
        report
    };
    let a = run(&dir.path().join("run_a"));
    let b = run(&dir.path().join("run_b"));
    let identical = serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    let txt_a = std::fs::read(dir.path().join("run_a/report/report.txt")).unwrap();
    let txt_b = std::fs::read(dir.path().join("run_b/report/report.txt")).unwrap();
    verdict(
        "10 (cli determinism)",
        identical && txt_a == txt_b,
        "two `all` runs byte-identical apart from the timestamp field",
    );
}

// ---------------------------------------------------------------------------
// Criterion 11: k-means brute-force oracle.

fn brute_force_cost(points: &[[f64; 3]], k: usize) -> f64 {
    fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
    }
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assignment = vec![0usize; n];
    loop {
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            for d in 0..3 {
                sums[assignment[i]][d] += p[d];
            }
            counts[assignment[i]] += 1;
        }
        if counts.iter().all(|&c| c > 0) {
            let centroids: Vec<[f64; 3]> = (0..k)
                .map(|c| {
                    let m = counts[c] as f64;
                    [sums[c][0] / m, sums[c][1] / m, sums[c][2] / m]
                })
                .collect();
            let cost: f64 = points
                .iter()
                .zip(&assignment)
                .map(|(&p, &a)| dist2(p, centroids[a]))
                .sum();
            best = best.min(cost);
        }
        // Next assignment in base-k counting order.
        let mut pos = 0;
        loop {
            if pos == n {
                return best;
            }
            assignment[pos] += 1;
            if assignment[pos] < k {
                break;
            }
            assignment[pos] = 0;
            pos += 1;
        }
    }
}

fn is_lloyd_stable(points: &[[f64; 3]], assignment: &[usize], k: usize) -> bool {
    fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
    }
    let mut sums = vec![[0.0f64; 3]; k];
    let mut counts = vec![0usize; k];
    for (i, &p) in points.iter().enumerate() {
        for d in 0..3 {
            sums[assignment[i]][d] += p[d];
        }
        counts[assignment[i]] += 1;
    }
    let centroids: Vec<[f64; 3]> = (0..k)
        .map(|c| {
            let m = counts[c].max(1) as f64;
            [sums[c][0] / m, sums[c][1] / m, sums[c][2] / m]
        })
        .collect();
    points.iter().zip(assignment).all(|(&p, &a)| {
        let own = dist2(p, centroids[a]);
        centroids.iter().all(|&c| own <= dist2(p, c) + 1e-12)
    })
}

#[test]
fn criterion_11_kmeans_oracle() {
    let mut optimal = 0;
    let mut stable_rest = true;
    let trials = 50u64;
    for trial in 0..trials {
        let mut rng = stream(0xacce, &[trial]);
        let n = rng.gen_range(4..=12);
        let k = rng.gen_range(2..=3.min(n));
        let mut coords: Vec<[i64; 3]> = Vec::new();
        while coords.len() < n {
            let c = [
                rng.gen_range(0..6),
                rng.gen_range(0..6),
                rng.gen_range(0..6),
            ];
            if !coords.contains(&c) {
                coords.push(c);
            }
        }
        let points: Vec<[f64; 3]> = coords
            .iter()
            .map(|&[x, y, z]| [x as f64, y as f64, z as f64])
            .collect();
        let result = kmeans_spatial(&coords, k, trial).unwrap();
        let oracle = brute_force_cost(&points, k);
        if result.cost <= oracle + 1e-9 {
            optimal += 1;
        } else {
            stable_rest &= is_lloyd_stable(&points, &result.assignment, k);
        }
    }
    verdict(
        "11 (k-means oracle)",
        optimal >= 45 && stable_rest,
        &format!("{optimal}/{trials} at the brute-force optimum; all others Lloyd-stable"),
    );
    // The per-ROI count rule backing the clustering sizes.
    assert_eq!(patch_count(635, 500), 1);
    assert_eq!(patch_count(1488 * 500, 500), 1488);
}
