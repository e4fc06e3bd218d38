//! Reproducible synthetic cohorts.
//!
//! Generates a template ROI atlas (Voronoi partition of an ellipsoidal
//! foreground) and longitudinal subject scans for five diagnostic groups,
//! with controllable atrophy and hypometabolism effect sizes. Progressive
//! subjects ramp linearly from no effect at `horizon_months` before
//! conversion to full effect at conversion.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::{read_volume, write_volume, RoiAtlas, Volume};

/// The five diagnostic groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "sNC")]
    StableNc,
    #[serde(rename = "sMCI")]
    StableMci,
    #[serde(rename = "pNC")]
    ProgressiveNc,
    #[serde(rename = "pMCI")]
    ProgressiveMci,
    #[serde(rename = "sAD")]
    StableAd,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::StableNc,
        Group::StableMci,
        Group::ProgressiveNc,
        Group::ProgressiveMci,
        Group::StableAd,
    ];

    pub fn is_progressive(self) -> bool {
        matches!(self, Group::ProgressiveNc | Group::ProgressiveMci)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Group::StableNc => "sNC",
            Group::StableMci => "sMCI",
            Group::ProgressiveNc => "pNC",
            Group::ProgressiveMci => "pMCI",
            Group::StableAd => "sAD",
        }
    }
}

/// Disease effect strengths for one group: multipliers applied in affected
/// ROIs at full strength, both in `(0, 1]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Effect {
    pub atrophy: f64,
    pub hypometabolism: f64,
}

impl Effect {
    pub const NONE: Effect = Effect { atrophy: 1.0, hypometabolism: 1.0 };
}

/// Cohort generation parameters.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CohortSpec {
    pub dims: [usize; 3],
    pub spacing_mm: [f32; 3],
    pub n_rois: usize,
    pub group_counts: BTreeMap<Group, usize>,
    /// Full-strength effect per group. Stable NC needs no entry; missing
    /// groups default to no effect.
    pub effect: BTreeMap<Group, Effect>,
    /// Fraction of non-brainstem ROIs carrying the disease signature.
    pub affected_fraction: f64,
    pub noise_sigma: f64,
    pub scans_per_subject: usize,
    pub months_between_scans: usize,
    /// Progressive subjects ramp from zero effect at this many months before
    /// conversion to full effect at conversion.
    pub horizon_months: usize,
    pub seed: u64,
}

impl CohortSpec {
    /// Desk-scale default: 32^3 grid, 16 ROIs, 200 subjects, strong effect.
    pub fn desk_scale(seed: u64) -> Self {
        let mut group_counts = BTreeMap::new();
        // The pathology test pool (sNC vs sAD+pMCI+pNC) is balanced 75/75 so
        // a class-collapsed classifier scores exactly 0.5 on null cohorts.
        group_counts.insert(Group::StableNc, 75);
        group_counts.insert(Group::StableMci, 50);
        group_counts.insert(Group::ProgressiveNc, 10);
        group_counts.insert(Group::ProgressiveMci, 20);
        group_counts.insert(Group::StableAd, 45);
        let mut effect = BTreeMap::new();
        effect.insert(Group::StableAd, Effect { atrophy: 0.70, hypometabolism: 0.70 });
        effect.insert(Group::ProgressiveMci, Effect { atrophy: 0.70, hypometabolism: 0.70 });
        effect.insert(Group::ProgressiveNc, Effect { atrophy: 0.70, hypometabolism: 0.70 });
        // Mild nuisance signature in ROIs disjoint from the disease set.
        effect.insert(Group::StableMci, Effect { atrophy: 0.92, hypometabolism: 0.92 });
        CohortSpec {
            dims: [32, 32, 32],
            spacing_mm: [1.0, 1.0, 1.0],
            n_rois: 16,
            group_counts,
            effect,
            affected_fraction: 0.25,
            noise_sigma: 0.05,
            scans_per_subject: 2,
            months_between_scans: 12,
            // A long, shallow ramp keeps even the earliest progressive scans
            // well above the noise floor at the default strong effect.
            horizon_months: 120,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("dims", "must be positive"));
        }
        if self.n_rois == 0 {
            return Err(Error::validation("n_rois", "must be positive"));
        }
        for (group, effect) in &self.effect {
            for (name, v) in [("atrophy", effect.atrophy), ("hypometabolism", effect.hypometabolism)] {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::validation(
                        format!("effect.{}.{}", group.tag(), name),
                        format!("must be in (0, 1], got {v}"),
                    ));
                }
            }
        }
        if !(self.affected_fraction > 0.0 && self.affected_fraction <= 1.0) {
            return Err(Error::validation("affected_fraction", "must be in (0, 1]"));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma", "must be >= 0"));
        }
        if self.scans_per_subject == 0 {
            return Err(Error::validation("scans_per_subject", "must be positive"));
        }
        if self.months_between_scans == 0 {
            return Err(Error::validation("months_between_scans", "must be positive"));
        }
        if self.horizon_months == 0 {
            return Err(Error::validation("horizon_months", "must be positive"));
        }
        Ok(())
    }
}

/// One synthetic scan of one subject.
#[derive(Debug, Clone)]
pub struct SubjectScan {
    pub subject_id: String,
    pub group: Group,
    /// Scan time in months from the subject's first scan.
    pub scan_month: usize,
    /// Present exactly for progressive subjects.
    pub months_to_conversion: Option<usize>,
    /// Per-voxel multiplicative volume factor, strictly positive.
    pub expansion: Volume,
    /// Non-negative PET intensities.
    pub pet: Volume,
    pub brainstem_roi_id: usize,
}

impl SubjectScan {
    pub fn scan_id(&self) -> String {
        format!("{}_m{:03}", self.subject_id, self.scan_month)
    }
}

/// Template plus the ROI bookkeeping the generator derived from a spec.
#[derive(Debug, Clone)]
pub struct Template {
    pub roi: RoiAtlas,
    pub brainstem_roi_id: usize,
    pub affected_rois: Vec<usize>,
    pub nuisance_rois: Vec<usize>,
}

fn foreground_mask(dims: [usize; 3]) -> Vec<bool> {
    let [nx, ny, nz] = dims;
    let center = [nx as f64 / 2.0 - 0.5, ny as f64 / 2.0 - 0.5, nz as f64 / 2.0 - 0.5];
    let radii = [nx as f64 * 0.42, ny as f64 * 0.42, nz as f64 * 0.42];
    let mut mask = vec![false; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dx = (x as f64 - center[0]) / radii[0];
                let dy = (y as f64 - center[1]) / radii[1];
                let dz = (z as f64 - center[2]) / radii[2];
                if dx * dx + dy * dy + dz * dz <= 1.0 {
                    mask[x + nx * (y + ny * z)] = true;
                }
            }
        }
    }
    mask
}

/// Build the template ROI atlas: a Voronoi partition of an ellipsoidal
/// foreground seeded by farthest-point sampling. Each cell is the
/// intersection of a convex Voronoi region with the convex foreground, so
/// every ROI is connected. The ROI whose seed sits lowest in z is the
/// brainstem and never carries disease effect.
pub fn make_template(spec: &CohortSpec) -> Result<Template> {
    spec.validate()?;
    let dims = spec.dims;
    let [nx, ny, _] = dims;
    let mask = foreground_mask(dims);
    let foreground: Vec<usize> = mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    if foreground.len() < spec.n_rois {
        return Err(Error::param(
            "n_rois",
            format!("{} exceeds foreground voxel count {}", spec.n_rois, foreground.len()),
        ));
    }
    let coord = |flat: usize| -> [f64; 3] {
        let x = flat % nx;
        let y = (flat / nx) % ny;
        let z = flat / (nx * ny);
        [
            x as f64 * spec.spacing_mm[0] as f64,
            y as f64 * spec.spacing_mm[1] as f64,
            z as f64 * spec.spacing_mm[2] as f64,
        ]
    };

    // Farthest-point seed selection, first seed from the RNG stream.
    let mut rng = stream(spec.seed, &[0x7e3a]);
    let mut seeds = vec![foreground[rng.gen_range(0..foreground.len())]];
    let mut min_d2: Vec<f64> = foreground
        .iter()
        .map(|&f| {
            let (a, b) = (coord(f), coord(seeds[0]));
            (0..3).map(|d| (a[d] - b[d]).powi(2)).sum()
        })
        .collect();
    while seeds.len() < spec.n_rois {
        let (best_idx, _) = min_d2
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| {
                if d > acc.1 {
                    (i, d)
                } else {
                    acc
                }
            });
        let new_seed = foreground[best_idx];
        seeds.push(new_seed);
        for (i, &f) in foreground.iter().enumerate() {
            let (a, b) = (coord(f), coord(new_seed));
            let d: f64 = (0..3).map(|d| (a[d] - b[d]).powi(2)).sum();
            if d < min_d2[i] {
                min_d2[i] = d;
            }
        }
    }

    // Voronoi assignment; lowest seed index wins ties.
    let mut labels = vec![0.0f32; mask.len()];
    for &f in &foreground {
        let p = coord(f);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (s, &seed_flat) in seeds.iter().enumerate() {
            let q = coord(seed_flat);
            let d: f64 = (0..3).map(|d| (p[d] - q[d]).powi(2)).sum();
            if d < best_d {
                best_d = d;
                best = s;
            }
        }
        labels[f] = (best + 1) as f32;
    }
    let volume = Volume::new(dims, spec.spacing_mm, labels)?;
    let roi = RoiAtlas::new(volume, spec.n_rois)?;

    // Brainstem: ROI whose seed has the lowest z (ties: lowest ROI id).
    let brainstem_roi_id = seeds
        .iter()
        .enumerate()
        .min_by_key(|(i, &flat)| (flat / (nx * ny), *i))
        .map(|(i, _)| i + 1)
        .unwrap();

    // Affected and nuisance ROI sets: disjoint, never the brainstem.
    let mut candidates: Vec<usize> = (1..=spec.n_rois).filter(|&r| r != brainstem_roi_id).collect();
    let mut shuffle_rng = stream(spec.seed, &[0xaffe]);
    use rand::seq::SliceRandom;
    candidates.shuffle(&mut shuffle_rng);
    let n_affected = ((spec.affected_fraction * spec.n_rois as f64).round() as usize)
        .max(1)
        .min(candidates.len());
    let affected_rois: Vec<usize> = candidates[..n_affected].to_vec();
    let n_nuisance = n_affected.min(candidates.len() - n_affected);
    let nuisance_rois: Vec<usize> = candidates[n_affected..n_affected + n_nuisance].to_vec();

    Ok(Template {
        roi,
        brainstem_roi_id,
        affected_rois,
        nuisance_rois,
    })
}

/// Linear ramp strength in `[0, 1]` for a scan `months_to_conversion`
/// months before conversion.
pub fn ramp_strength(months_to_conversion: usize, horizon_months: usize) -> f64 {
    (1.0 - months_to_conversion as f64 / horizon_months as f64).clamp(0.0, 1.0)
}

fn subject_effect_rois<'a>(group: Group, template: &'a Template) -> &'a [usize] {
    match group {
        Group::StableMci => &template.nuisance_rois,
        Group::StableNc => &[],
        _ => &template.affected_rois,
    }
}

fn generate_scan(
    spec: &CohortSpec,
    template: &Template,
    subject_id: &str,
    group: Group,
    scan_month: usize,
    months_to_conversion: Option<usize>,
    rng: &mut impl Rng,
) -> Result<SubjectScan> {
    let strength = match group {
        Group::StableNc => 0.0,
        Group::StableMci | Group::StableAd => 1.0,
        Group::ProgressiveNc | Group::ProgressiveMci => {
            ramp_strength(months_to_conversion.unwrap(), spec.horizon_months)
        }
    };
    let effect = spec.effect.get(&group).copied().unwrap_or(Effect::NONE);
    let atrophy_mult = 1.0 - strength * (1.0 - effect.atrophy);
    let hypo_mult = 1.0 - strength * (1.0 - effect.hypometabolism);

    let effect_rois = subject_effect_rois(group, template);
    let roi_vol = template.roi.volume();
    let n = roi_vol.data().len();
    let sigma = spec.noise_sigma;
    // exp(sigma * zeta - sigma^2 / 2) has unit mean: noise is bias-free.
    let log_shift = -0.5 * sigma * sigma;

    let mut expansion = vec![1.0f32; n];
    let mut pet = vec![1.0f32; n];
    for i in 0..n {
        let roi_label = roi_vol.data()[i] as usize;
        let in_effect = roi_label != 0 && effect_rois.contains(&roi_label);
        let exp_base = if in_effect { atrophy_mult } else { 1.0 };
        let pet_base = if in_effect { hypo_mult } else { 1.0 };
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        expansion[i] = (exp_base * (sigma * z1 + log_shift).exp()) as f32;
        pet[i] = (pet_base * (sigma * z2 + log_shift).exp()) as f32;
    }
    Ok(SubjectScan {
        subject_id: subject_id.to_string(),
        group,
        scan_month,
        months_to_conversion,
        expansion: Volume::new(spec.dims, spec.spacing_mm, expansion)?,
        pet: Volume::new(spec.dims, spec.spacing_mm, pet)?,
        brainstem_roi_id: template.brainstem_roi_id,
    })
}

/// Generate every scan of the cohort. Deterministic: each subject derives
/// its own RNG stream from `(seed, subject index)`, so parallel generation
/// order cannot change output.
pub fn sample_cohort(spec: &CohortSpec, template: &Template) -> Result<Vec<SubjectScan>> {
    spec.validate()?;
    // Fixed subject enumeration: groups in declaration order.
    let mut roster: Vec<(String, Group, u64)> = Vec::new();
    let mut global_idx = 0u64;
    for group in Group::ALL {
        let count = spec.group_counts.get(&group).copied().unwrap_or(0);
        for i in 0..count {
            roster.push((format!("{}-{:04}", group.tag(), i), group, global_idx));
            global_idx += 1;
        }
    }

    let scans: Vec<Vec<SubjectScan>> = roster
        .par_iter()
        .map(|(subject_id, group, idx)| {
            let mut rng = stream(spec.seed, &[0xc050, *idx]);
            // Progressive subjects convert at a random month spread over the
            // scan schedule plus three years, so months_to_conversion covers
            // the horizon buckets regardless of the ramp length.
            let conversion_month = if group.is_progressive() {
                let last_scan = (spec.scans_per_subject - 1) * spec.months_between_scans;
                Some(rng.gen_range(6..=(last_scan + 36)))
            } else {
                None
            };
            (0..spec.scans_per_subject)
                .map(|s| {
                    let scan_month = s * spec.months_between_scans;
                    let mtc = conversion_month
                        .map(|c| c.saturating_sub(scan_month));
                    generate_scan(spec, template, subject_id, *group, scan_month, mtc, &mut rng)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(scans.into_iter().flatten().collect())
}

/// Cohort manifest entry for one scan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanRecord {
    pub scan_id: String,
    pub subject_id: String,
    pub group: Group,
    pub scan_month: usize,
    pub months_to_conversion: Option<usize>,
    pub expansion_file: String,
    pub pet_file: String,
}

/// Cohort manifest: everything needed to reload the cohort from disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n_rois: usize,
    pub brainstem_roi_id: usize,
    pub roi_atlas_file: String,
    pub scans: Vec<ScanRecord>,
}

/// Write template and scans under `dir`; returns the manifest.
pub fn write_cohort(
    spec: &CohortSpec,
    template: &Template,
    scans: &[SubjectScan],
    dir: &Path,
) -> Result<CohortManifest> {
    let scan_dir = dir.join("scans");
    std::fs::create_dir_all(&scan_dir).map_err(|e| Error::io(&scan_dir, e))?;
    let roi_file = "template_roi.svol";
    write_volume(template.roi.volume(), &dir.join(roi_file))?;
    let mut records = Vec::with_capacity(scans.len());
    for scan in scans {
        let scan_id = scan.scan_id();
        let expansion_file = format!("scans/{scan_id}_exp.svol");
        let pet_file = format!("scans/{scan_id}_pet.svol");
        write_volume(&scan.expansion, &dir.join(&expansion_file))?;
        write_volume(&scan.pet, &dir.join(&pet_file))?;
        records.push(ScanRecord {
            scan_id,
            subject_id: scan.subject_id.clone(),
            group: scan.group,
            scan_month: scan.scan_month,
            months_to_conversion: scan.months_to_conversion,
            expansion_file,
            pet_file,
        });
    }
    let manifest = CohortManifest {
        seed: spec.seed,
        dims: spec.dims,
        n_rois: spec.n_rois,
        brainstem_roi_id: template.brainstem_roi_id,
        roi_atlas_file: roi_file.to_string(),
        scans: records,
    };
    let path = dir.join("cohort_manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("cohort manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Load the manifest written by [`write_cohort`].
pub fn read_cohort_manifest(dir: &Path) -> Result<CohortManifest> {
    let path = dir.join("cohort_manifest.json");
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json("cohort manifest", e))
}

/// Load one scan's volumes from a manifest record.
pub fn read_scan(dir: &Path, record: &ScanRecord, brainstem_roi_id: usize) -> Result<SubjectScan> {
    Ok(SubjectScan {
        subject_id: record.subject_id.clone(),
        group: record.group,
        scan_month: record.scan_month,
        months_to_conversion: record.months_to_conversion,
        expansion: read_volume(&dir.join(&record.expansion_file))?,
        pet: read_volume(&dir.join(&record.pet_file))?,
        brainstem_roi_id,
    })
}
