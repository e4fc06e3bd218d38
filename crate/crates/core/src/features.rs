//! Patch-wise feature extraction.
//!
//! Per scan and per scale: patch volume (sum of expansion times voxel
//! volume) as the atrophy feature, and brainstem-normalized mean PET
//! intensity per patch as the metabolism feature.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas::PatchAtlas;
use crate::cohort::{Group, SubjectScan};
use crate::error::{Error, Result};
use crate::volume::{RoiAtlas, Volume};

/// Feature vectors of one scan at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub subject_id: String,
    pub scan_id: String,
    pub group: Group,
    pub months_to_conversion: Option<usize>,
    /// Per scale: patch volumes in mm^3, indexed by patch id - 1.
    pub vol_features: Vec<Vec<f32>>,
    /// Per scale: mean normalized PET per patch, indexed by patch id - 1.
    pub pet_features: Vec<Vec<f32>>,
}

/// Divide PET voxel-wise by the mean intensity over the brainstem ROI.
pub fn normalize_pet(pet: &Volume, roi: &RoiAtlas, brainstem_roi_id: usize) -> Result<Volume> {
    if pet.dims() != roi.volume().dims() {
        return Err(Error::validation(
            "pet.dims",
            format!("{:?} vs atlas {:?}", pet.dims(), roi.volume().dims()),
        ));
    }
    let idxs = roi.roi_indices(brainstem_roi_id);
    if idxs.is_empty() {
        return Err(Error::Normalization(format!(
            "brainstem ROI {brainstem_roi_id} is empty"
        )));
    }
    let mean: f64 =
        idxs.iter().map(|&i| pet.data()[i] as f64).sum::<f64>() / idxs.len() as f64;
    if !(mean > 0.0) || !mean.is_finite() {
        return Err(Error::Normalization(format!(
            "brainstem mean intensity {mean} must be positive"
        )));
    }
    let data: Vec<f32> = pet.data().iter().map(|&v| (v as f64 / mean) as f32).collect();
    Volume::new(pet.dims(), pet.spacing_mm(), data)
}

/// Extract per-scale volume and PET feature vectors for one scan.
pub fn extract_features(
    scan: &SubjectScan,
    atlas: &PatchAtlas,
    roi: &RoiAtlas,
) -> Result<FeatureSet> {
    let dims = roi.volume().dims();
    if scan.expansion.dims() != dims || scan.pet.dims() != dims {
        return Err(Error::validation(
            "scan.dims",
            format!(
                "expansion {:?} / pet {:?} vs template {:?}",
                scan.expansion.dims(),
                scan.pet.dims(),
                dims
            ),
        ));
    }
    let normalized = normalize_pet(&scan.pet, roi, scan.brainstem_roi_id)?;
    let voxel_volume = scan.expansion.voxel_volume_mm3();

    let mut vol_features = Vec::with_capacity(atlas.scales.len());
    let mut pet_features = Vec::with_capacity(atlas.scales.len());
    for scale in &atlas.scales {
        if scale.label_map.dims() != dims {
            return Err(Error::validation(
                "atlas.dims",
                format!("{:?} vs template {:?}", scale.label_map.dims(), dims),
            ));
        }
        let n = scale.n_patches;
        let mut vol_sum = vec![0.0f64; n];
        let mut pet_sum = vec![0.0f64; n];
        let mut counts = vec![0usize; n];
        for (i, &p) in scale.label_map.data().iter().enumerate() {
            let patch = p as usize;
            if patch == 0 {
                continue;
            }
            vol_sum[patch - 1] += scan.expansion.data()[i] as f64 * voxel_volume;
            pet_sum[patch - 1] += normalized.data()[i] as f64;
            counts[patch - 1] += 1;
        }
        vol_features.push(vol_sum.iter().map(|&v| v as f32).collect());
        pet_features.push(
            pet_sum
                .iter()
                .zip(&counts)
                .map(|(&s, &c)| (s / c as f64) as f32)
                .collect(),
        );
    }
    Ok(FeatureSet {
        subject_id: scan.subject_id.clone(),
        scan_id: scan.scan_id(),
        group: scan.group,
        months_to_conversion: scan.months_to_conversion,
        vol_features,
        pet_features,
    })
}

/// All featurized scans of a cohort plus the per-scale patch counts.
#[derive(Debug, Clone)]
pub struct CohortFeatures {
    pub scans: Vec<FeatureSet>,
    pub patch_counts: Vec<usize>,
    pub scale_targets: Vec<usize>,
}

impl CohortFeatures {
    pub fn from_scans(
        scans: &[SubjectScan],
        atlas: &PatchAtlas,
        roi: &RoiAtlas,
    ) -> Result<Self> {
        use rayon::prelude::*;
        let features: Vec<FeatureSet> = scans
            .par_iter()
            .map(|s| extract_features(s, atlas, roi))
            .collect::<Result<Vec<_>>>()?;
        Ok(CohortFeatures {
            scans: features,
            patch_counts: atlas.scales.iter().map(|s| s.n_patches).collect(),
            scale_targets: atlas.scales.iter().map(|s| s.target_voxels).collect(),
        })
    }

    pub fn n_scales(&self) -> usize {
        self.patch_counts.len()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureManifest {
    pub scale_targets: Vec<usize>,
    pub patch_counts: Vec<usize>,
    /// scale target -> modality -> file name
    pub files: BTreeMap<usize, BTreeMap<String, String>>,
}

fn write_feature_csv(
    path: &Path,
    scans: &[FeatureSet],
    scale_idx: usize,
    modality: &str,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let n = match modality {
        "vol" => scans[0].vol_features[scale_idx].len(),
        _ => scans[0].pet_features[scale_idx].len(),
    };
    let mut header = String::from("scan_id,subject_id,group,months_to_conversion");
    for p in 1..=n {
        header.push_str(&format!(",p{p}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for scan in scans {
        let mtc = scan
            .months_to_conversion
            .map(|m| m.to_string())
            .unwrap_or_default();
        let mut line = format!(
            "{},{},{},{}",
            scan.scan_id,
            scan.subject_id,
            scan.group.tag(),
            mtc
        );
        let values = match modality {
            "vol" => &scan.vol_features[scale_idx],
            _ => &scan.pet_features[scale_idx],
        };
        for &v in values {
            // Shortest round-trip float formatting keeps the CSV bit-faithful.
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write one CSV per scale per modality plus a JSON manifest into `dir`.
pub fn write_features(features: &CohortFeatures, dir: &Path) -> Result<FeatureManifest> {
    if features.scans.is_empty() {
        return Err(Error::validation("scans", "no featurized scans to write"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (scale_idx, &target) in features.scale_targets.iter().enumerate() {
        let mut per_modality = BTreeMap::new();
        for modality in ["vol", "pet"] {
            let name = format!("features_{target}_{modality}.csv");
            write_feature_csv(&dir.join(&name), &features.scans, scale_idx, modality)?;
            per_modality.insert(modality.to_string(), name);
        }
        files.insert(target, per_modality);
    }
    let manifest = FeatureManifest {
        scale_targets: features.scale_targets.clone(),
        patch_counts: features.patch_counts.clone(),
        files,
    };
    let path = dir.join("features_manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("feature manifest", e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn parse_group(tag: &str) -> Result<Group> {
    Group::ALL
        .into_iter()
        .find(|g| g.tag() == tag)
        .ok_or_else(|| Error::validation("group", format!("unknown group tag {tag:?}")))
}

/// Read back the CSVs written by [`write_features`].
pub fn read_features(dir: &Path) -> Result<CohortFeatures> {
    let manifest_path = dir.join("features_manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(manifest_path));
    }
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: FeatureManifest =
        serde_json::from_str(&text).map_err(|e| Error::json("feature manifest", e))?;

    let mut scans: Vec<FeatureSet> = Vec::new();
    for (scale_idx, &target) in manifest.scale_targets.iter().enumerate() {
        for modality in ["vol", "pet"] {
            let name = &manifest.files[&target][modality];
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            let content = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (row, line) in content.lines().skip(1).enumerate() {
                let mut parts = line.split(',');
                let scan_id = parts.next().unwrap_or_default().to_string();
                let subject_id = parts.next().unwrap_or_default().to_string();
                let group = parse_group(parts.next().unwrap_or_default())?;
                let mtc_raw = parts.next().unwrap_or_default();
                let months_to_conversion = if mtc_raw.is_empty() {
                    None
                } else {
                    Some(mtc_raw.parse::<usize>().map_err(|e| {
                        Error::validation("months_to_conversion", e.to_string())
                    })?)
                };
                let values: Vec<f32> = parts
                    .map(|p| p.parse::<f32>().map_err(|e| Error::validation("feature", e.to_string())))
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != manifest.patch_counts[scale_idx] {
                    return Err(Error::validation(
                        "feature row",
                        format!(
                            "{} values vs {} patches in {name} row {row}",
                            values.len(),
                            manifest.patch_counts[scale_idx]
                        ),
                    ));
                }
                if scale_idx == 0 && modality == "vol" {
                    scans.push(FeatureSet {
                        subject_id,
                        scan_id: scan_id.clone(),
                        group,
                        months_to_conversion,
                        vol_features: vec![Vec::new(); manifest.scale_targets.len()],
                        pet_features: vec![Vec::new(); manifest.scale_targets.len()],
                    });
                }
                let entry = scans
                    .iter_mut()
                    .find(|s| s.scan_id == scan_id)
                    .ok_or_else(|| {
                        Error::validation("scan_id", format!("{scan_id} missing from first file"))
                    })?;
                if modality == "vol" {
                    entry.vol_features[scale_idx] = values;
                } else {
                    entry.pet_features[scale_idx] = values;
                }
            }
        }
    }
    Ok(CohortFeatures {
        scans,
        patch_counts: manifest.patch_counts,
        scale_targets: manifest.scale_targets,
    })
}
