//! Spatial k-means patch atlases.
//!
//! Each ROI of a template is subdivided into spatially compact patches by
//! Lloyd's algorithm with k-means++ seeding on physical voxel coordinates
//! (index scaled by spacing). The number of patches per ROI at target size
//! `t` is `max(1, round(|roi| / t))`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::volume::{write_volume, RoiAtlas, Volume};

const MAX_ITERS: usize = 300;
const RESTARTS: u64 = 16;

/// Result of one k-means run.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<[f64; 3]>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[inline]
fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn nearest(point: [f64; 3], centroids: &[[f64; 3]]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, &cen) in centroids.iter().enumerate() {
        let d = dist2(point, cen);
        // Lowest index wins on exact ties.
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

fn plus_plus_seed(points: &[[f64; 3]], k: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())]);
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; pick deterministically.
            points[rng.gen_range(0..points.len())]
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                target -= w;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            points[chosen]
        };
        centroids.push(next);
        for (i, &p) in points.iter().enumerate() {
            let d = dist2(p, next);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd_cost(points: &[[f64; 3]], centroids: &[[f64; 3]], assignment: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignment)
        .map(|(&p, &a)| dist2(p, centroids[a]))
        .sum()
}

/// K-means on 3-D points: best of several deterministic k-means++ restarts
/// (seeds derived from `seed`), each run by Lloyd's algorithm with
/// empty-cluster repair and deterministic tie-breaking. Ties between
/// restarts go to the earliest restart index.
pub fn kmeans_points(points: &[[f64; 3]], k: usize, seed: u64) -> Result<KmeansResult> {
    if points.is_empty() {
        return Err(Error::param("coords", "must be non-empty"));
    }
    if k == 0 || k > points.len() {
        return Err(Error::param(
            "k",
            format!("must be in [1, {}], got {}", points.len(), k),
        ));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..RESTARTS {
        let run = lloyd_run(points, k, seed, restart)?;
        if best.as_ref().map_or(true, |b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn lloyd_run(points: &[[f64; 3]], k: usize, seed: u64, restart: u64) -> Result<KmeansResult> {
    let mut rng = stream(seed, &[0x6b6d, points.len() as u64, k as u64, restart]);
    let mut centroids = plus_plus_seed(points, k, &mut rng);
    let mut assignment = vec![usize::MAX; points.len()];
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..MAX_ITERS {
        iterations = iter + 1;
        // Assignment step.
        let mut changed = false;
        for (i, &p) in points.iter().enumerate() {
            let (c, _) = nearest(p, &centroids);
            if assignment[i] != c {
                assignment[i] = c;
                changed = true;
            }
        }
        // Empty-cluster repair: move the point farthest from its centroid.
        loop {
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else { break };
            let (far_idx, _) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[assignment[*i]] > 1)
                .map(|(i, &p)| (i, dist2(p, centroids[assignment[i]])))
                .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, d)| {
                    if d > acc.1 {
                        (i, d)
                    } else {
                        acc
                    }
                });
            assignment[far_idx] = empty;
            centroids[empty] = points[far_idx];
            changed = true;
        }
        if !changed && iter > 0 {
            converged = true;
            break;
        }
        // Update step.
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            let a = assignment[i];
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            sums[a][2] += p[2];
            counts[a] += 1;
        }
        for c in 0..k {
            let n = counts[c] as f64;
            centroids[c] = [sums[c][0] / n, sums[c][1] / n, sums[c][2] / n];
        }
    }

    let cost = lloyd_cost(points, &centroids, &assignment);
    Ok(KmeansResult {
        assignment,
        centroids,
        cost,
        iterations,
        converged,
    })
}

/// K-means on integer voxel coordinates, clustering in index space with
/// unit spacing. Used where no physical spacing applies.
pub fn kmeans_spatial(coords: &[[i64; 3]], k: usize, seed: u64) -> Result<KmeansResult> {
    let points: Vec<[f64; 3]> = coords
        .iter()
        .map(|&[x, y, z]| [x as f64, y as f64, z as f64])
        .collect();
    for i in 0..coords.len() {
        for j in (i + 1)..coords.len() {
            if coords[i] == coords[j] {
                return Err(Error::param("coords", format!("duplicate coordinate {:?}", coords[i])));
            }
        }
    }
    kmeans_points(&points, k, seed)
}

/// Patch count rule for one ROI.
pub fn patch_count(roi_voxels: usize, target: usize) -> usize {
    ((roi_voxels as f64 / target as f64).round() as usize).max(1)
}

/// One scale of a patch atlas.
#[derive(Debug, Clone)]
pub struct ScaleAtlas {
    pub target_voxels: usize,
    /// Patch ids as a label volume; 0 = background, ids contiguous 1..=n_patches.
    pub label_map: Volume,
    pub n_patches: usize,
    /// patch id -> ROI id
    pub patch_to_roi: BTreeMap<usize, usize>,
}

/// Per-scale patch assignment of every ROI voxel.
#[derive(Debug, Clone)]
pub struct PatchAtlas {
    pub scales: Vec<ScaleAtlas>,
}

impl PatchAtlas {
    pub fn scale(&self, idx: usize) -> &ScaleAtlas {
        &self.scales[idx]
    }
}

/// Subdivide every ROI at every target scale via spatial k-means.
///
/// Clustering runs per ROI on physical coordinates (index * spacing);
/// per-ROI jobs are independent and merged in ROI order, so parallel
/// execution cannot change the result.
pub fn build_patch_atlas(roi: &RoiAtlas, targets: &[usize], seed: u64) -> Result<PatchAtlas> {
    if targets.is_empty() {
        return Err(Error::param("targets", "must be non-empty"));
    }
    if let Some(&t) = targets.iter().find(|&&t| t == 0) {
        return Err(Error::param("targets", format!("target {t} must be >= 1")));
    }
    let vol = roi.volume();
    let dims = vol.dims();
    let spacing = vol.spacing_mm();
    let n = dims[0] * dims[1] * dims[2];

    // Per-ROI voxel indices in storage order.
    let mut roi_voxels: Vec<Vec<usize>> = vec![Vec::new(); roi.n_rois() + 1];
    for (flat, &v) in vol.data().iter().enumerate() {
        let label = v as usize;
        if label > 0 {
            roi_voxels[label].push(flat);
        }
    }

    let mut scales = Vec::with_capacity(targets.len());
    for (scale_idx, &target) in targets.iter().enumerate() {
        let per_roi: Vec<(usize, Vec<usize>)> = (1..=roi.n_rois())
            .into_par_iter()
            .map(|roi_id| {
                let flats = &roi_voxels[roi_id];
                let points: Vec<[f64; 3]> = flats
                    .iter()
                    .map(|&flat| {
                        let x = flat % dims[0];
                        let y = (flat / dims[0]) % dims[1];
                        let z = flat / (dims[0] * dims[1]);
                        [
                            x as f64 * spacing[0] as f64,
                            y as f64 * spacing[1] as f64,
                            z as f64 * spacing[2] as f64,
                        ]
                    })
                    .collect();
                let k = patch_count(points.len(), target);
                let result =
                    kmeans_points(&points, k, seed ^ (scale_idx as u64) << 32 ^ (roi_id as u64) << 8)?;
                Ok((k, result.assignment))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut labels = vec![0.0f32; n];
        let mut patch_to_roi = BTreeMap::new();
        let mut next_patch = 1usize;
        for (roi_id, (k, assignment)) in per_roi.iter().enumerate().map(|(i, r)| (i + 1, r)) {
            let base = next_patch;
            for (&flat, &cluster) in roi_voxels[roi_id].iter().zip(assignment) {
                labels[flat] = (base + cluster) as f32;
            }
            for c in 0..*k {
                patch_to_roi.insert(base + c, roi_id);
            }
            next_patch += k;
        }
        let n_patches = next_patch - 1;
        let label_map = Volume::new(dims, spacing, labels)?;
        scales.push(ScaleAtlas {
            target_voxels: target,
            label_map,
            n_patches,
            patch_to_roi,
        });
    }
    Ok(PatchAtlas { scales })
}

/// JSON sidecar for one serialized scale.
#[derive(Debug, Serialize, Deserialize)]
pub struct ScaleSidecar {
    pub target: usize,
    pub n_patches: usize,
    pub patch_to_roi: BTreeMap<usize, usize>,
}

/// Write one `.svol` label map plus JSON sidecar per scale into `dir`.
/// Returns the file stems, one per scale.
pub fn write_patch_atlas(atlas: &PatchAtlas, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems = Vec::new();
    for scale in &atlas.scales {
        let stem = format!("patch_{}", scale.target_voxels);
        write_volume(&scale.label_map, &dir.join(format!("{stem}.svol")))?;
        let sidecar = ScaleSidecar {
            target: scale.target_voxels,
            n_patches: scale.n_patches,
            patch_to_roi: scale.patch_to_roi.clone(),
        };
        let json_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&sidecar)
            .map_err(|e| Error::json("atlas sidecar", e))?;
        std::fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
        stems.push(stem);
    }
    Ok(stems)
}

/// Load an atlas previously written by [`write_patch_atlas`].
pub fn read_patch_atlas(dir: &Path, targets: &[usize]) -> Result<PatchAtlas> {
    let mut scales = Vec::new();
    for &target in targets {
        let stem = format!("patch_{target}");
        let svol = dir.join(format!("{stem}.svol"));
        let json = dir.join(format!("{stem}.json"));
        if !svol.exists() {
            return Err(Error::MissingArtifact(svol));
        }
        if !json.exists() {
            return Err(Error::MissingArtifact(json));
        }
        let label_map = crate::volume::read_volume(&svol)?;
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: ScaleSidecar =
            serde_json::from_str(&text).map_err(|e| Error::json("atlas sidecar", e))?;
        scales.push(ScaleAtlas {
            target_voxels: sidecar.target,
            label_map,
            n_patches: sidecar.n_patches,
            patch_to_roi: sidecar.patch_to_roi,
        });
    }
    Ok(PatchAtlas { scales })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force optimal k-partition cost by exhaustive assignment search.
    /// Independent oracle: enumerates all k^n assignments with non-empty
    /// clusters and evaluates the centroid cost directly.
    pub fn brute_force_cost(points: &[[f64; 3]], k: usize) -> f64 {
        let n = points.len();
        assert!(n <= 14 && k <= 3);
        let mut best = f64::INFINITY;
        let total = (k as u64).pow(n as u32);
        for code in 0..total {
            let mut assignment = Vec::with_capacity(n);
            let mut c = code;
            for _ in 0..n {
                assignment.push((c % k as u64) as usize);
                c /= k as u64;
            }
            let mut counts = vec![0usize; k];
            for &a in &assignment {
                counts[a] += 1;
            }
            if counts.iter().any(|&c| c == 0) {
                continue;
            }
            let mut sums = vec![[0.0f64; 3]; k];
            for (i, &p) in points.iter().enumerate() {
                for d in 0..3 {
                    sums[assignment[i]][d] += p[d];
                }
            }
            let centroids: Vec<[f64; 3]> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
                .collect();
            let cost = lloyd_cost(points, &centroids, &assignment);
            if cost < best {
                best = cost;
            }
        }
        best
    }

    /// One extra Lloyd iteration changes nothing (local optimality check).
    pub fn is_lloyd_stable(points: &[[f64; 3]], result: &KmeansResult) -> bool {
        let k = result.centroids.len();
        let mut sums = vec![[0.0f64; 3]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in points.iter().enumerate() {
            let a = result.assignment[i];
            for d in 0..3 {
                sums[a][d] += p[d];
            }
            counts[a] += 1;
        }
        let centroids: Vec<[f64; 3]> = sums
            .iter()
            .zip(&counts)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64, s[2] / c as f64])
            .collect();
        points
            .iter()
            .enumerate()
            .all(|(i, &p)| nearest(p, &centroids).0 == result.assignment[i])
    }

    #[test]
    fn k1_all_zero() {
        let coords = [[0i64, 0, 0], [3, 1, 2], [5, 5, 5]];
        let r = kmeans_spatial(&coords, 1, 9).unwrap();
        assert!(r.assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn two_well_separated_pairs() {
        let coords = [[0i64, 0, 0], [1, 0, 0], [10, 0, 0], [11, 0, 0]];
        let r = kmeans_spatial(&coords, 2, 123).unwrap();
        assert_eq!(r.assignment[0], r.assignment[1]);
        assert_eq!(r.assignment[2], r.assignment[3]);
        assert_ne!(r.assignment[0], r.assignment[2]);
        // Matches brute-force optimum: the pair split.
        let points: Vec<[f64; 3]> = coords.iter().map(|&[x, y, z]| [x as f64, y as f64, z as f64]).collect();
        let oracle = brute_force_cost(&points, 2);
        assert!((r.cost - oracle).abs() < 1e-9, "cost {} vs oracle {}", r.cost, oracle);
    }

    #[test]
    fn k_equals_n_zero_cost() {
        let coords = [[0i64, 0, 0], [2, 0, 0], [0, 3, 0], [0, 0, 4]];
        let r = kmeans_spatial(&coords, 4, 7).unwrap();
        let mut seen: Vec<usize> = r.assignment.clone();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 1, 2, 3]);
        assert!(r.cost < 1e-12);
    }

    #[test]
    fn parameter_errors() {
        assert!(kmeans_spatial(&[], 1, 0).is_err());
        assert!(kmeans_spatial(&[[0, 0, 0]], 2, 0).is_err());
        assert!(kmeans_spatial(&[[0, 0, 0], [0, 0, 0]], 1, 0).is_err());
    }

    #[test]
    fn determinism() {
        let coords: Vec<[i64; 3]> = (0..30).map(|i| [i % 5, (i / 5) % 3, i / 15]).collect();
        let a = kmeans_spatial(&coords, 4, 55).unwrap();
        let b = kmeans_spatial(&coords, 4, 55).unwrap();
        assert_eq!(a.assignment, b.assignment);
    }

    fn cube_roi(side: usize, n_rois: usize) -> RoiAtlas {
        // Split a cube into n_rois equal slabs along z.
        let n = side * side * side;
        let mut data = vec![0.0f32; n];
        for z in 0..side {
            let label = (z * n_rois / side) + 1;
            for y in 0..side {
                for x in 0..side {
                    data[x + side * (y + side * z)] = label as f32;
                }
            }
        }
        RoiAtlas::new(Volume::new([side, side, side], [1.0, 1.0, 1.0], data).unwrap(), n_rois)
            .unwrap()
    }

    #[test]
    fn atlas_count_formula_and_containment() {
        let roi = cube_roi(10, 1); // one ROI of 1000 voxels
        let atlas = build_patch_atlas(&roi, &[500], 3).unwrap();
        let scale = atlas.scale(0);
        assert_eq!(scale.n_patches, 2);
        // Rough balance: each patch near 500 voxels.
        let mut counts = std::collections::HashMap::new();
        for &v in scale.label_map.data() {
            if v > 0.0 {
                *counts.entry(v as usize).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 2);
        for (_, c) in counts {
            assert!((300..=700).contains(&c), "patch size {c} far from target");
        }
    }

    #[test]
    fn atlas_target_larger_than_rois() {
        let roi = cube_roi(6, 3); // ROIs of 72 voxels each
        let atlas = build_patch_atlas(&roi, &[10_000], 3).unwrap();
        assert_eq!(atlas.scale(0).n_patches, roi.n_rois());
        for (patch, roi_id) in &atlas.scale(0).patch_to_roi {
            assert_eq!(*patch, *roi_id);
        }
    }

    #[test]
    fn atlas_invariants_hold() {
        let roi = cube_roi(8, 4);
        let atlas = build_patch_atlas(&roi, &[64, 128], 11).unwrap();
        for scale in &atlas.scales {
            // Every ROI voxel carries a patch id; background stays 0; patch within one ROI.
            let mut seen = vec![false; scale.n_patches + 1];
            for (flat, &p) in scale.label_map.data().iter().enumerate() {
                let patch = p as usize;
                let roi_label = roi.label_at_index(flat);
                if roi_label == 0 {
                    assert_eq!(patch, 0);
                } else {
                    assert!(patch >= 1 && patch <= scale.n_patches);
                    assert_eq!(scale.patch_to_roi[&patch], roi_label);
                    seen[patch] = true;
                }
            }
            assert!(seen[1..].iter().all(|&s| s), "patch ids contiguous and non-empty");
            // Count formula.
            let expected: usize = (1..=roi.n_rois())
                .map(|r| patch_count(roi.roi_indices(r).len(), scale.target_voxels))
                .sum();
            assert_eq!(scale.n_patches, expected);
        }
    }

    #[test]
    fn atlas_deterministic() {
        let roi = cube_roi(8, 4);
        let a = build_patch_atlas(&roi, &[100], 21).unwrap();
        let b = build_patch_atlas(&roi, &[100], 21).unwrap();
        assert_eq!(a.scale(0).label_map.data(), b.scale(0).label_map.data());
    }

    #[test]
    fn lloyd_stability_at_convergence() {
        let coords: Vec<[i64; 3]> = (0..24).map(|i| [i % 4, (i / 4) % 3, i / 12]).collect();
        let points: Vec<[f64; 3]> =
            coords.iter().map(|&[x, y, z]| [x as f64, y as f64, z as f64]).collect();
        let r = kmeans_points(&points, 3, 99).unwrap();
        assert!(r.converged);
        assert!(is_lloyd_stable(&points, &r));
    }

    #[test]
    fn small_instances_match_brute_force_or_stable() {
        use rand::Rng;
        let mut optimal = 0;
        let mut total = 0;
        for trial in 0..30u64 {
            let mut rng = stream(trial, &[0xabc]);
            let n = rng.gen_range(4..=10);
            let k = rng.gen_range(2..=3.min(n));
            let mut coords = Vec::new();
            while coords.len() < n {
                let c = [
                    rng.gen_range(0..6) as i64,
                    rng.gen_range(0..6) as i64,
                    rng.gen_range(0..6) as i64,
                ];
                if !coords.contains(&c) {
                    coords.push(c);
                }
            }
            let points: Vec<[f64; 3]> =
                coords.iter().map(|&[x, y, z]| [x as f64, y as f64, z as f64]).collect();
            let r = kmeans_points(&points, k, trial).unwrap();
            let oracle = brute_force_cost(&points, k);
            total += 1;
            if r.cost <= oracle + 1e-9 {
                optimal += 1;
            } else {
                assert!(is_lloyd_stable(&points, &r), "non-optimal run must be a local optimum");
            }
        }
        assert!(optimal * 10 >= total * 8, "only {optimal}/{total} optimal");
    }

    #[test]
    fn atlas_io_roundtrip() {
        let roi = cube_roi(6, 2);
        let atlas = build_patch_atlas(&roi, &[50, 100], 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_patch_atlas(&atlas, dir.path()).unwrap();
        let back = read_patch_atlas(dir.path(), &[50, 100]).unwrap();
        for (a, b) in atlas.scales.iter().zip(&back.scales) {
            assert_eq!(a.label_map.data(), b.label_map.data());
            assert_eq!(a.n_patches, b.n_patches);
            assert_eq!(a.patch_to_roi, b.patch_to_roi);
        }
    }
}
