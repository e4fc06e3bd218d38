//! Volumetric data model and the `.svol` file format.
//!
//! A `.svol` file is one UTF-8 JSON header line
//! `{"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"dtype":"f32"}` terminated by
//! `'\n'`, followed by `nx*ny*nz` little-endian IEEE-754 `f32` values in
//! x-fastest order. Round-trips are bit-exact regardless of host endianness.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 3-D scalar grid with voxel spacing, stored x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing_mm: [f32; 3],
    data: Vec<f32>,
}

impl Volume {
    /// Build a volume, validating every invariant.
    pub fn new(dims: [usize; 3], spacing_mm: [f32; 3], data: Vec<f32>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::validation("dims", format!("must be positive, got {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(
                "spacing",
                format!("must be strictly positive and finite, got {spacing_mm:?}"),
            ));
        }
        let n = dims[0] * dims[1] * dims[2];
        if data.len() != n {
            return Err(Error::validation(
                "data",
                format!("length {} does not match dims product {}", data.len(), n),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "data",
                format!("non-finite value {} at flat index {}", data[i], i),
            ));
        }
        Ok(Volume { dims, spacing_mm, data })
    }

    /// Constant-valued volume.
    pub fn filled(dims: [usize; 3], spacing_mm: [f32; 3], value: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing_mm, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing_mm(&self) -> [f32; 3] {
        self.spacing_mm
    }

    /// Physical volume of one voxel in mm^3.
    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing_mm.iter().map(|&s| s as f64).product()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Iterate `(x, y, z, value)` in storage order.
    pub fn iter_voxels(&self) -> impl Iterator<Item = ([usize; 3], f32)> + '_ {
        let [nx, ny, _] = self.dims;
        self.data.iter().enumerate().map(move |(i, &v)| {
            let x = i % nx;
            let y = (i / nx) % ny;
            let z = i / (nx * ny);
            ([x, y, z], v)
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SvolHeader {
    dims: [usize; 3],
    spacing: [f32; 3],
    dtype: String,
}

/// Write a volume to `path` in `.svol` format.
pub fn write_volume(vol: &Volume, path: &Path) -> Result<()> {
    // Re-validate: a Volume mutated through data_mut could have gone non-finite.
    Volume::new(vol.dims, vol.spacing_mm, vol.data.clone())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = SvolHeader {
        dims: vol.dims,
        spacing: vol.spacing_mm,
        dtype: "f32".to_string(),
    };
    let mut line = serde_json::to_string(&header).map_err(|e| Error::json("svol header", e))?;
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for &v in &vol.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a `.svol` file, validating header, payload length, and finiteness.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut line = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
                if line.len() > 4096 {
                    return Err(Error::MalformedHeader {
                        path: path.to_path_buf(),
                        reason: "header line exceeds 4096 bytes".into(),
                    });
                }
            }
            Err(e) => {
                return Err(Error::MalformedHeader {
                    path: path.to_path_buf(),
                    reason: format!("unterminated header: {e}"),
                })
            }
        }
    }
    let header: SvolHeader =
        serde_json::from_slice(&line).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if header.dtype != "f32" {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!("unsupported dtype {:?}", header.dtype),
        });
    }
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::validation("dims", format!("must be positive, got {:?}", header.dims)));
    }
    let n = header.dims[0] * header.dims[1] * header.dims[2];
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    if payload.len() != n * 4 {
        return Err(Error::PayloadLength {
            path: path.to_path_buf(),
            expected: n,
            actual: payload.len() / 4,
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, data)
}

/// An ROI label map: integer labels in `[0, n_rois]` stored as reals,
/// 0 meaning background, every label in `[1, n_rois]` present.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiAtlas {
    volume: Volume,
    n_rois: usize,
}

impl RoiAtlas {
    pub fn new(volume: Volume, n_rois: usize) -> Result<Self> {
        if n_rois == 0 {
            return Err(Error::validation("n_rois", "must be positive"));
        }
        let mut seen = vec![false; n_rois + 1];
        for (i, &v) in volume.data().iter().enumerate() {
            let label = v as i64;
            if v != label as f32 || label < 0 || label as usize > n_rois {
                return Err(Error::validation(
                    "labels",
                    format!("value {v} at flat index {i} is not an integer in [0, {n_rois}]"),
                ));
            }
            seen[label as usize] = true;
        }
        if let Some(missing) = (1..=n_rois).find(|&l| !seen[l]) {
            return Err(Error::validation("labels", format!("label {missing} never occurs")));
        }
        Ok(RoiAtlas { volume, n_rois })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn n_rois(&self) -> usize {
        self.n_rois
    }

    #[inline]
    pub fn label_at_index(&self, flat: usize) -> usize {
        self.volume.data()[flat] as usize
    }

    /// Flat indices of all voxels carrying `label`.
    pub fn roi_indices(&self, label: usize) -> Vec<usize> {
        self.volume
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v as usize == label)
            .map(|(i, _)| i)
            .collect()
    }
}
