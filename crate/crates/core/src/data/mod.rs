//! Volume ingestion, masking, normalization, windowing and supervoxels.

pub mod manifest;
pub mod mask;
pub mod nifti;
pub mod normalize;
pub mod rawvol;
pub mod supervoxel;
pub mod windows;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use manifest::{DatasetManifest, ManifestRecord};
pub use mask::{read_mask, write_mask, Mask};
pub use nifti::{read_nifti1, NiftiVolume};
pub use normalize::{demean_and_scale, normalize_corpus, normalize_three_step, NormalizationScope, NormalizationStats};
pub use rawvol::{read_rawvol, write_rawvol};
pub use supervoxel::{downsample_supervoxels, flatten_baseline_features, SupervoxelLayout};
pub use windows::{enumerate_windows, window_count};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Diagnostic group. Patients are the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Control = 0,
    Patient = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Control),
            1 => Ok(Label::Patient),
            _ => Err(Error::Data(format!("label {i} is not 0 or 1"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Control => "control",
            Label::Patient => "patient",
        })
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0" => Ok(Label::Control),
            "1" => Ok(Label::Patient),
            _ => Err(Error::Data(format!("label `{s}` is not 0 or 1"))),
        }
    }
}

/// One subject/run as a `(T, X, Y, Z)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeSeries {
    pub subject_id: String,
    pub run_id: u32,
    pub label: Label,
    pub data: Tensor<f32>,
    pub voxel_mm: Option<[f32; 3]>,
}

impl VolumeSeries {
    pub fn frames(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Reads a volume file, choosing NIfTI-1 for `.nii` and `VOL4` otherwise.
pub fn read_volume(path: &Path) -> Result<(Tensor<f32>, Option<[f32; 3]>)> {
    if path.extension().is_some_and(|e| e == "nii") {
        let v = read_nifti1(path)?;
        Ok((v.data, Some(v.voxel_mm)))
    } else {
        Ok((read_rawvol(path)?, None))
    }
}

pub fn load_series(record: &ManifestRecord) -> Result<VolumeSeries> {
    let (data, voxel_mm) = read_volume(&record.path)?;
    Ok(VolumeSeries {
        subject_id: record.subject_id.clone(),
        run_id: record.run_id,
        label: record.label,
        data,
        voxel_mm,
    })
}

/// Loads every run of a manifest and checks that all grids agree with the
/// mask.
pub fn load_corpus(manifest: &DatasetManifest, mask: &Mask) -> Result<Vec<VolumeSeries>> {
    manifest
        .records
        .iter()
        .map(|r| {
            let s = load_series(r)?;
            mask.check_series(&s.data)
                .map_err(|e| Error::Data(format!("{}: {e}", r.path.display())))?;
            Ok(s)
        })
        .collect()
}
