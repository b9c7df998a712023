//! A loaded dataset: every run of a manifest plus the shared mask, with the
//! fold-independent normalization steps cached.

use std::path::Path;

use crate::data::manifest::{DatasetManifest, ManifestRecord};
use crate::data::mask::{read_mask, Mask};
use crate::data::normalize::{demean_and_scale, NormalizationScope, NormalizationStats};
use crate::data::{load_corpus, Label, VolumeSeries};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone)]
pub struct Corpus {
    pub series: Vec<VolumeSeries>,
    pub mask: Mask,
    /// Runs after demeaning and whole-brain scaling.
    scaled: Vec<Tensor<f64>>,
}

impl Corpus {
    pub fn new(series: Vec<VolumeSeries>, mask: Mask) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::Data("corpus has no runs".into()));
        }
        let records = series
            .iter()
            .map(|s| ManifestRecord {
                subject_id: s.subject_id.clone(),
                run_id: s.run_id,
                label: s.label,
                path: Default::default(),
            })
            .collect();
        DatasetManifest::new(records)?;
        let scaled = series
            .iter()
            .map(|s| {
                demean_and_scale(&s.data, &mask)
                    .map_err(|e| Error::Data(format!("subject `{}` run {}: {e}", s.subject_id, s.run_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Corpus { series, mask, scaled })
    }

    pub fn load(manifest_path: &Path, mask_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(manifest_path)?;
        let mask = read_mask(mask_path)?;
        let series = load_corpus(&manifest, &mask)?;
        Self::new(series, mask)
    }

    pub fn grid(&self) -> [usize; 3] {
        self.mask.shape()
    }

    /// Distinct subjects in run order.
    pub fn subjects(&self) -> Vec<(String, Label)> {
        let mut out: Vec<(String, Label)> = Vec::new();
        for s in &self.series {
            if !out.iter().any(|(id, _)| id == &s.subject_id) {
                out.push((s.subject_id.clone(), s.label));
            }
        }
        out
    }

    /// Indices of runs belonging to `subjects`, in corpus order.
    pub fn runs_of(&self, subjects: &[String]) -> Vec<usize> {
        (0..self.series.len())
            .filter(|&i| subjects.iter().any(|s| s == &self.series[i].subject_id))
            .collect()
    }

    /// Step-3 statistics for a scope; `train` lists the training subjects
    /// and is required for [`NormalizationScope::TrainOnly`].
    pub fn stats(&self, scope: NormalizationScope, train: Option<&[String]>) -> Result<NormalizationStats> {
        let runs: Vec<usize> = match (scope, train) {
            (NormalizationScope::AllSubjects, _) => (0..self.series.len()).collect(),
            (NormalizationScope::TrainOnly, Some(t)) => self.runs_of(t),
            (NormalizationScope::TrainOnly, None) => {
                return Err(Error::Config("train-only normalization needs a training set".into()))
            }
        };
        NormalizationStats::compute(runs.iter().map(|&i| &self.scaled[i]), &self.mask, scope)
    }

    /// Every run with all three normalization steps applied.
    pub fn normalized<T: Real>(&self, stats: &NormalizationStats) -> Result<Vec<Tensor<T>>> {
        self.scaled.iter().map(|r| Ok(stats.apply(r, &self.mask)?.cast())).collect()
    }
}
