//! Subjects, traits, bins, splits and the on-disk dataset container.

mod container;
mod quantize;
mod split;
mod subject;

use std::collections::BTreeSet;

pub use container::{decode, encode, load_dataset, save_dataset, write_traits_csv, MAGIC, VERSION};
pub use quantize::{fit_bins, mean_sd, QuantizationBins, N_BINS};
pub use split::{split_indices, split_sizes, split_subjects, SplitSpec, MIN_SUBJECTS, SPLIT_RATIOS};
pub use subject::{
    concat_runs, Cohort, FrameDims, FrameTensor, NfExperience, Run, SequenceShape, SubjectRecord,
    SubjectSequences, TraitKind, TraitRecord,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub shape: SequenceShape,
    pub cohort: Cohort,
    pub subjects: Vec<SubjectRecord>,
    /// Free-form generator or acquisition metadata carried in the trailer.
    pub provenance: serde_json::Value,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shape;
        if s.dims.voxels() == 0 || s.t_passive == 0 || s.t_active == 0 || s.runs == 0 {
            return Err(Error::Data(format!("empty sequence geometry {s:?}")));
        }
        let mut seen = BTreeSet::new();
        for subj in &self.subjects {
            if !seen.insert(subj.subject_id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {}", subj.subject_id)));
            }
            if subj.cohort != self.cohort {
                return Err(Error::Data(format!(
                    "subject {} is {:?} in a {:?} dataset",
                    subj.subject_id, subj.cohort, self.cohort
                )));
            }
            subj.validate(s)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.subjects.iter().position(|s| s.subject_id == id)
    }

    /// Copy with every subject z-scored by its own passive statistics.
    pub fn normalized(&self) -> Dataset {
        Dataset {
            shape: self.shape,
            cohort: self.cohort,
            subjects: self.subjects.iter().map(SubjectRecord::normalized).collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn sequences(&self) -> Result<Vec<SubjectSequences>> {
        self.subjects.iter().map(|s| concat_runs(s, &self.shape)).collect()
    }
}
