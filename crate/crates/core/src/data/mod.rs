//! Case ingestion, augmentation, fold construction and synthetic data.

pub mod augment;
pub mod folds;
pub mod image;
pub mod records;
pub mod synth;

use std::path::{Path, PathBuf};

use crate::birads::{encode_case, DescriptorVocabulary, LesionDescriptorSet};
use crate::error::Result;
use crate::tensor::Tensor;

pub use augment::AugmentationPolicy;
pub use folds::{stratified_kfold, FoldPlan};
pub use records::{load_metadata_csv, write_metadata_csv, CaseRecord};
pub use synth::{synth_generate, SynthConfig};

/// A loaded case: both views at their stored resolution.
#[derive(Clone, Debug)]
pub struct Case {
    pub id: String,
    pub cc: Tensor,
    pub mlo: Tensor,
    pub lesions: Vec<Vec<String>>,
    pub label: u8,
}

impl Case {
    pub fn descriptors(&self, vocab: &DescriptorVocabulary, length: usize) -> Result<LesionDescriptorSet> {
        encode_case(&self.lesions, vocab, length)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub cases: Vec<Case>,
}

impl Dataset {
    pub const METADATA_FILE: &'static str = "metadata.csv";

    /// Loads `metadata.csv` under `dir`; relative image paths resolve against `dir`.
    pub fn load(dir: &Path, vocab: &DescriptorVocabulary) -> Result<Dataset> {
        let records = load_metadata_csv(&dir.join(Self::METADATA_FILE), vocab)?;
        Self::from_records(dir, &records)
    }

    pub fn from_records(root: &Path, records: &[CaseRecord]) -> Result<Dataset> {
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
        let cases = records
            .iter()
            .map(|r| {
                Ok(Case {
                    id: r.case_id.clone(),
                    cc: image::load_image(&resolve(&r.cc_image))?,
                    mlo: image::load_image(&resolve(&r.mlo_image))?,
                    lesions: r.lesions.clone(),
                    label: r.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { cases })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.cases.iter().map(|c| c.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            cases: indices.iter().map(|&i| self.cases[i].clone()).collect(),
        }
    }

    /// Copy in which each case's MLO view is replaced by its CC view.
    pub fn with_mirrored_views(&self) -> Dataset {
        Dataset {
            cases: self
                .cases
                .iter()
                .map(|c| Case {
                    mlo: c.cc.clone(),
                    ..c.clone()
                })
                .collect(),
        }
    }
}
