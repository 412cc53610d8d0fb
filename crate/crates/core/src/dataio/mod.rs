//! Feature sets, on-disk formats, normalization, splitting, pairing and the
//! synthetic Gaussian-cluster generator.

pub(crate) mod format;
mod normalize;
mod pairs;
mod split;
mod synth;

use std::path::PathBuf;

pub use format::{
    load_csv, load_feature_file, read_feature_set, save_feature_file, write_feature_set,
    CMFV_MAGIC, CMFV_VERSION,
};
pub use normalize::{normalize, NormStats};
pub use pairs::{batches, make_pairs, Pair, PairedBatch, Regime};
pub use split::{split, split_indices};
pub use synth::{synth_generate, SynthRegime, SynthSpec};

use crate::diffmath::{MathError, Matrix};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },
    #[error("trailing bytes after payload: {extra}")]
    TrailingBytes { extra: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sample {index} has no labels")]
    EmptyLabelSet { index: usize },
    #[error("invalid header field: {0}")]
    InvalidHeader(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("class {class} has {count} samples; stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },
    #[error("split fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("label {label} occurs in domain A but has no sample in domain B")]
    UnmatchedLabel { label: usize },
    #[error("paired sets disagree: {0}")]
    PairMismatch(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Math(#[from] MathError),
}

/// Per-sample labels over `classes` classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    Single {
        classes: usize,
        indices: Vec<usize>,
    },
    /// Sorted, de-duplicated, non-empty label set per sample.
    Multi {
        classes: usize,
        sets: Vec<Vec<usize>>,
    },
}

impl Labels {
    pub fn single(classes: usize, indices: Vec<usize>) -> Result<Self, DataError> {
        let l = Labels::Single { classes, indices };
        l.validate()?;
        Ok(l)
    }

    pub fn multi(classes: usize, mut sets: Vec<Vec<usize>>) -> Result<Self, DataError> {
        for s in &mut sets {
            s.sort_unstable();
            s.dedup();
        }
        let l = Labels::Multi { classes, sets };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let classes = self.classes();
        if classes < 2 {
            return Err(DataError::InvalidHeader(format!(
                "need at least 2 classes, got {classes}"
            )));
        }
        match self {
            Labels::Single { indices, .. } => {
                if let Some(&label) = indices.iter().find(|&&l| l >= classes) {
                    return Err(DataError::LabelOutOfRange { label, classes });
                }
            }
            Labels::Multi { sets, .. } => {
                for (i, s) in sets.iter().enumerate() {
                    if s.is_empty() {
                        return Err(DataError::EmptyLabelSet { index: i });
                    }
                    if let Some(&label) = s.iter().find(|&&l| l >= classes) {
                        return Err(DataError::LabelOutOfRange { label, classes });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        match self {
            Labels::Single { classes, .. } | Labels::Multi { classes, .. } => *classes,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Labels::Single { indices, .. } => indices.len(),
            Labels::Multi { sets, .. } => sets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_multi(&self) -> bool {
        matches!(self, Labels::Multi { .. })
    }

    /// Label set of sample `i`.
    pub fn set(&self, i: usize) -> &[usize] {
        match self {
            Labels::Single { indices, .. } => std::slice::from_ref(&indices[i]),
            Labels::Multi { sets, .. } => &sets[i],
        }
    }

    /// Smallest label of sample `i`; used as the stratification key.
    pub fn primary(&self, i: usize) -> usize {
        self.set(i)[0]
    }

    pub fn sets(&self) -> Vec<Vec<usize>> {
        (0..self.len()).map(|i| self.set(i).to_vec()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Labels {
        match self {
            Labels::Single { classes, indices } => Labels::Single {
                classes: *classes,
                indices: idx.iter().map(|&i| indices[i]).collect(),
            },
            Labels::Multi { classes, sets } => Labels::Multi {
                classes: *classes,
                sets: idx.iter().map(|&i| sets[i].clone()).collect(),
            },
        }
    }

    /// `n × C` multi-hot target matrix.
    pub fn multi_hot(&self) -> Matrix {
        let c = self.classes();
        let mut data = vec![0.0; self.len() * c];
        for i in 0..self.len() {
            for &l in self.set(i) {
                data[i * c + l] = 1.0;
            }
        }
        Matrix::new(self.len(), c, data).expect("labels are non-empty")
    }
}

/// One modality's samples.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    pub labels: Labels,
    pub modality: String,
}

impl FeatureSet {
    pub fn new(
        features: Matrix,
        labels: Labels,
        modality: impl Into<String>,
    ) -> Result<Self, DataError> {
        if labels.len() != features.rows() {
            return Err(DataError::InvalidHeader(format!(
                "{} feature rows but {} label rows",
                features.rows(),
                labels.len()
            )));
        }
        labels.validate()?;
        Ok(Self {
            features,
            labels,
            modality: modality.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.labels.classes()
    }

    pub fn subset(&self, idx: &[usize]) -> Result<FeatureSet, DataError> {
        Ok(FeatureSet {
            features: self.features.select_rows(idx)?,
            labels: self.labels.subset(idx),
            modality: self.modality.clone(),
        })
    }

    /// Same labels and modality with a different feature matrix (e.g. the
    /// intermediate representation of these samples).
    pub fn with_features(&self, features: Matrix) -> Result<FeatureSet, DataError> {
        FeatureSet::new(features, self.labels.clone(), self.modality.clone())
    }
}
