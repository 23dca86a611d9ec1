//! Datasets, PU split construction and augmentation.
//!
//! Ground-truth labels of the unlabeled set live in [`OracleLabels`], which
//! only hands them out against an [`OracleAccess`] token. Training code
//! receives a [`PuTrain`], which carries no labels for unlabeled samples.

mod augment;
mod cifar;
mod idx;
mod synth;

pub use augment::{hflip, AugmentConfig, AugmentKind, AugmentationPipeline, StrongAugment};
pub use cifar::{binarize_cifar10, load_cifar10_binary, CIFAR_RECORD_BYTES};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{bayes_accuracy, synth_two_gaussians, write_csv};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::rng;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: file is empty")]
    Empty { path: PathBuf },
    #[error("{path}: truncated at byte offset {offset}")]
    Truncated { path: PathBuf, offset: usize },
    #[error("{path}: bad magic {found:#010x} at byte offset 0 (expected {expected:#010x})")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("image file has {images} items but label file has {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("record {index}: label {label} outside 0..={max}")]
    LabelOutOfRange { index: usize, label: u8, max: u8 },
    #[error("requested {requested} labeled positives but only {available} are available")]
    NotEnoughPositives { requested: usize, available: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("oracle labels requested outside analysis mode")]
    LabelLeak,
}

/// Binary class label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    /// `+1` or `-1`.
    pub fn sign(self) -> f64 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => -1.0,
        }
    }

    pub fn from_positive(is_positive: bool) -> Self {
        if is_positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }
}

/// Equally shaped samples stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DataError> {
        let per: usize = shape.iter().product();
        if per == 0 || !data.len().is_multiple_of(per) {
            return Err(DataError::InvalidArgument(format!(
                "{} values do not divide into samples of shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Vec<usize>) -> Self {
        Self {
            shape,
            data: Vec::new(),
        }
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.sample_len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        let d = self.sample_len();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn push(&mut self, sample: &[f64]) {
        assert_eq!(sample.len(), self.sample_len(), "sample length");
        self.data.extend_from_slice(sample);
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    /// Batch tensor `[indices.len(), ...sample_shape]`.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.get(i));
        }
        self.batch(indices.len(), data)
    }

    /// Whole set as one batch tensor.
    pub fn to_tensor(&self) -> Tensor {
        self.batch(self.len(), self.data.clone())
    }

    pub(crate) fn batch(&self, n: usize, data: Vec<f64>) -> Tensor {
        let mut shape = vec![n];
        shape.extend(&self.shape);
        Tensor::new(shape, data).expect("batch shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        let mut out = Samples::empty(self.shape.clone());
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }
}

/// Samples with binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub samples: Samples,
    pub labels: Vec<Label>,
}

impl LabeledSet {
    pub fn new(samples: Samples, labels: Vec<Label>) -> Result<Self, DataError> {
        if samples.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: samples.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn count_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l == Label::Positive)
            .count()
    }
}

/// The part of a PU dataset visible to training code.
#[derive(Clone, Debug, PartialEq)]
pub struct PuTrain {
    pub positives: Samples,
    pub unlabeled: Samples,
    /// Class prior of the positive class.
    pub prior: f64,
}

/// Hidden ground truth of the unlabeled set.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleLabels(Vec<Label>);

/// Proof that oracle access was explicitly unlocked.
#[derive(Debug)]
pub struct OracleAccess {
    _private: (),
}

impl OracleAccess {
    /// Grants access only when analysis mode is enabled.
    pub fn unlock(analysis_mode: bool) -> Result<Self, DataError> {
        if analysis_mode {
            Ok(Self { _private: () })
        } else {
            Err(DataError::LabelLeak)
        }
    }
}

impl OracleLabels {
    pub fn reveal(&self, _access: &OracleAccess) -> &[Label] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PuDataset {
    pub train: PuTrain,
    oracle: OracleLabels,
    pub test: LabeledSet,
    /// Indices into the source dataset chosen as labeled positives.
    pub positive_indices: Vec<usize>,
    /// Indices into the source dataset forming the unlabeled set, in order.
    pub unlabeled_indices: Vec<usize>,
}

impl PuDataset {
    pub fn oracle(&self) -> &OracleLabels {
        &self.oracle
    }
}

/// Picks `n_p` positives uniformly at random as the labeled set; every other
/// sample becomes unlabeled. The prior is the positive fraction of `full`.
pub fn make_pu_split(
    full: &LabeledSet,
    test: LabeledSet,
    n_p: usize,
    seed: u64,
) -> Result<PuDataset, DataError> {
    let mut pos: Vec<usize> = (0..full.len())
        .filter(|&i| full.labels[i] == Label::Positive)
        .collect();
    if n_p == 0 {
        return Err(DataError::InvalidArgument("n_p must be positive".into()));
    }
    if n_p > pos.len() {
        return Err(DataError::NotEnoughPositives {
            requested: n_p,
            available: pos.len(),
        });
    }
    if n_p == full.len() {
        return Err(DataError::InvalidArgument(
            "no samples left for the unlabeled set".into(),
        ));
    }
    let prior = pos.len() as f64 / full.len() as f64;
    pos.shuffle(&mut rng::stream(seed, "pu-split"));
    let mut chosen = pos[..n_p].to_vec();
    chosen.sort_unstable();
    let mut is_labeled = vec![false; full.len()];
    for &i in &chosen {
        is_labeled[i] = true;
    }
    let unlabeled_indices: Vec<usize> = (0..full.len()).filter(|&i| !is_labeled[i]).collect();
    let hidden = unlabeled_indices.iter().map(|&i| full.labels[i]).collect();
    Ok(PuDataset {
        train: PuTrain {
            positives: full.samples.subset(&chosen),
            unlabeled: full.samples.subset(&unlabeled_indices),
            prior,
        },
        oracle: OracleLabels(hidden),
        test,
        positive_indices: chosen,
        unlabeled_indices,
    })
}

/// Decoded image records with integer class labels; pixels scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecords {
    pub images: Samples,
    pub labels: Vec<u8>,
}

impl ImageRecords {
    /// Labels every record whose class satisfies `is_positive` as positive.
    /// Classes above `max_label` are rejected.
    pub fn binarize(
        &self,
        max_label: u8,
        is_positive: impl Fn(u8) -> bool,
    ) -> Result<LabeledSet, DataError> {
        let labels = self
            .labels
            .iter()
            .enumerate()
            .map(|(index, &label)| {
                if label > max_label {
                    Err(DataError::LabelOutOfRange {
                        index,
                        label,
                        max: max_label,
                    })
                } else {
                    Ok(Label::from_positive(is_positive(label)))
                }
            })
            .collect::<Result<_, _>>()?;
        LabeledSet::new(self.images.clone(), labels)
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}
