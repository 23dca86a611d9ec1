use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    binarize_cifar10, load_cifar10_binary, load_idx, synth_two_gaussians, DataError, LabeledSet,
    Samples,
};

/// Where the labeled source data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Two isotropic Gaussians; the test set is an independent draw.
    Gaussians {
        #[serde(default = "d_n_pos")]
        n_pos: usize,
        #[serde(default = "d_n_neg")]
        n_neg: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_sep")]
        separation: f64,
        #[serde(default = "d_test_pos")]
        test_pos: usize,
        #[serde(default = "d_test_neg")]
        test_neg: usize,
        #[serde(default)]
        seed: u64,
    },
    /// IDX image/label file pairs; classes in `positive_classes` are positive.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default = "d_low_digits")]
        positive_classes: Vec<u8>,
        #[serde(default = "d_max_label")]
        max_label: u8,
    },
    /// CIFAR-10 binary batches, vehicles against animals.
    Cifar10 { train: Vec<PathBuf>, test: PathBuf },
}

fn d_n_pos() -> usize {
    2020
}
fn d_n_neg() -> usize {
    3030
}
fn d_dim() -> usize {
    2
}
fn d_sep() -> f64 {
    3.0
}
fn d_test_pos() -> usize {
    2000
}
fn d_test_neg() -> usize {
    3000
}
fn d_low_digits() -> Vec<u8> {
    vec![0, 1, 2, 3, 4]
}
fn d_max_label() -> u8 {
    9
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Gaussians {
            n_pos: d_n_pos(),
            n_neg: d_n_neg(),
            dim: d_dim(),
            separation: d_sep(),
            test_pos: d_test_pos(),
            test_neg: d_test_neg(),
            seed: 0,
        }
    }
}

/// Training pool and test set, before the PU split.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: LabeledSet,
    pub test: LabeledSet,
}

impl DatasetSpec {
    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Gaussians { .. } => {}
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                ..
            } => {
                for p in [train_images, train_labels, test_images, test_labels] {
                    fix(p);
                }
            }
            DatasetSpec::Cifar10 { train, test } => {
                train.iter_mut().for_each(fix);
                fix(test);
            }
        }
    }

    pub fn load(&self) -> Result<LoadedData, DataError> {
        match self {
            DatasetSpec::Gaussians {
                n_pos,
                n_neg,
                dim,
                separation,
                test_pos,
                test_neg,
                seed,
            } => Ok(LoadedData {
                train: synth_two_gaussians(*n_pos, *n_neg, *dim, *separation, *seed)?,
                test: synth_two_gaussians(
                    *test_pos,
                    *test_neg,
                    *dim,
                    *separation,
                    seed.wrapping_add(1),
                )?,
            }),
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                positive_classes,
                max_label,
            } => {
                let is_pos = |c: u8| positive_classes.contains(&c);
                Ok(LoadedData {
                    train: load_idx(train_images, train_labels)?.binarize(*max_label, is_pos)?,
                    test: load_idx(test_images, test_labels)?.binarize(*max_label, is_pos)?,
                })
            }
            DatasetSpec::Cifar10 { train, test } => {
                if train.is_empty() {
                    return Err(DataError::InvalidArgument(
                        "cifar10: no training batches listed".into(),
                    ));
                }
                let mut samples = Samples::empty(vec![3, 32, 32]);
                let mut labels = Vec::new();
                for path in train {
                    let set = binarize_cifar10(&load_cifar10_binary(path)?)?;
                    for i in 0..set.len() {
                        samples.push(set.samples.get(i));
                    }
                    labels.extend(set.labels);
                }
                Ok(LoadedData {
                    train: LabeledSet::new(samples, labels)?,
                    test: binarize_cifar10(&load_cifar10_binary(test)?)?,
                })
            }
        }
    }
}
