use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};
use crate::numkit::Matrix;

/// Labelled examples: `inputs` is `n×D`, one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(input_err!(
                "{} labels for {} input rows",
                labels.len(),
                inputs.rows()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(input_err!("label {bad} out of range for {num_classes} classes"));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `idx` (in order) as a standalone batch.
    pub fn gather(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.inputs.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// SHA-256 over dimensions, input bits and labels.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.num_classes as u64).to_le_bytes());
        for v in self.inputs.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Examples a learner may take gradient steps on.
///
/// Training entry points accept only this type; validation splits are a
/// separate [`ValSet`] so they cannot be passed to an optimizer by accident.
#[derive(Debug, Clone)]
pub struct TrainSet<'a> {
    data: &'a Dataset,
    idx: Vec<usize>,
}

/// Held-out examples of the current window, used for growth decisions and
/// early stopping only.
#[derive(Debug, Clone)]
pub struct ValSet<'a> {
    data: &'a Dataset,
    idx: Vec<usize>,
}

macro_rules! view_impl {
    ($t:ident) => {
        impl<'a> $t<'a> {
            pub fn new(data: &'a Dataset, idx: Vec<usize>) -> Self {
                debug_assert!(idx.iter().all(|&i| i < data.len()));
                Self { data, idx }
            }

            /// Every example of `data`.
            pub fn all(data: &'a Dataset) -> Self {
                Self::new(data, (0..data.len()).collect())
            }

            pub fn len(&self) -> usize {
                self.idx.len()
            }

            pub fn is_empty(&self) -> bool {
                self.idx.is_empty()
            }

            pub fn dataset(&self) -> &'a Dataset {
                self.data
            }

            /// Indices into the underlying dataset.
            pub fn indices(&self) -> &[usize] {
                &self.idx
            }

            /// Gathers the examples at `positions` (offsets into this view).
            pub fn batch(&self, positions: &[usize]) -> (Matrix, Vec<usize>) {
                let idx: Vec<usize> = positions.iter().map(|&p| self.idx[p]).collect();
                self.data.gather(&idx)
            }

            /// The whole view as one batch.
            pub fn materialize(&self) -> (Matrix, Vec<usize>) {
                self.data.gather(&self.idx)
            }
        }
    };
}

view_impl!(TrainSet);
view_impl!(ValSet);
