use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::partition::DatasetIndex;

/// Feature matrix with one integer label per row. Row index doubles as sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {y} out of range for {classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn index(&self) -> DatasetIndex {
        DatasetIndex::from_labels(self.labels.clone(), self.classes).expect("labels validated on construction")
    }

    /// Copies the rows `ids` into a new matrix.
    pub fn gather(&self, ids: &[usize]) -> Matrix {
        let dim = self.dim();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(self.features.row(id));
        }
        Matrix::from_vec(ids.len(), dim, data).expect("shape by construction")
    }

    pub fn labelled_batch(&self, ids: &[usize]) -> Batch {
        let labels = ids.iter().map(|&i| self.labels[i]).collect();
        Batch::labelled(self.gather(ids), labels).expect("shape by construction")
    }

    /// Rows `ids` as a new dataset (labels re-indexed from zero).
    pub fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            features: self.gather(ids),
            labels: ids.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}
