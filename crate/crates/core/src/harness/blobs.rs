//! Gaussian-cluster classification data used as a small stand-in benchmark.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::Matrix;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq)]
pub struct BlobParams {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Standard deviation of each isotropic cluster.
    pub spread: f64,
    /// Centers are drawn uniformly from `[-1, 1]^dim` with this seed.
    pub center_seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 32,
            per_class: 600,
            spread: 1.5,
            center_seed: 0,
        }
    }
}

const TEST_FRACTION: f64 = 0.2;

pub fn blob_centers(params: &BlobParams) -> Matrix {
    let mut rng = stream(params.center_seed, Purpose::Data, &[0]);
    let data = (0..params.classes * params.dim)
        .map(|_| rng.random_range(-1.0..=1.0))
        .collect();
    Matrix::from_vec(params.classes, params.dim, data).expect("shape by construction")
}

/// Samples the clusters and splits each class 80/20 into `(train, test)`.
pub fn make_blobs(params: &BlobParams, seed: u64) -> Result<(Dataset, Dataset)> {
    if params.classes < 2 {
        return Err(Error::Config(format!("blobs need at least 2 classes, got {}", params.classes)));
    }
    if !(params.spread > 0.0 && params.spread.is_finite()) {
        return Err(Error::Config(format!("blob spread must be > 0, got {}", params.spread)));
    }
    if params.dim == 0 || params.per_class < 2 {
        return Err(Error::Config("blobs need dim >= 1 and at least 2 samples per class".into()));
    }
    let centers = blob_centers(params);
    let noise = Normal::new(0.0, params.spread).map_err(|e| Error::Config(e.to_string()))?;
    let test_per_class = ((params.per_class as f64 * TEST_FRACTION).round() as usize).clamp(1, params.per_class - 1);

    let (mut train_x, mut train_y, mut test_x, mut test_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..params.classes {
        let mut rng = stream(seed, Purpose::Data, &[1, c as u64]);
        let mut points: Vec<Vec<f64>> = (0..params.per_class)
            .map(|_| centers.row(c).iter().map(|&m| m + noise.sample(&mut rng)).collect())
            .collect();
        points.shuffle(&mut rng);
        for (i, p) in points.into_iter().enumerate() {
            if i < test_per_class {
                test_x.extend(p);
                test_y.push(c);
            } else {
                train_x.extend(p);
                train_y.push(c);
            }
        }
    }
    let train = Dataset::new(Matrix::from_vec(train_y.len(), params.dim, train_x)?, train_y, params.classes)?;
    let test = Dataset::new(Matrix::from_vec(test_y.len(), params.dim, test_x)?, test_y, params.classes)?;
    Ok((train, test))
}

/// Accuracy of assigning each test point to the nearest training-class mean.
pub fn nearest_centroid_accuracy(train: &Dataset, test: &Dataset) -> f64 {
    let (classes, dim) = (train.classes(), train.dim());
    let mut means = vec![vec![0.0; dim]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in train.features().iter_rows().zip(train.labels()) {
        counts[y] += 1;
        for (m, v) in means[y].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .features()
        .iter_rows()
        .zip(test.labels())
        .filter(|(row, &y)| {
            let dist = |m: &Vec<f64>| m.iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..classes)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap_or(0);
            best == y
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
