//! Ragged branch datasets, ratings ingestion, feature PCA, splitting and the
//! on-disk container.

mod container;
mod pca;
mod ratings;

pub use container::{read_dataset, write_dataset};
pub use pca::{pca_features, Pca};
pub use ratings::{load_ratings, parse_ratings, preprocess, RatingRow, RatingsTable};

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Observations `(x_ij, y_ij)` of one branch. `x` is `n × covariate_dim`
/// (zero columns for models without covariates).
#[derive(Clone, Debug, PartialEq)]
pub struct BranchData {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
}

impl BranchData {
    pub fn new(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::DimensionMismatch {
                what: "branch covariate rows vs observations",
                expected: y.len(),
                got: x.nrows(),
            });
        }
        Ok(Self { x, y })
    }

    pub fn empty(covariate_dim: usize) -> Self {
        Self {
            x: Array2::zeros((0, covariate_dim)),
            y: Array1::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Sub-branch made of the given observation indices, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchDataset {
    pub branches: Vec<BranchData>,
    pub covariate_dim: usize,
    pub has_covariates: bool,
}

impl BranchDataset {
    pub fn new(branches: Vec<BranchData>, covariate_dim: usize) -> Result<Self> {
        for (i, b) in branches.iter().enumerate() {
            if b.x.ncols() != covariate_dim {
                return Err(Error::InvalidData(format!(
                    "branch {i} has covariate dim {}, expected {covariate_dim}",
                    b.x.ncols()
                )));
            }
        }
        Ok(Self {
            branches,
            covariate_dim,
            has_covariates: covariate_dim > 0,
        })
    }

    pub fn len(&self) -> usize {
        self.branches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.branches.is_empty()
    }

    pub fn num_observations(&self) -> usize {
        self.branches.iter().map(BranchData::n).sum()
    }
}

/// Train/test parts aligned by branch index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub train: BranchDataset,
    pub test: BranchDataset,
}

/// Per-branch uniform split. Each branch sends `round(n_i · test_fraction)`
/// observations to the test part, but always keeps at least one in train.
pub fn split(ds: &BranchDataset, test_fraction: f64, stream: &RngStream) -> Result<SplitDataset> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Precondition(format!(
            "test fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut train = Vec::with_capacity(ds.len());
    let mut test = Vec::with_capacity(ds.len());
    for (i, b) in ds.branches.iter().enumerate() {
        let n = b.n();
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(1));
        let mut rng = stream.child(i as u64).rng();
        let mut test_rows = index::sample(&mut rng, n, n_test).into_vec();
        test_rows.sort_unstable();
        let mut is_test = vec![false; n];
        for &r in &test_rows {
            is_test[r] = true;
        }
        let train_rows: Vec<usize> = (0..n).filter(|&r| !is_test[r]).collect();
        train.push(b.select(&train_rows));
        test.push(b.select(&test_rows));
    }
    Ok(SplitDataset {
        train: BranchDataset::new(train, ds.covariate_dim)?,
        test: BranchDataset::new(test, ds.covariate_dim)?,
    })
}
