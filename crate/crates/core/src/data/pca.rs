//! Principal components by power iteration with deflation.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::RatingsTable;
use crate::error::{Error, Result};

const TOL: f64 = 1e-10;
const MAX_ITERS: usize = 10_000;

/// A fitted projection onto the top-`k` principal directions.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `k × p`, orthonormal rows; each row's largest-magnitude loading is positive.
    pub components: Array2<f64>,
    pub eigenvalues: Array1<f64>,
    pub total_variance: f64,
}

impl Pca {
    /// Fits on the rows of `data` (`m × p`).
    pub fn fit(data: ArrayView2<'_, f64>, k: usize) -> Result<Self> {
        let (m, p) = data.dim();
        if k > p {
            return Err(Error::Precondition(format!(
                "cannot keep {k} components of {p}-dimensional features"
            )));
        }
        if m == 0 {
            return Err(Error::InvalidData("PCA needs at least one row".into()));
        }
        let mean = data.mean_axis(Axis(0)).expect("m > 0");
        let centered = &data - &mean;
        let mut cov = centered.t().dot(&centered) / m as f64;
        let total_variance = cov.diag().sum();

        let mut components = Array2::zeros((k, p));
        let mut eigenvalues = Array1::zeros(k);
        for c in 0..k {
            let found: Vec<Array1<f64>> = (0..c).map(|i| components.row(i).to_owned()).collect();
            let v = top_eigenvector(&cov, &found);
            let lambda = v.dot(&cov.dot(&v)).max(0.0);
            for i in 0..p {
                for j in 0..p {
                    cov[[i, j]] -= lambda * v[i] * v[j];
                }
            }
            components.row_mut(c).assign(&v);
            eigenvalues[c] = lambda;
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
            total_variance,
        })
    }

    pub fn transform(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.components.dot(&(&x - &self.mean))
    }

    pub fn explained_variance_ratio(&self) -> Array1<f64> {
        if self.total_variance > 0.0 {
            &self.eigenvalues / self.total_variance
        } else {
            Array1::zeros(self.eigenvalues.len())
        }
    }
}

fn orthogonalize(v: &mut Array1<f64>, against: &[Array1<f64>]) {
    for u in against {
        let d = v.dot(u);
        v.scaled_add(-d, u);
    }
}

fn normalized(mut v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    if n > 1e-300 && n.is_finite() {
        v /= n;
        Some(v)
    } else {
        None
    }
}

fn fix_sign(mut v: Array1<f64>) -> Array1<f64> {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() + 1e-12 {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

fn start_vector(cov: &Array2<f64>, found: &[Array1<f64>]) -> Array1<f64> {
    let p = cov.nrows();
    // column of largest norm first, then unit vectors as fallbacks
    let mut order: Vec<usize> = (0..p).collect();
    let norms: Vec<f64> = (0..p).map(|j| cov.column(j).dot(&cov.column(j))).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    for &j in &order {
        let mut v =
            cov.column(j).to_owned() + Array1::from_shape_fn(p, |i| 1e-3 / (1.0 + i as f64));
        orthogonalize(&mut v, found);
        if let Some(v) = normalized(v) {
            return v;
        }
    }
    for j in 0..p {
        let mut v = Array1::zeros(p);
        v[j] = 1.0;
        orthogonalize(&mut v, found);
        if let Some(v) = normalized(v) {
            return v;
        }
    }
    unreachable!("fewer than p components found, so some basis vector survives")
}

fn top_eigenvector(cov: &Array2<f64>, found: &[Array1<f64>]) -> Array1<f64> {
    let mut v = start_vector(cov, found);
    for _ in 0..MAX_ITERS {
        let mut next = cov.dot(&v);
        orthogonalize(&mut next, found);
        let Some(mut next) = normalized(next) else {
            // remaining spectrum is zero; any orthonormal completion will do
            return fix_sign(v);
        };
        if next.dot(&v) < 0.0 {
            next.mapv_inplace(|x| -x);
        }
        let diff = (&next - &v).mapv(|d| d * d).sum().sqrt();
        v = next;
        if diff < TOL {
            break;
        }
    }
    fix_sign(v)
}

/// Replaces item features by their top-`k` principal projections.
///
/// The projection is fit once per distinct item (first occurrence), since
/// item features do not depend on who rated them.
pub fn pca_features(table: &RatingsTable, k: usize) -> Result<(RatingsTable, Pca)> {
    let p = table.feature_dim();
    if k > p {
        return Err(Error::Precondition(format!(
            "cannot keep {k} components of {p}-dimensional features"
        )));
    }
    let mut seen = HashSet::new();
    let item_rows: Vec<&[f64]> = table
        .rows
        .iter()
        .filter(|r| seen.insert(r.item))
        .map(|r| r.features.as_slice())
        .collect();
    let data = Array2::from_shape_fn((item_rows.len(), p), |(i, j)| item_rows[i][j]);
    let pca = Pca::fit(data.view(), k)?;
    let mut out = table.clone();
    out.feature_names = (1..=k).map(|c| format!("pc{c}")).collect();
    for r in &mut out.rows {
        r.features = pca.transform(ArrayView1::from(&r.features[..])).to_vec();
    }
    Ok((out, pca))
}
