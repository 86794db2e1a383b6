//! Hierarchical branch models: a global latent `θ`, per-branch locals `z_i`,
//! and conditionally independent branch observations.

mod preference;
mod synthetic;

pub use preference::PreferenceModel;
pub use synthetic::{
    forward_sample_with, synthetic_forward_sample, synthetic_oracle, SyntheticConfig,
    SyntheticLatents, SyntheticModel, SyntheticOracle,
};

use ndarray::{Array1, ArrayView1};

use crate::data::{BranchData, BranchDataset};
use crate::error::Result;

/// Value and gradients of `log p(z_i, y_i | θ, x_i)`.
#[derive(Clone, Debug)]
pub struct BranchEval {
    pub value: f64,
    pub grad_theta: Array1<f64>,
    pub grad_z: Array1<f64>,
}

/// Black-box target density `p(θ) Π_i p(z_i | θ) p(y_i | θ, z_i, x_i)`.
///
/// Implementations are pure; branch terms may be evaluated concurrently.
pub trait HbdModel: Send + Sync {
    fn global_dim(&self) -> usize;
    fn local_dim(&self) -> usize;
    fn covariate_dim(&self) -> usize;

    /// Whether branch conditionals are the same function for every branch,
    /// which is what makes amortized local factors valid.
    fn is_symmetric(&self) -> bool;

    fn log_prior(&self, theta: ArrayView1<'_, f64>) -> f64 {
        self.log_prior_grad(theta).0
    }

    fn log_prior_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>);

    /// `log p(z_i | θ)`.
    fn log_local_prior(&self, theta: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> f64;

    /// `log p(y_i | θ, z_i, x_i)`.
    fn log_likelihood(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> f64;

    /// `log p(z_i, y_i | θ, x_i)`.
    fn log_branch(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> f64 {
        self.log_local_prior(theta, z) + self.log_likelihood(theta, z, data)
    }

    fn log_branch_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> BranchEval;

    /// Checks that `data` has the shapes and value ranges this model expects.
    fn validate(&self, data: &BranchDataset) -> Result<()>;
}

/// Standard-normal prior `N(θ | 0, I)` shared by both concrete models.
pub(crate) fn standard_normal_prior(theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
    let v = -0.5 * theta.dot(&theta) - 0.5 * theta.len() as f64 * crate::math::LN_2PI;
    (v, theta.mapv(|t| -t))
}

pub(crate) fn check_covariates(model: &dyn HbdModel, data: &BranchDataset) -> Result<()> {
    if data.covariate_dim != model.covariate_dim() {
        return Err(crate::Error::DimensionMismatch {
            what: "dataset covariate dim vs model",
            expected: model.covariate_dim(),
            got: data.covariate_dim,
        });
    }
    Ok(())
}
