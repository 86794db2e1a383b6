//! Bernoulli preference model:
//! `θ = [θ_μ, θ_Σ] ~ N(0, I)`, `z_i ~ N(θ_μ, Lᵀ L)` with `L = tril(θ_Σ)`,
//! `y_ij ~ Bernoulli(sigmoid(x_ijᵀ z_i))`.

use ndarray::{s, Array1, ArrayView1};

use super::{check_covariates, standard_normal_prior, BranchEval, HbdModel};
use crate::data::{BranchData, BranchDataset};
use crate::error::{Error, Result};
use crate::math::{
    diag_transform_grad, linalg, log_sigmoid, order_invariant_sum, sigmoid, UnconstrainedChol,
    DEFAULT_GAMMA, LN_2PI,
};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreferenceModel {
    dim: usize,
    gamma: f64,
}

impl PreferenceModel {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "preference model needs a positive dimension");
        Self {
            dim,
            gamma: DEFAULT_GAMMA,
        }
    }

    fn tril(&self, theta: ArrayView1<'_, f64>) -> UnconstrainedChol {
        let raw = theta.slice(s![self.dim..]).to_owned();
        UnconstrainedChol::new(self.dim, raw, self.gamma).expect("global dim checked by caller")
    }

    /// Value of `log N(z | θ_μ, LᵀL)` plus gradients in `θ` and `z`.
    fn local_prior_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
    ) -> (f64, Array1<f64>, Array1<f64>) {
        let d = self.dim;
        let chol = self.tril(theta);
        let l = chol.factor();
        let r = &z - &theta.slice(s![..d]);
        // Σ⁻¹ = L⁻¹L⁻ᵀ, so the quadratic form is ‖u‖² with Lᵀu = r
        let u = linalg::solve_lower_transpose(l.view(), r.view());
        let v = linalg::solve_lower(l.view(), u.view());
        let value = -0.5 * u.dot(&u) - chol.log_diag_sum() - 0.5 * d as f64 * LN_2PI;

        let mut grad_theta = Array1::zeros(theta.len());
        grad_theta.slice_mut(s![..d]).assign(&v);
        for a in 0..d {
            for b in 0..a {
                grad_theta[d + UnconstrainedChol::index(a, b)] = u[a] * v[b];
            }
            let k = UnconstrainedChol::index(a, a);
            let raw = chol.raw()[k];
            grad_theta[d + k] =
                (u[a] * v[a] - 1.0 / l[[a, a]]) * diag_transform_grad(raw, self.gamma);
        }
        (value, grad_theta, -v)
    }

    fn likelihood_terms(z: ArrayView1<'_, f64>, data: &BranchData) -> (Vec<f64>, Array1<f64>) {
        let logits = data.x.dot(&z);
        let terms = logits
            .iter()
            .zip(data.y.iter())
            .map(|(&s, &y)| y * log_sigmoid(s) + (1.0 - y) * log_sigmoid(-s))
            .collect();
        let resid = Array1::from_iter(
            logits
                .iter()
                .zip(data.y.iter())
                .map(|(&s, &y)| y - sigmoid(s)),
        );
        (terms, resid)
    }
}

impl HbdModel for PreferenceModel {
    fn global_dim(&self) -> usize {
        self.dim + UnconstrainedChol::packed_len(self.dim)
    }

    fn local_dim(&self) -> usize {
        self.dim
    }

    fn covariate_dim(&self) -> usize {
        self.dim
    }

    fn is_symmetric(&self) -> bool {
        true
    }

    fn log_prior_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        standard_normal_prior(theta)
    }

    fn log_local_prior(&self, theta: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> f64 {
        self.local_prior_grad(theta, z).0
    }

    fn log_likelihood(
        &self,
        _theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> f64 {
        let (mut terms, _) = Self::likelihood_terms(z, data);
        order_invariant_sum(&mut terms)
    }

    fn log_branch_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> BranchEval {
        let (prior, grad_theta, mut grad_z) = self.local_prior_grad(theta, z);
        let (mut terms, resid) = Self::likelihood_terms(z, data);
        grad_z += &data.x.t().dot(&resid);
        BranchEval {
            value: prior + order_invariant_sum(&mut terms),
            grad_theta,
            grad_z,
        }
    }

    fn validate(&self, data: &BranchDataset) -> Result<()> {
        check_covariates(self, data)?;
        for (i, b) in data.branches.iter().enumerate() {
            if let Some(y) = b.y.iter().find(|&&y| y != 0.0 && y != 1.0) {
                return Err(Error::InvalidData(format!(
                    "branch {i}: non-binary observation {y}"
                )));
            }
        }
        Ok(())
    }
}
