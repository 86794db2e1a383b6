//! Hierarchical linear regression with a closed-form posterior:
//! `θ ~ N(0, I)`, `z_i ~ N(θ, I)`, `y_ij ~ N(x_ijᵀ z_i, 1)`.

use ndarray::{s, Array1, Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};

use super::{check_covariates, standard_normal_prior, BranchEval, HbdModel};
use crate::data::{BranchData, BranchDataset};
use crate::error::{Error, Result};
use crate::families::{BranchParams, LocalParams, Structure};
use crate::math::{
    linalg, order_invariant_sum, tril_unmap, GaussianSpec, Scale, DEFAULT_GAMMA, LN_2PI,
};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticModel {
    dim: usize,
}

impl SyntheticModel {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "synthetic model needs a positive dimension");
        Self { dim }
    }
}

impl HbdModel for SyntheticModel {
    fn global_dim(&self) -> usize {
        self.dim
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
        let d = &z - &theta;
        -0.5 * d.dot(&d) - 0.5 * self.dim as f64 * LN_2PI
    }

    fn log_likelihood(
        &self,
        _theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> f64 {
        let resid = &data.y - &data.x.dot(&z);
        let mut terms: Vec<f64> = resid.iter().map(|r| -0.5 * r * r - 0.5 * LN_2PI).collect();
        order_invariant_sum(&mut terms)
    }

    fn log_branch_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> BranchEval {
        let diff = &z - &theta;
        let resid = &data.y - &data.x.dot(&z);
        let mut terms: Vec<f64> = resid.iter().map(|r| -0.5 * r * r - 0.5 * LN_2PI).collect();
        let value = -0.5 * diff.dot(&diff) - 0.5 * self.dim as f64 * LN_2PI
            + order_invariant_sum(&mut terms);
        let grad_z = data.x.t().dot(&resid) - &diff;
        BranchEval {
            value,
            grad_theta: diff,
            grad_z,
        }
    }

    fn validate(&self, data: &BranchDataset) -> Result<()> {
        check_covariates(self, data)
    }
}

/// Shape of a synthetic dataset: latent dimension and per-branch counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_obs: Vec<usize>,
}

impl SyntheticConfig {
    pub fn uniform(dim: usize, branches: usize, n_per_branch: usize) -> Self {
        Self {
            dim,
            n_obs: vec![n_per_branch; branches],
        }
    }
}

/// Ground-truth latents of a forward sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLatents {
    pub theta: Array1<f64>,
    pub z: Vec<Array1<f64>>,
}

/// Forward sampling driven by an explicit source of standard-normal noise.
///
/// Noise is consumed as: `θ`, then per branch `z_i − θ` followed by each
/// observation's covariates and observation noise. Covariates are i.i.d.
/// standard normal.
pub fn forward_sample_with(
    config: &SyntheticConfig,
    mut noise: impl FnMut() -> f64,
) -> Result<(BranchDataset, SyntheticLatents)> {
    let d = config.dim;
    let theta = Array1::from_shape_fn(d, |_| noise());
    let mut zs = Vec::with_capacity(config.n_obs.len());
    let mut branches = Vec::with_capacity(config.n_obs.len());
    for &n in &config.n_obs {
        let z = &theta + &Array1::from_shape_fn(d, |_| noise());
        let mut x = Array2::zeros((n, d));
        let mut y = Array1::zeros(n);
        for j in 0..n {
            for c in 0..d {
                x[[j, c]] = noise();
            }
            y[j] = x.row(j).dot(&z) + noise();
        }
        branches.push(BranchData::new(x, y)?);
        zs.push(z);
    }
    Ok((
        BranchDataset::new(branches, d)?,
        SyntheticLatents { theta, z: zs },
    ))
}

pub fn synthetic_forward_sample(
    config: &SyntheticConfig,
    stream: &RngStream,
) -> Result<(BranchDataset, SyntheticLatents)> {
    let mut rng = stream.rng();
    forward_sample_with(config, || StandardNormal.sample(&mut rng))
}

/// Exact posterior and evidence of the synthetic model for one dataset.
#[derive(Clone, Debug)]
pub struct SyntheticOracle {
    pub posterior_global: GaussianSpec,
    pub log_marginal: f64,
    /// `(I + X_iᵀX_i)⁻¹` per branch.
    local_cov: Vec<Array2<f64>>,
    /// `X_iᵀ y_i` per branch.
    local_xty: Vec<Array1<f64>>,
}

fn spec_from_cov(mean: Array1<f64>, cov: &Array2<f64>) -> Result<GaussianSpec> {
    let l = linalg::cholesky(cov.view())?;
    GaussianSpec::new(mean, Scale::Tril(tril_unmap(l.view(), DEFAULT_GAMMA)?))
}

impl SyntheticOracle {
    pub fn num_branches(&self) -> usize {
        self.local_cov.len()
    }

    /// `p(z_i | θ, x_i, y_i) = N((I + XᵀX)⁻¹(Xᵀy + θ), (I + XᵀX)⁻¹)`.
    pub fn posterior_local(&self, theta: ArrayView1<'_, f64>, i: usize) -> Result<GaussianSpec> {
        let c = &self.local_cov[i];
        let mean = c.dot(&(&self.local_xty[i] + &theta));
        spec_from_cov(mean, c)
    }

    /// Dense branch parameters whose family member is the exact posterior.
    pub fn optimal_branch_params(&self) -> Result<BranchParams> {
        let locals = self
            .local_cov
            .iter()
            .zip(&self.local_xty)
            .map(|(c, xty)| {
                let l = linalg::cholesky(c.view())?;
                Ok(LocalParams {
                    mean: c.dot(xty),
                    coupling: Some(c.clone()),
                    scale: Scale::Tril(tril_unmap(l.view(), DEFAULT_GAMMA)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        BranchParams::new_with(Structure::Dense, self.posterior_global.clone(), locals)
    }
}

/// Closed-form posterior over `θ`, conditional posteriors over each `z_i`,
/// and `log p(y | x)`.
///
/// The evidence uses the dense covariance of all observations,
/// `I + X Xᵀ + blockdiag(X_i X_iᵀ)`, which costs `O((Σ n_i)³)`.
pub fn synthetic_oracle(data: &BranchDataset) -> Result<SyntheticOracle> {
    let d = data.covariate_dim;
    if d == 0 {
        return Err(Error::InvalidData(
            "synthetic oracle needs covariates".into(),
        ));
    }
    let eye = Array2::<f64>::eye(d);
    let mut precision = eye.clone();
    let mut rhs = Array1::<f64>::zeros(d);
    let mut local_cov = Vec::with_capacity(data.len());
    let mut local_xty = Vec::with_capacity(data.len());
    for b in &data.branches {
        if b.x.ncols() != d {
            return Err(Error::DimensionMismatch {
                what: "branch covariate dim",
                expected: d,
                got: b.x.ncols(),
            });
        }
        let gram = b.x.t().dot(&b.x);
        let c = linalg::spd_inverse((&eye + &gram).view())?;
        let xty = b.x.t().dot(&b.y);
        // Xᵀ(I + XXᵀ)⁻¹X = I − (I + XᵀX)⁻¹ and Xᵀ(I + XXᵀ)⁻¹y = (I + XᵀX)⁻¹Xᵀy
        precision = precision + &eye - &c;
        rhs = rhs + c.dot(&xty);
        local_cov.push(c);
        local_xty.push(xty);
    }
    let cov = linalg::spd_inverse(precision.view())?;
    let posterior_global = spec_from_cov(cov.dot(&rhs), &cov)?;

    let total: usize = data.num_observations();
    let mut x_all = Array2::<f64>::zeros((total, d));
    let mut y_all = Array1::<f64>::zeros(total);
    let mut big = Array2::<f64>::eye(total);
    let mut off = 0;
    for b in &data.branches {
        let n = b.n();
        x_all.slice_mut(s![off..off + n, ..]).assign(&b.x);
        y_all.slice_mut(s![off..off + n]).assign(&b.y);
        let mut blk = big.slice_mut(s![off..off + n, off..off + n]);
        blk += &b.x.dot(&b.x.t());
        off += n;
    }
    big = big + x_all.dot(&x_all.t());
    let log_marginal = linalg::zero_mean_mvn_logpdf(big.view(), y_all.view())?;

    Ok(SyntheticOracle {
        posterior_global,
        log_marginal,
        local_cov,
        local_xty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_obs(x: f64, y: f64) -> BranchDataset {
        BranchDataset::new(vec![BranchData::new(array![[x]], array![y]).unwrap()], 1).unwrap()
    }

    #[test]
    fn log_densities_at_origin() {
        let m = SyntheticModel::new(2);
        assert!((m.log_prior(array![0.0, 0.0].view()) + 1.837877).abs() < 1e-6);
        let m = SyntheticModel::new(1);
        let d = &one_obs(1.0, 0.0).branches[0];
        assert!((m.log_branch(array![0.0].view(), array![0.0].view(), d) + 1.837877).abs() < 1e-6);
    }

    #[test]
    fn branch_gradient_matches_finite_differences() {
        let m = SyntheticModel::new(3);
        let cfg = SyntheticConfig::uniform(3, 1, 4);
        let (ds, lat) = synthetic_forward_sample(&cfg, &RngStream::new(5, 0)).unwrap();
        let b = &ds.branches[0];
        let theta = lat.theta.clone() + 0.3;
        let z = lat.z[0].clone() - 0.2;
        let ev = m.log_branch_grad(theta.view(), z.view(), b);
        assert!((ev.value - m.log_branch(theta.view(), z.view(), b)).abs() < 1e-12);
        let h = 1e-5;
        for k in 0..3 {
            let mut tp = theta.clone();
            tp[k] += h;
            let mut tm = theta.clone();
            tm[k] -= h;
            let fd = (m.log_branch(tp.view(), z.view(), b) - m.log_branch(tm.view(), z.view(), b))
                / (2.0 * h);
            assert!((fd - ev.grad_theta[k]).abs() / ev.grad_theta[k].abs().max(1e-3) < 1e-5);
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (m.log_branch(theta.view(), zp.view(), b)
                - m.log_branch(theta.view(), zm.view(), b))
                / (2.0 * h);
            assert!((fd - ev.grad_z[k]).abs() / ev.grad_z[k].abs().max(1e-3) < 1e-5);
        }
    }

    #[test]
    fn zero_noise_gives_zero_data() {
        let cfg = SyntheticConfig::uniform(2, 3, 4);
        let (ds, lat) = forward_sample_with(&cfg, || 0.0).unwrap();
        assert!(lat.theta.iter().all(|&t| t == 0.0));
        assert!(lat.z.iter().flat_map(|z| z.iter()).all(|&t| t == 0.0));
        assert!(ds
            .branches
            .iter()
            .flat_map(|b| b.y.iter())
            .all(|&y| y == 0.0));
    }

    #[test]
    fn forward_sample_is_reproducible() {
        let cfg = SyntheticConfig::uniform(3, 4, 5);
        let a = synthetic_forward_sample(&cfg, &RngStream::new(9, 1)).unwrap();
        let b = synthetic_forward_sample(&cfg, &RngStream::new(9, 1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn observation_mean_is_zero() {
        // y at a fixed x: each draw is a fresh (θ, z, noise) realization
        let cfg = SyntheticConfig::uniform(1, 1, 1);
        let x = 0.7;
        let mut rng = RngStream::new(13, 0).rng();
        let draws = 100_000;
        let mut sum = 0.0;
        for _ in 0..draws {
            let mut k = 0;
            let (ds, _) = forward_sample_with(&cfg, || {
                k += 1;
                if k == 3 {
                    x
                } else {
                    StandardNormal.sample(&mut rng)
                }
            })
            .unwrap();
            sum += ds.branches[0].y[0];
        }
        let mean = sum / draws as f64;
        // Var(y) = 1 + 2x²
        let se = ((1.0 + 2.0 * x * x) / draws as f64).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn oracle_single_observation() {
        let o = synthetic_oracle(&one_obs(1.0, 0.0)).unwrap();
        let expected = -0.5 * (6.0 * std::f64::consts::PI).ln();
        assert!((o.log_marginal - expected).abs() < 1e-12);
        assert!((o.log_marginal + 1.468245).abs() < 1e-6);
    }

    #[test]
    fn oracle_without_information_returns_prior() {
        let o = synthetic_oracle(&one_obs(0.0, 0.7)).unwrap();
        assert!(o.posterior_global.mean[0].abs() < 1e-14);
        assert!((o.posterior_global.covariance()[[0, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn quadrature_over_z_recovers_branch_marginal() {
        // ∫ exp(log_branch(θ, z)) dz = N(y | xθ, 1 + x²) for one observation
        let m = SyntheticModel::new(1);
        let mut k = 0u64;
        for _ in 0..20 {
            k += 1;
            let f = |s: u64| ((s * 2654435761) % 1000) as f64 / 1000.0;
            let theta = 2.0 * f(k) - 1.0;
            let x = 3.0 * f(k + 7) - 1.5;
            let y = 4.0 * f(k + 13) - 2.0;
            let d = BranchData::new(array![[x]], array![y]).unwrap();
            let (lo, hi, n) = (-15.0, 15.0, 30_000);
            let h = (hi - lo) / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let z = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                integral += w * m
                    .log_branch(array![theta].view(), array![z].view(), &d)
                    .exp();
            }
            integral *= h;
            let var = 1.0 + x * x;
            let expected = (-(y - x * theta).powi(2) / (2.0 * var)).exp()
                / (2.0 * std::f64::consts::PI * var).sqrt();
            assert!(
                (integral - expected).abs() < 1e-6,
                "{integral} vs {expected}"
            );
        }
    }
}
