#![allow(dead_code)]

use hbvi::data::{BranchData, BranchDataset};
use hbvi::families::{BranchParams, JointGaussianFamily, Params, Structure};
use hbvi::models::{synthetic_forward_sample, HbdModel, SyntheticConfig};
use hbvi::rng::RngStream;
use ndarray::{Array1, ArrayView1};
use rand::Rng;

pub fn synthetic(dim: usize, branches: usize, n: usize, seed: u64) -> BranchDataset {
    synthetic_forward_sample(
        &SyntheticConfig::uniform(dim, branches, n),
        &RngStream::new(seed, 0),
    )
    .unwrap()
    .0
}

pub fn randomize<P: Params>(p: &mut P, spread: f64, seed: u64) {
    let mut rng = RngStream::new(seed, 99).rng();
    let flat: Vec<f64> = (0..p.num_params())
        .map(|_| rng.random_range(-spread..spread))
        .collect();
    p.set_flat(&flat).unwrap();
}

pub fn random_branch(s: Structure, g: usize, l: usize, n: usize, seed: u64) -> BranchParams {
    let mut b = BranchParams::new(s, g, l, n);
    randomize(&mut b, 0.5, seed);
    b
}

pub fn random_joint(s: Structure, g: usize, l: usize, n: usize, seed: u64) -> JointGaussianFamily {
    let mut j = JointGaussianFamily::new(s, g, l, n);
    randomize(&mut j, 0.5, seed);
    j
}

pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    hbvi::estimators::mean_and_se(xs)
}

/// Central differences of `f` over every flat parameter of `p`, compared
/// against `grad` with a relative tolerance.
pub fn check_fd<P: Params + Clone>(p: &P, grad: &[f64], h: f64, tol: f64, f: impl Fn(&P) -> f64) {
    let flat = p.to_flat();
    assert_eq!(flat.len(), grad.len());
    for k in 0..flat.len() {
        let mut fp = flat.clone();
        fp[k] += h;
        let mut pp = p.clone();
        pp.set_flat(&fp).unwrap();
        let mut fm = flat.clone();
        fm[k] -= h;
        let mut pm = p.clone();
        pm.set_flat(&fm).unwrap();
        let fd = (f(&pp) - f(&pm)) / (2.0 * h);
        let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-3);
        assert!(
            rel < tol,
            "parameter {k}: finite difference {fd} vs analytic {}",
            grad[k]
        );
    }
}

/// Delegates to an inner model but reports itself as non-symmetric.
pub struct Asymmetric<M>(pub M);

impl<M: HbdModel> HbdModel for Asymmetric<M> {
    fn global_dim(&self) -> usize {
        self.0.global_dim()
    }
    fn local_dim(&self) -> usize {
        self.0.local_dim()
    }
    fn covariate_dim(&self) -> usize {
        self.0.covariate_dim()
    }
    fn is_symmetric(&self) -> bool {
        false
    }
    fn log_prior_grad(&self, theta: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        self.0.log_prior_grad(theta)
    }
    fn log_local_prior(&self, theta: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> f64 {
        self.0.log_local_prior(theta, z)
    }
    fn log_likelihood(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> f64 {
        self.0.log_likelihood(theta, z, data)
    }
    fn log_branch_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        z: ArrayView1<'_, f64>,
        data: &BranchData,
    ) -> hbvi::models::BranchEval {
        self.0.log_branch_grad(theta, z, data)
    }
    fn validate(&self, data: &BranchDataset) -> hbvi::Result<()> {
        self.0.validate(data)
    }
}
