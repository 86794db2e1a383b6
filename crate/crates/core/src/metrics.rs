//! Likelihood metrics of a fitted posterior from `K` fresh draws.
//!
//! With draws `(θᵏ, zᵏ) ~ q`:
//! - test log-likelihood: `log (1/K) Σ_k p(y_test | θᵏ, zᵏ)`
//! - train log-likelihood: `log (1/K) Σ_k p(y_train, θᵏ, zᵏ) / q(θᵏ, zᵏ)`
//! - train ELBO: `(1/K) Σ_k log p(y_train, θᵏ, zᵏ) / q(θᵏ, zᵏ)`

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::math::log_mean_exp;
use crate::models::HbdModel;
use crate::posterior::Posterior;
use crate::rng::RngStream;

pub const DEFAULT_K: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub k: usize,
    pub test_ll: f64,
    pub train_ll: f64,
    pub train_elbo: f64,
    /// Standard error of `train_elbo` over the `K` draws.
    pub train_elbo_se: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Branches left out because their local factor is undefined.
    pub excluded: Vec<usize>,
}

impl MetricReport {
    pub fn test_ll_per_rating(&self) -> f64 {
        self.test_ll / self.n_test as f64
    }

    pub fn train_ll_per_rating(&self) -> f64 {
        self.train_ll / self.n_train as f64
    }

    pub fn train_elbo_per_rating(&self) -> f64 {
        self.train_elbo / self.n_train as f64
    }

    /// Flat `key=value` lines.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// The same entries as a JSON object.
    pub fn to_json(&self) -> String {
        let body: Vec<String> = self
            .entries()
            .iter()
            .map(|(k, v)| format!("  \"{k}\": {v}"))
            .collect();
        format!("{{\n{}\n}}\n", body.join(",\n"))
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let num = |v: f64| {
            if v.is_finite() {
                format!("{v:?}")
            } else {
                "null".into()
            }
        };
        let excluded = format!(
            "[{}]",
            self.excluded
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        );
        vec![
            ("k", self.k.to_string()),
            ("test_ll", num(self.test_ll)),
            ("train_ll", num(self.train_ll)),
            ("train_elbo", num(self.train_elbo)),
            ("train_elbo_se", num(self.train_elbo_se)),
            ("n_train", self.n_train.to_string()),
            ("n_test", self.n_test.to_string()),
            ("test_ll_per_rating", num(self.test_ll_per_rating())),
            ("train_ll_per_rating", num(self.train_ll_per_rating())),
            ("train_elbo_per_rating", num(self.train_elbo_per_rating())),
            ("excluded_branches", excluded),
        ]
    }
}

/// Evaluates all metrics. Draw `k` uses `stream.child(k)`, so results do not
/// depend on the worker count. Amortized local factors are computed from
/// training observations only; branches with no training data are left out
/// of every metric with a warning.
pub fn evaluate(
    model: &dyn HbdModel,
    posterior: &Posterior,
    split: &SplitDataset,
    k: usize,
    stream: &RngStream,
) -> Result<MetricReport> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    if split.train.len() != split.test.len() {
        return Err(Error::DimensionMismatch {
            what: "test branches vs train branches",
            expected: split.train.len(),
            got: split.test.len(),
        });
    }
    let sampler = posterior.sampler(&split.train)?;
    let excluded = sampler.missing();
    for &i in &excluded {
        log::warn!("branch {i} has no training observations; excluded from metrics");
    }
    let included: Vec<usize> = (0..split.train.len())
        .filter(|i| !excluded.contains(i))
        .collect();
    let per_draw = |draw_index: usize| -> Result<(f64, f64)> {
        let d = sampler.draw(&stream.child(draw_index as u64))?;
        let theta = d.theta.view();
        let mut log_joint = model.log_prior(theta);
        let mut test = 0.0;
        for &i in &included {
            let z = d.z[i]
                .as_ref()
                .expect("included branches have draws")
                .view();
            log_joint += model.log_branch(theta, z, &split.train.branches[i]);
            test += model.log_likelihood(theta, z, &split.test.branches[i]);
        }
        Ok((log_joint - d.logq, test))
    };
    let draws: Vec<(f64, f64)> = if rayon::current_num_threads() > 1 {
        (0..k)
            .into_par_iter()
            .map(per_draw)
            .collect::<Result<_>>()?
    } else {
        (0..k).map(per_draw).collect::<Result<_>>()?
    };
    let ratios: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let tests: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let train_elbo = ratios.iter().sum::<f64>() / k as f64;
    let train_elbo_se = if k > 1 {
        let var = ratios.iter().map(|r| (r - train_elbo).powi(2)).sum::<f64>() / (k - 1) as f64;
        (var / k as f64).sqrt()
    } else {
        f64::NAN
    };
    let count =
        |ds: &crate::data::BranchDataset| included.iter().map(|&i| ds.branches[i].n()).sum();
    Ok(MetricReport {
        k,
        test_ll: log_mean_exp(&tests),
        train_ll: log_mean_exp(&ratios),
        train_elbo,
        train_elbo_se,
        n_train: count(&split.train),
        n_test: count(&split.test),
        excluded,
    })
}
