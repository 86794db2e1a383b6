//! A trained variational posterior of any family kind, with uniform
//! sampling, estimation and parameter traversal.

use ndarray::Array1;

use crate::amortize::{AmortizedFamily, ArchConfig};
use crate::data::BranchDataset;
use crate::error::{Error, Result};
use crate::estimators::{
    amortized_elbo, branch_elbo, joint_elbo, subsampled_branch_elbo, ElboEstimate, MinibatchSampler,
};
use crate::families::{
    BranchParams, Dims, FamilyKind, JointGaussianFamily, LocalParams, Params, Structure,
    TensorVisitor, TensorVisitorMut,
};
use crate::math::GaussianSpec;
use crate::models::HbdModel;
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub enum Posterior {
    Joint(JointGaussianFamily),
    Branch(BranchParams),
    Amortized(AmortizedFamily),
}

/// One draw from the full variational distribution. `z[i]` is `None` for
/// branches whose local factor is undefined (amortized, no training data).
#[derive(Clone, Debug)]
pub struct PosteriorDraw {
    pub theta: Array1<f64>,
    pub z: Vec<Option<Array1<f64>>>,
    pub logq: f64,
}

impl Posterior {
    /// Fresh family; only amortized families consume `stream`.
    pub fn init(
        kind: FamilyKind,
        structure: Structure,
        dims: Dims,
        num_branches: usize,
        arch: &ArchConfig,
        stream: &RngStream,
    ) -> Result<Self> {
        Ok(match kind {
            FamilyKind::Joint => Posterior::Joint(JointGaussianFamily::new(
                structure,
                dims.global,
                dims.local,
                num_branches,
            )),
            FamilyKind::Branch => Posterior::Branch(BranchParams::new(
                structure,
                dims.global,
                dims.local,
                num_branches,
            )),
            FamilyKind::Amortized => Posterior::Amortized(AmortizedFamily::init(
                arch,
                structure,
                dims.global,
                dims.local,
                dims.covariate,
                stream,
            )?),
        })
    }

    pub fn kind(&self) -> FamilyKind {
        match self {
            Posterior::Joint(_) => FamilyKind::Joint,
            Posterior::Branch(_) => FamilyKind::Branch,
            Posterior::Amortized(_) => FamilyKind::Amortized,
        }
    }

    pub fn structure(&self) -> Structure {
        match self {
            Posterior::Joint(j) => j.structure(),
            Posterior::Branch(b) => b.structure(),
            Posterior::Amortized(a) => a.structure(),
        }
    }

    pub fn global_dim(&self) -> usize {
        match self {
            Posterior::Joint(j) => j.global_dim(),
            Posterior::Branch(b) => b.global_dim(),
            Posterior::Amortized(a) => a.global.dim(),
        }
    }

    pub fn local_dim(&self) -> usize {
        match self {
            Posterior::Joint(j) => j.local_dim(),
            Posterior::Branch(b) => b.local_dim(),
            Posterior::Amortized(a) => a.net.local_dim(),
        }
    }

    /// Branch count the family is tied to; `None` for amortized families.
    pub fn num_branches(&self) -> Option<usize> {
        match self {
            Posterior::Joint(j) => Some(j.num_branches()),
            Posterior::Branch(b) => Some(b.num_branches()),
            Posterior::Amortized(_) => None,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            Posterior::Joint(j) => Posterior::Joint(j.zeros_like()),
            Posterior::Branch(b) => Posterior::Branch(b.zeros_like()),
            Posterior::Amortized(a) => Posterior::Amortized(a.zeros_like()),
        }
    }

    /// ELBO estimate and gradient. Joint families require a full batch.
    pub fn estimate(
        &self,
        model: &dyn HbdModel,
        data: &BranchDataset,
        sampler: &MinibatchSampler,
        stream: &RngStream,
        n_mc: usize,
    ) -> Result<(ElboEstimate, Posterior)> {
        match self {
            Posterior::Joint(j) => {
                if sampler.batch_size() != sampler.num_branches() {
                    return Err(Error::Precondition(
                        "joint families cannot be subsampled".into(),
                    ));
                }
                let e = joint_elbo(model, j, data, stream, n_mc)?;
                Ok((e.elbo, Posterior::Joint(e.grad)))
            }
            Posterior::Branch(b) => {
                let e = if sampler.batch_size() == sampler.num_branches() {
                    branch_elbo(model, b, data, stream, n_mc)?
                } else {
                    subsampled_branch_elbo(model, b, data, sampler, stream, n_mc)?
                };
                Ok((e.elbo, Posterior::Branch(e.grad)))
            }
            Posterior::Amortized(a) => {
                let e = amortized_elbo(model, a, data, sampler, stream, n_mc)?;
                Ok((e.elbo, Posterior::Amortized(e.grad)))
            }
        }
    }

    /// Prepares repeated sampling given the training data (which defines
    /// amortized local factors).
    pub fn sampler<'a>(&'a self, train: &BranchDataset) -> Result<PosteriorSampler<'a>> {
        match self {
            Posterior::Joint(j) => {
                check_len(train, j.num_branches())?;
                Ok(PosteriorSampler::Joint(j))
            }
            Posterior::Branch(b) => {
                check_len(train, b.num_branches())?;
                Ok(PosteriorSampler::Branch {
                    global: &b.global,
                    locals: b.locals.iter().map(|w| Some(w.clone())).collect(),
                })
            }
            Posterior::Amortized(a) => {
                let locals = train
                    .branches
                    .iter()
                    .map(|d| {
                        if d.is_empty() {
                            Ok(None)
                        } else {
                            a.net.forward(d).map(|(w, _)| Some(w))
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(PosteriorSampler::Branch {
                    global: &a.global,
                    locals,
                })
            }
        }
    }
}

fn check_len(data: &BranchDataset, expected: usize) -> Result<()> {
    if data.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "dataset branches vs family branches",
            expected,
            got: data.len(),
        });
    }
    Ok(())
}

/// Draws from a posterior with local factors fixed up front.
pub enum PosteriorSampler<'a> {
    Joint(&'a JointGaussianFamily),
    Branch {
        global: &'a GaussianSpec,
        locals: Vec<Option<LocalParams>>,
    },
}

impl PosteriorSampler<'_> {
    /// Same noise layout as the estimators: `θ` from `stream.child(0)`,
    /// branch `i` from `stream.child(i + 1)`.
    pub fn draw(&self, stream: &RngStream) -> Result<PosteriorDraw> {
        match self {
            PosteriorSampler::Joint(j) => {
                let d = j.sample(stream);
                Ok(PosteriorDraw {
                    theta: d.theta,
                    z: d.z.into_iter().map(Some).collect(),
                    logq: d.logq,
                })
            }
            PosteriorSampler::Branch { global, locals } => {
                let g = global
                    .transform(Array1::from(stream.child(0).standard_normals(global.dim())).view());
                let mut logq = g.logpdf;
                let mut z = Vec::with_capacity(locals.len());
                for (i, w) in locals.iter().enumerate() {
                    match w {
                        Some(w) => {
                            let d = w.sample(g.value.view(), &stream.child(i as u64 + 1))?;
                            logq += d.logpdf;
                            z.push(Some(d.value));
                        }
                        None => z.push(None),
                    }
                }
                Ok(PosteriorDraw {
                    theta: g.value,
                    z,
                    logq,
                })
            }
        }
    }

    /// Branches without a local factor.
    pub fn missing(&self) -> Vec<usize> {
        match self {
            PosteriorSampler::Joint(_) => vec![],
            PosteriorSampler::Branch { locals, .. } => locals
                .iter()
                .enumerate()
                .filter(|(_, w)| w.is_none())
                .map(|(i, _)| i)
                .collect(),
        }
    }
}

impl Params for Posterior {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        match self {
            Posterior::Joint(j) => j.for_each_tensor(f),
            Posterior::Branch(b) => b.for_each_tensor(f),
            Posterior::Amortized(a) => a.for_each_tensor(f),
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        match self {
            Posterior::Joint(j) => j.for_each_tensor_mut(f),
            Posterior::Branch(b) => b.for_each_tensor_mut(f),
            Posterior::Amortized(a) => a.for_each_tensor_mut(f),
        }
    }
}
