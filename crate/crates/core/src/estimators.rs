//! Reparameterized ELBO estimators and their total gradients.
//!
//! Every estimator averages `n_mc` single-sample estimates. Copy `c` draws
//! from `stream.child(c)`; inside a copy, `θ` uses child `0` and branch `i`
//! uses child `i + 1`, so results do not depend on evaluation order or on
//! the number of worker threads. Per-branch terms are reduced in ascending
//! branch order.

use ndarray::Array1;
use rand::seq::index;
use rayon::prelude::*;

use crate::amortize::{AmortizedFamily, NetTape};
use crate::data::BranchDataset;
use crate::error::{Error, Result};
use crate::families::{BranchParams, JointGaussianFamily, LocalParams, Params};
use crate::math::GaussianSpec;
use crate::models::HbdModel;
use crate::rng::RngStream;

/// Monte Carlo copies per estimate unless configured otherwise.
pub const DEFAULT_N_MC: usize = 10;

/// Stream key reserved for minibatch selection.
const BATCH_KEY: u64 = u64::MAX;

/// An ELBO estimate in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub n_mc: usize,
    /// Branch indices that entered the estimate, ascending.
    pub batch: Vec<usize>,
    /// The single-sample estimates averaged into `value`.
    pub copies: Vec<f64>,
}

impl ElboEstimate {
    /// Standard error of `value` from the spread of the copies.
    pub fn std_err(&self) -> f64 {
        let n = self.copies.len();
        if n < 2 {
            return f64::NAN;
        }
        let var = self
            .copies
            .iter()
            .map(|c| (c - self.value).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        (var / n as f64).sqrt()
    }
}

/// Estimate together with the gradient of the estimate with respect to the
/// family parameters, in the family's own container type.
#[derive(Clone, Debug)]
pub struct Estimate<G> {
    pub elbo: ElboEstimate,
    pub grad: G,
}

/// Uniform sampling of branch indices without replacement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MinibatchSampler {
    num_branches: usize,
    batch_size: usize,
}

impl MinibatchSampler {
    pub fn new(num_branches: usize, batch_size: usize) -> Result<Self> {
        if batch_size == 0 || batch_size > num_branches {
            return Err(Error::Precondition(format!(
                "batch size must be in 1..={num_branches}, got {batch_size}"
            )));
        }
        Ok(Self {
            num_branches,
            batch_size,
        })
    }

    /// Sampler whose batch is always every branch.
    pub fn full(num_branches: usize) -> Self {
        Self {
            num_branches,
            batch_size: num_branches,
        }
    }

    pub fn num_branches(&self) -> usize {
        self.num_branches
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Reweighting factor `N / |B|` of the local terms.
    pub fn scale(&self) -> f64 {
        if self.batch_size == 0 {
            1.0
        } else {
            self.num_branches as f64 / self.batch_size as f64
        }
    }

    /// Sorted batch. A full batch is `0..N` and consumes no randomness.
    pub fn sample(&self, stream: &RngStream) -> Vec<usize> {
        if self.batch_size == self.num_branches {
            return (0..self.num_branches).collect();
        }
        let mut rng = stream.rng();
        let mut b = index::sample(&mut rng, self.num_branches, self.batch_size).into_vec();
        b.sort_unstable();
        b
    }
}

/// Maps `f` over `items`, in parallel when a pool with several threads is
/// active. Output order always follows `items`.
fn map_ordered<T, F>(items: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if rayon::current_num_threads() > 1 && items.len() > 1 {
        items.par_iter().map(|&i| f(i)).collect()
    } else {
        items.iter().map(|&i| f(i)).collect()
    }
}

fn check_branches(data: &BranchDataset, expected: usize) -> Result<()> {
    if data.len() != expected {
        return Err(Error::DimensionMismatch {
            what: "dataset branches vs family branches",
            expected,
            got: data.len(),
        });
    }
    Ok(())
}

fn check_finite(v: f64, what: &'static str, branch: Option<usize>) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, branch })
    }
}

fn noise(stream: &RngStream, n: usize) -> Array1<f64> {
    Array1::from(stream.standard_normals(n))
}

fn finish<G: Params>(copies: Vec<f64>, batch: Vec<usize>, mut grad: G) -> Result<Estimate<G>> {
    let n_mc = copies.len();
    let value = copies.iter().sum::<f64>() / n_mc as f64;
    check_finite(value, "ELBO estimate", None)?;
    grad.scale_by(1.0 / n_mc as f64);
    Ok(Estimate {
        elbo: ElboEstimate {
            value,
            n_mc,
            batch,
            copies,
        },
        grad,
    })
}

fn check_n_mc(n_mc: usize) -> Result<()> {
    if n_mc == 0 {
        return Err(Error::Precondition("n_mc must be positive".into()));
    }
    Ok(())
}

/// `log p(θ, z, y | x) − log q(θ, z)` averaged over joint draws.
pub fn joint_elbo(
    model: &dyn HbdModel,
    fam: &JointGaussianFamily,
    data: &BranchDataset,
    stream: &RngStream,
    n_mc: usize,
) -> Result<Estimate<JointGaussianFamily>> {
    check_n_mc(n_mc)?;
    check_branches(data, fam.num_branches())?;
    let mut grad = fam.zeros_like();
    let mut copies = Vec::with_capacity(n_mc);
    let all: Vec<usize> = (0..data.len()).collect();
    for c in 0..n_mc {
        let draw = fam.sample(&stream.child(c as u64));
        let (lp, mut g_theta) = model.log_prior_grad(draw.theta.view());
        check_finite(lp, "log prior", None)?;
        let evals = map_ordered(&all, |i| {
            let ev = model.log_branch_grad(draw.theta.view(), draw.z[i].view(), &data.branches[i]);
            check_finite(ev.value, "branch log density", Some(i))?;
            Ok(ev)
        })?;
        let mut value = lp;
        let mut g_z = Vec::with_capacity(evals.len());
        for ev in evals {
            value += ev.value;
            g_theta += &ev.grad_theta;
            g_z.push(ev.grad_z);
        }
        fam.accumulate_grad(&draw, g_theta.view(), &g_z, 1.0, &mut grad);
        copies.push(value - draw.logq);
    }
    finish(copies, all, grad)
}

struct BranchTerm {
    value: f64,
    grad: LocalParams,
    grad_theta: Array1<f64>,
}

struct CoreOutput {
    copies: Vec<f64>,
    global: GaussianSpec,
    /// Local gradients summed over copies, aligned with the batch.
    locals: Vec<LocalParams>,
}

/// Shared body of the branch-family estimators. `locals[k]` parameterizes
/// branch `batch[k]`; local terms are multiplied by `scale`.
#[allow(clippy::too_many_arguments)]
fn branch_core(
    model: &dyn HbdModel,
    global: &GaussianSpec,
    locals: &[&LocalParams],
    data: &BranchDataset,
    batch: &[usize],
    scale: f64,
    stream: &RngStream,
    n_mc: usize,
) -> Result<CoreOutput> {
    check_n_mc(n_mc)?;
    let mut grad_global = global.zeros_like();
    let mut grad_locals: Vec<LocalParams> = locals.iter().map(|w| w.zeros_like()).collect();
    let mut copies = Vec::with_capacity(n_mc);
    let positions: Vec<usize> = (0..batch.len()).collect();
    for c in 0..n_mc {
        let cs = stream.child(c as u64);
        let eps = noise(&cs.child(0), global.dim());
        let gdraw = global.transform(eps.view());
        let theta = gdraw.value.view();
        let (lp, mut g_theta) = model.log_prior_grad(theta);
        check_finite(lp, "log prior", None)?;
        let terms = map_ordered(&positions, |k| {
            let i = batch[k];
            let w = locals[k];
            let eps = noise(&cs.child(i as u64 + 1), w.dim());
            let ldraw = w.transform(theta, eps.view())?;
            let ev = model.log_branch_grad(theta, ldraw.value.view(), &data.branches[i]);
            check_finite(ev.value, "branch log density", Some(i))?;
            let mut grad = w.zeros_like();
            let g_z = ev.grad_z * scale;
            let mut grad_theta = ev.grad_theta * scale;
            if let Some(extra) = w.accumulate_grad(theta, eps.view(), g_z.view(), scale, &mut grad)
            {
                grad_theta += &extra;
            }
            Ok(BranchTerm {
                value: ev.value - ldraw.logpdf,
                grad,
                grad_theta,
            })
        })?;
        let mut local_sum = 0.0;
        for (t, acc) in terms.into_iter().zip(grad_locals.iter_mut()) {
            local_sum += t.value;
            g_theta += &t.grad_theta;
            add_local(acc, &t.grad);
        }
        global.accumulate_grad(eps.view(), g_theta.view(), 1.0, &mut grad_global);
        copies.push(lp - gdraw.logpdf + scale * local_sum);
    }
    Ok(CoreOutput {
        copies,
        global: grad_global,
        locals: grad_locals,
    })
}

fn add_local(acc: &mut LocalParams, g: &LocalParams) {
    acc.mean += &g.mean;
    if let (Some(a), Some(b)) = (&mut acc.coupling, &g.coupling) {
        *a += b;
    }
    *acc.scale.raw_mut() += g.scale.raw();
}

/// Branch-family ELBO over all branches; one `θ` draw per copy is shared by
/// every branch.
pub fn branch_elbo(
    model: &dyn HbdModel,
    params: &BranchParams,
    data: &BranchDataset,
    stream: &RngStream,
    n_mc: usize,
) -> Result<Estimate<BranchParams>> {
    subsampled_branch_elbo(
        model,
        params,
        data,
        &MinibatchSampler::full(params.num_branches()),
        stream,
        n_mc,
    )
}

/// Branch-family ELBO from a minibatch drawn once per call and shared by all
/// copies; local terms are reweighted by `N / |B|`.
pub fn subsampled_branch_elbo(
    model: &dyn HbdModel,
    params: &BranchParams,
    data: &BranchDataset,
    sampler: &MinibatchSampler,
    stream: &RngStream,
    n_mc: usize,
) -> Result<Estimate<BranchParams>> {
    check_branches(data, params.num_branches())?;
    check_branches(data, sampler.num_branches())?;
    let batch = sampler.sample(&stream.child(BATCH_KEY));
    let locals: Vec<&LocalParams> = batch.iter().map(|&i| &params.locals[i]).collect();
    let out = branch_core(
        model,
        &params.global,
        &locals,
        data,
        &batch,
        sampler.scale(),
        stream,
        n_mc,
    )?;
    let mut grad = params.zeros_like();
    grad.global = out.global;
    for (&i, g) in batch.iter().zip(out.locals) {
        grad.locals[i] = g;
    }
    finish(out.copies, batch, grad)
}

/// Amortized branch-family ELBO: local parameters of each sampled branch
/// come from the network, computed once per call and shared by all copies.
pub fn amortized_elbo(
    model: &dyn HbdModel,
    fam: &AmortizedFamily,
    data: &BranchDataset,
    sampler: &MinibatchSampler,
    stream: &RngStream,
    n_mc: usize,
) -> Result<Estimate<AmortizedFamily>> {
    if !model.is_symmetric() {
        return Err(Error::Precondition(
            "amortized families need a symmetric model".into(),
        ));
    }
    check_branches(data, sampler.num_branches())?;
    let batch = sampler.sample(&stream.child(BATCH_KEY));
    let outputs: Vec<(LocalParams, NetTape)> = map_ordered(&batch, |i| {
        fam.net.forward(&data.branches[i]).map_err(|e| match e {
            Error::InvalidData(msg) => Error::InvalidData(format!("branch {i}: {msg}")),
            other => other,
        })
    })?;
    let locals: Vec<&LocalParams> = outputs.iter().map(|(w, _)| w).collect();
    let out = branch_core(
        model,
        &fam.global,
        &locals,
        data,
        &batch,
        sampler.scale(),
        stream,
        n_mc,
    )?;
    let mut grad = fam.zeros_like();
    grad.global = out.global;
    for ((_, tape), g) in outputs.iter().zip(&out.locals) {
        fam.net.backward(tape, g.to_raw().view(), &mut grad.net)?;
    }
    finish(out.copies, batch, grad)
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
