use ndarray::{s, Array1, Array2, ArrayView1};

use super::{
    mat_slice, mat_slice_mut, vec_slice, vec_slice_mut, visit_spec, visit_spec_mut,
    JointGaussianFamily, LocalParams, Params, Structure, TensorVisitor, TensorVisitorMut,
};
use crate::error::{Error, Result};
use crate::math::{mvn_sample, tril_unmap, Draw, GaussianSpec};
use crate::rng::RngStream;

/// Branch family `q_v(θ) Π_i q_{w_i}(z_i | θ)` with free local parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams {
    structure: Structure,
    pub global: GaussianSpec,
    pub locals: Vec<LocalParams>,
}

impl BranchParams {
    /// Fresh family: zero means, unit scales, zero couplings.
    pub fn new(
        structure: Structure,
        global_dim: usize,
        local_dim: usize,
        num_branches: usize,
    ) -> Self {
        Self {
            structure,
            global: structure.standard_spec(global_dim),
            locals: vec![LocalParams::standard(structure, local_dim, global_dim); num_branches],
        }
    }

    /// Assembles a family, checking the structure rules: couplings present
    /// exactly for dense, diagonal scales exactly for diagonal, shared dims.
    pub fn new_with(
        structure: Structure,
        global: GaussianSpec,
        locals: Vec<LocalParams>,
    ) -> Result<Self> {
        if global.scale.is_diagonal() != structure.is_diagonal() {
            return Err(Error::Precondition(format!(
                "global factor scale does not match {structure} structure"
            )));
        }
        let local_dim = locals.first().map_or(0, LocalParams::dim);
        for (i, w) in locals.iter().enumerate() {
            if w.structure() != structure {
                return Err(Error::Precondition(format!(
                    "branch {i} has {} layout, family is {structure}",
                    w.structure()
                )));
            }
            if w.dim() != local_dim || w.scale.dim() != local_dim {
                return Err(Error::DimensionMismatch {
                    what: "local dimension across branches",
                    expected: local_dim,
                    got: w.dim(),
                });
            }
            if let Some(a) = &w.coupling {
                if a.dim() != (local_dim, global.dim()) {
                    return Err(Error::DimensionMismatch {
                        what: "coupling columns vs global dim",
                        expected: global.dim(),
                        got: a.ncols(),
                    });
                }
            }
        }
        Ok(Self {
            structure,
            global,
            locals,
        })
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn num_branches(&self) -> usize {
        self.locals.len()
    }

    pub fn global_dim(&self) -> usize {
        self.global.dim()
    }

    pub fn local_dim(&self) -> usize {
        self.locals.first().map_or(0, LocalParams::dim)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            structure: self.structure,
            global: self.global.zeros_like(),
            locals: self.locals.iter().map(LocalParams::zeros_like).collect(),
        }
    }

    pub fn sample_global(&self, stream: &RngStream) -> Draw {
        mvn_sample(&self.global, stream)
    }

    pub fn sample_local(
        &self,
        i: usize,
        theta: ArrayView1<'_, f64>,
        stream: &RngStream,
    ) -> Result<Draw> {
        self.locals[i].sample(theta, stream)
    }

    /// `log q_v(θ) + Σ_i log q_{w_i}(z_i | θ)` by triangular solves.
    pub fn log_density(&self, theta: ArrayView1<'_, f64>, z: &[Array1<f64>]) -> Result<f64> {
        if z.len() != self.num_branches() {
            return Err(Error::DimensionMismatch {
                what: "local draws vs branches",
                expected: self.num_branches(),
                got: z.len(),
            });
        }
        let mut total = self.global.logpdf(theta)?;
        for (w, zi) in self.locals.iter().zip(z) {
            total += w.logpdf(theta, zi.view())?;
        }
        Ok(total)
    }

    /// Lower factor `L` and mean `m` of the implied joint over
    /// `[θ, z_1, …, z_N]`, so that `x = m + L ε`.
    pub fn implied_factor(&self) -> (Array1<f64>, Array2<f64>) {
        let g = self.global_dim();
        let l = self.local_dim();
        let total = g + l * self.num_branches();
        let mut mean = Array1::zeros(total);
        let mut factor = Array2::zeros((total, total));
        let lg = self.global.scale.factor();
        mean.slice_mut(s![..g]).assign(&self.global.mean);
        factor.slice_mut(s![..g, ..g]).assign(&lg);
        for (i, w) in self.locals.iter().enumerate() {
            let r = g + i * l;
            mean.slice_mut(s![r..r + l])
                .assign(&w.conditional_mean(self.global.mean.view()));
            if let Some(a) = &w.coupling {
                factor.slice_mut(s![r..r + l, ..g]).assign(&a.dot(&lg));
            }
            factor
                .slice_mut(s![r..r + l, r..r + l])
                .assign(&w.scale.factor());
        }
        (mean, factor)
    }

    /// Mean and covariance of the implied joint over `[θ, z_1, …, z_N]`.
    pub fn implied_moments(&self) -> (Array1<f64>, Array2<f64>) {
        let (mean, l) = self.implied_factor();
        let cov = l.dot(&l.t());
        (mean, cov)
    }

    /// The same distribution as a dense joint family.
    pub fn to_joint(&self) -> Result<JointGaussianFamily> {
        let (mean, l) = self.implied_factor();
        let chol = tril_unmap(l.view(), self.global.scale.gamma())?;
        JointGaussianFamily::dense(
            self.global_dim(),
            self.local_dim(),
            self.num_branches(),
            GaussianSpec::new(mean, crate::math::Scale::Tril(chol))?,
        )
    }
}

impl Params for BranchParams {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        visit_spec("global", &self.global, f);
        for (i, w) in self.locals.iter().enumerate() {
            f(
                &format!("local/{i}/mean"),
                &[w.mean.len()],
                vec_slice(&w.mean),
            );
            if let Some(a) = &w.coupling {
                f(
                    &format!("local/{i}/coupling"),
                    &[a.nrows(), a.ncols()],
                    mat_slice(a),
                );
            }
            let raw = w.scale.raw();
            f(&format!("local/{i}/scale"), &[raw.len()], vec_slice(raw));
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        visit_spec_mut("global", &mut self.global, f);
        for (i, w) in self.locals.iter_mut().enumerate() {
            let n = w.mean.len();
            f(&format!("local/{i}/mean"), &[n], vec_slice_mut(&mut w.mean));
            if let Some(a) = &mut w.coupling {
                let shape = [a.nrows(), a.ncols()];
                f(&format!("local/{i}/coupling"), &shape, mat_slice_mut(a));
            }
            let raw = w.scale.raw_mut();
            let n = raw.len();
            f(&format!("local/{i}/scale"), &[n], vec_slice_mut(raw));
        }
    }
}
