//! Gaussian variational families over `(θ, z_1..z_N)`.
//!
//! Three covariance structures (dense, block-diagonal, diagonal) combine with
//! three factorizations: a joint Gaussian over everything, a branch family
//! `q(θ) Π q(z_i | θ)` with free per-branch parameters, and an amortized
//! branch family whose local parameters come from a shared network.

mod branch;
mod joint;
mod local;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};

pub use branch::BranchParams;
pub use joint::{joint_to_branch, JointDraw, JointGaussianFamily};
pub use local::LocalParams;

use crate::amortize::ArchConfig;
use crate::error::{Error, Result};
use crate::math::{GaussianSpec, Scale, UnconstrainedChol};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Structure {
    Dense,
    Block,
    Diagonal,
}

impl Structure {
    pub const ALL: [Structure; 3] = [Structure::Dense, Structure::Block, Structure::Diagonal];

    pub fn as_str(self) -> &'static str {
        match self {
            Structure::Dense => "dense",
            Structure::Block => "block",
            Structure::Diagonal => "diag",
        }
    }

    /// Whether scale factors are diagonal.
    pub fn is_diagonal(self) -> bool {
        self == Structure::Diagonal
    }

    /// Whether branch conditionals carry a coupling matrix `A_i`.
    pub fn has_coupling(self) -> bool {
        self == Structure::Dense
    }

    /// Standard-normal factor of dimension `dim` with this structure's scale.
    pub fn standard_spec(self, dim: usize) -> GaussianSpec {
        if self.is_diagonal() {
            GaussianSpec::standard_diag(dim)
        } else {
            GaussianSpec::standard(dim)
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(Structure::Dense),
            "block" | "block-diagonal" | "block_diagonal" => Ok(Structure::Block),
            "diag" | "diagonal" => Ok(Structure::Diagonal),
            other => Err(Error::Precondition(format!("unknown structure `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    Joint,
    Branch,
    Amortized,
}

impl FamilyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyKind::Joint => "joint",
            FamilyKind::Branch => "branch",
            FamilyKind::Amortized => "amortized",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FamilyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "joint" => Ok(FamilyKind::Joint),
            "branch" => Ok(FamilyKind::Branch),
            "amortized" | "amortised" | "amort" => Ok(FamilyKind::Amortized),
            other => Err(Error::Precondition(format!("unknown family `{other}`"))),
        }
    }
}

/// Latent and covariate sizes a family is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub global: usize,
    pub local: usize,
    pub covariate: usize,
}

/// Number of free parameters of a family. Amortized counts use `arch` (or
/// the default architecture) with a scalar observation per row.
pub fn family_param_count(
    kind: FamilyKind,
    structure: Structure,
    num_branches: usize,
    dims: Dims,
) -> usize {
    family_param_count_with(kind, structure, num_branches, dims, &ArchConfig::default())
}

pub fn family_param_count_with(
    kind: FamilyKind,
    structure: Structure,
    num_branches: usize,
    dims: Dims,
    arch: &ArchConfig,
) -> usize {
    let diag = structure.is_diagonal();
    let global = dims.global + Scale::packed_len(diag, dims.global);
    match kind {
        FamilyKind::Joint => {
            let z = num_branches * dims.local;
            match structure {
                Structure::Dense => {
                    let d = dims.global + z;
                    d + UnconstrainedChol::packed_len(d)
                }
                Structure::Block => global + z + UnconstrainedChol::packed_len(z),
                Structure::Diagonal => 2 * (dims.global + z),
            }
        }
        FamilyKind::Branch => {
            global + num_branches * LocalParams::raw_len(structure, dims.local, dims.global)
        }
        FamilyKind::Amortized => {
            let out = LocalParams::raw_len(structure, dims.local, dims.global);
            global + arch.param_count(dims.covariate + 1, out)
        }
    }
}

/// Callback receiving a tensor's name, shape and values.
pub type TensorVisitor<'a> = dyn FnMut(&str, &[usize], &[f64]) + 'a;

/// Mutable counterpart of [`TensorVisitor`].
pub type TensorVisitorMut<'a> = dyn FnMut(&str, &[usize], &mut [f64]) + 'a;

/// Visits every parameter tensor under a stable name.
///
/// Gradients share the container type of the parameters they belong to, so
/// optimizers and checkpoints only need this traversal.
pub trait Params {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>);

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>);

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _, d| n += d.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.for_each_tensor(&mut |_, _, d| out.extend_from_slice(d));
        out
    }

    /// Multiplies every entry by `c`.
    fn scale_by(&mut self, c: f64) {
        self.for_each_tensor_mut(&mut |_, _, d| d.iter_mut().for_each(|v| *v *= c));
    }

    fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.num_params();
        if flat.len() != expected {
            return Err(Error::MalformedParameter {
                name: "flat parameter vector",
                expected,
                got: flat.len(),
            });
        }
        let mut off = 0;
        self.for_each_tensor_mut(&mut |_, _, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        Ok(())
    }
}

pub(crate) fn vec_slice(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("owned vectors are contiguous")
}

pub(crate) fn vec_slice_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("owned vectors are contiguous")
}

pub(crate) fn mat_slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice()
        .expect("parameter matrices are kept in standard layout")
}

pub(crate) fn mat_slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    if !a.is_standard_layout() {
        *a = a.as_standard_layout().into_owned();
    }
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn visit_spec(prefix: &str, spec: &GaussianSpec, f: &mut TensorVisitor<'_>) {
    f(
        &format!("{prefix}/mean"),
        &[spec.mean.len()],
        vec_slice(&spec.mean),
    );
    let raw = spec.scale.raw();
    f(&format!("{prefix}/scale"), &[raw.len()], vec_slice(raw));
}

pub(crate) fn visit_spec_mut(prefix: &str, spec: &mut GaussianSpec, f: &mut TensorVisitorMut<'_>) {
    let n = spec.mean.len();
    f(
        &format!("{prefix}/mean"),
        &[n],
        vec_slice_mut(&mut spec.mean),
    );
    let raw = spec.scale.raw_mut();
    let n = raw.len();
    f(&format!("{prefix}/scale"), &[n], vec_slice_mut(raw));
}

impl Params for GaussianSpec {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        visit_spec("global", self, f);
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        visit_spec_mut("global", self, f);
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    const D11: Dims = Dims {
        global: 1,
        local: 1,
        covariate: 1,
    };

    #[test]
    fn diagonal_joint_count() {
        let dims = Dims {
            global: 2,
            local: 3,
            covariate: 3,
        };
        assert_eq!(
            family_param_count(FamilyKind::Joint, Structure::Diagonal, 4, dims),
            2 * (2 + 12)
        );
    }

    #[test]
    fn branch_dense_smallest_case() {
        assert_eq!(
            family_param_count(FamilyKind::Branch, Structure::Dense, 1, D11),
            5
        );
    }

    #[test]
    fn branch_grows_and_amortized_is_flat() {
        for s in Structure::ALL {
            let mut prev = family_param_count(FamilyKind::Branch, s, 1, D11);
            let amort = family_param_count(FamilyKind::Amortized, s, 1, D11);
            for n in 2..20 {
                let c = family_param_count(FamilyKind::Branch, s, n, D11);
                assert!(c > prev);
                prev = c;
                assert_eq!(family_param_count(FamilyKind::Amortized, s, n, D11), amort);
            }
        }
    }

    #[test]
    fn counts_match_containers() {
        let dims = Dims {
            global: 3,
            local: 2,
            covariate: 2,
        };
        for s in Structure::ALL {
            let b = BranchParams::new(s, dims.global, dims.local, 5);
            assert_eq!(
                b.num_params(),
                family_param_count(FamilyKind::Branch, s, 5, dims)
            );
            let j = JointGaussianFamily::new(s, dims.global, dims.local, 5);
            assert_eq!(
                j.num_params(),
                family_param_count(FamilyKind::Joint, s, 5, dims)
            );
        }
    }

    #[test]
    fn structure_names_round_trip() {
        for s in Structure::ALL {
            assert_eq!(s.as_str().parse::<Structure>().unwrap(), s);
        }
        assert!("banded".parse::<Structure>().is_err());
    }
}
