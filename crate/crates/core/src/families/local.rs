use ndarray::{s, Array1, Array2, ArrayView1};

use super::Structure;
use crate::error::{Error, Result};
use crate::math::{Draw, GaussianSpec, Scale, LN_2PI};
use crate::rng::RngStream;

/// Parameters `w_i` of one branch conditional
/// `q(z_i | θ) = N(μ_i + A_i θ, L_i L_iᵀ)`.
///
/// `coupling` (`A_i`, shape `local × global`) is present exactly for the
/// dense structure.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalParams {
    pub mean: Array1<f64>,
    pub coupling: Option<Array2<f64>>,
    pub scale: Scale,
}

impl LocalParams {
    /// Zero mean, zero coupling, unit scale.
    pub fn standard(structure: Structure, local_dim: usize, global_dim: usize) -> Self {
        Self {
            mean: Array1::zeros(local_dim),
            coupling: structure
                .has_coupling()
                .then(|| Array2::zeros((local_dim, global_dim))),
            scale: structure.standard_spec(local_dim).scale,
        }
    }

    /// Length of the flat raw layout `[mean | A row-major | scale raw]`.
    pub fn raw_len(structure: Structure, local_dim: usize, global_dim: usize) -> usize {
        let a = if structure.has_coupling() {
            local_dim * global_dim
        } else {
            0
        };
        local_dim + a + Scale::packed_len(structure.is_diagonal(), local_dim)
    }

    /// Unpacks the flat raw layout produced by [`LocalParams::to_raw`].
    pub fn from_raw(
        structure: Structure,
        local_dim: usize,
        global_dim: usize,
        raw: ArrayView1<'_, f64>,
        gamma: f64,
    ) -> Result<Self> {
        let expected = Self::raw_len(structure, local_dim, global_dim);
        if raw.len() != expected {
            return Err(Error::MalformedParameter {
                name: "local raw vector",
                expected,
                got: raw.len(),
            });
        }
        let mean = raw.slice(s![..local_dim]).to_owned();
        let mut off = local_dim;
        let coupling = if structure.has_coupling() {
            let n = local_dim * global_dim;
            let a = raw.slice(s![off..off + n]).to_owned();
            off += n;
            Some(
                a.into_shape_with_order((local_dim, global_dim))
                    .expect("length checked"),
            )
        } else {
            None
        };
        let scale = Scale::from_raw(
            structure.is_diagonal(),
            local_dim,
            raw.slice(s![off..]).to_owned(),
            gamma,
        )?;
        Ok(Self {
            mean,
            coupling,
            scale,
        })
    }

    pub fn to_raw(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.mean.iter());
        if let Some(a) = &self.coupling {
            out.extend(a.iter());
        }
        out.extend(self.scale.raw().iter());
        Array1::from(out)
    }

    pub fn structure(&self) -> Structure {
        match (&self.coupling, self.scale.is_diagonal()) {
            (Some(_), _) => Structure::Dense,
            (None, false) => Structure::Block,
            (None, true) => Structure::Diagonal,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.coupling.as_ref().map_or(0, |a| a.len()) + self.scale.raw().len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mean: Array1::zeros(self.mean.len()),
            coupling: self.coupling.as_ref().map(|a| Array2::zeros(a.raw_dim())),
            scale: self.scale.zeros_like(),
        }
    }

    /// `μ_i + A_i θ`.
    pub fn conditional_mean(&self, theta: ArrayView1<'_, f64>) -> Array1<f64> {
        match &self.coupling {
            Some(a) => &self.mean + &a.dot(&theta),
            None => self.mean.clone(),
        }
    }

    /// The conditional `q(z_i | θ)` as a standalone Gaussian.
    pub fn conditional(&self, theta: ArrayView1<'_, f64>) -> GaussianSpec {
        GaussianSpec {
            mean: self.conditional_mean(theta),
            scale: self.scale.clone(),
        }
    }

    fn check_theta(&self, theta: ArrayView1<'_, f64>) -> Result<()> {
        if let Some(a) = &self.coupling {
            if a.ncols() != theta.len() {
                return Err(Error::DimensionMismatch {
                    what: "global draw vs coupling columns",
                    expected: a.ncols(),
                    got: theta.len(),
                });
            }
        }
        Ok(())
    }

    /// `z_i = μ_i + A_i θ + L_i ε` with its log-density from the same `ε`.
    pub fn transform(&self, theta: ArrayView1<'_, f64>, eps: ArrayView1<'_, f64>) -> Result<Draw> {
        self.check_theta(theta)?;
        if eps.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "local noise",
                expected: self.dim(),
                got: eps.len(),
            });
        }
        let value = self.conditional_mean(theta) + self.scale.apply(eps);
        let logpdf =
            -0.5 * eps.dot(&eps) - self.scale.log_diag_sum() - 0.5 * self.dim() as f64 * LN_2PI;
        Ok(Draw {
            value,
            eps: eps.to_owned(),
            logpdf,
        })
    }

    pub fn sample(&self, theta: ArrayView1<'_, f64>, stream: &RngStream) -> Result<Draw> {
        let eps = Array1::from(stream.standard_normals(self.dim()));
        self.transform(theta, eps.view())
    }

    /// `log q(z_i | θ)` by triangular solve.
    pub fn logpdf(&self, theta: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<f64> {
        self.check_theta(theta)?;
        self.conditional(theta).logpdf(z)
    }

    /// Adds the total-gradient contribution of one local draw to `grad` and
    /// returns the extra gradient flowing to `θ` through the coupling,
    /// `A_iᵀ g_z`.
    ///
    /// `g_z` is `∂f/∂z_i` (already scaled) and `w` the weight of
    /// `−log q(z_i | θ)` in the objective.
    pub fn accumulate_grad(
        &self,
        theta: ArrayView1<'_, f64>,
        eps: ArrayView1<'_, f64>,
        g_z: ArrayView1<'_, f64>,
        w: f64,
        grad: &mut LocalParams,
    ) -> Option<Array1<f64>> {
        grad.mean += &g_z;
        self.scale.accumulate_grad(eps, g_z, w, &mut grad.scale);
        match (&self.coupling, &mut grad.coupling) {
            (Some(a), Some(ga)) => {
                for (r, &g) in g_z.iter().enumerate() {
                    ga.row_mut(r).scaled_add(g, &theta);
                }
                Some(a.t().dot(&g_z))
            }
            (None, None) => None,
            _ => panic!("gradient container has a different coupling layout"),
        }
    }
}
