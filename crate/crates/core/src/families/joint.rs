use ndarray::{s, Array1, Array2, ArrayView1};

use super::{
    visit_spec, visit_spec_mut, BranchParams, LocalParams, Params, Structure, TensorVisitor,
    TensorVisitorMut,
};
use crate::error::{Error, Result};
use crate::math::{linalg, tril_unmap, DiagScale, GaussianSpec, Scale, UnconstrainedChol};
use crate::rng::RngStream;

/// Gaussian over the full latent vector `[θ, z_1, …, z_N]`.
///
/// Dense and diagonal structures hold one factor over everything;
/// block-diagonal holds independent factors for `θ` and for all of `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointGaussianFamily {
    structure: Structure,
    global_dim: usize,
    local_dim: usize,
    num_branches: usize,
    blocks: Vec<GaussianSpec>,
}

/// One reparameterized joint draw; `eps` holds the noise of each factor.
#[derive(Clone, Debug)]
pub struct JointDraw {
    pub theta: Array1<f64>,
    pub z: Vec<Array1<f64>>,
    pub eps: Vec<Array1<f64>>,
    pub logq: f64,
}

impl JointGaussianFamily {
    /// Standard-normal family of the given structure.
    pub fn new(
        structure: Structure,
        global_dim: usize,
        local_dim: usize,
        num_branches: usize,
    ) -> Self {
        let z = local_dim * num_branches;
        let blocks = match structure {
            Structure::Block => vec![
                GaussianSpec::standard(global_dim),
                GaussianSpec::standard(z),
            ],
            s => vec![s.standard_spec(global_dim + z)],
        };
        Self {
            structure,
            global_dim,
            local_dim,
            num_branches,
            blocks,
        }
    }

    pub fn dense(
        global_dim: usize,
        local_dim: usize,
        num_branches: usize,
        spec: GaussianSpec,
    ) -> Result<Self> {
        Self::from_blocks(
            Structure::Dense,
            global_dim,
            local_dim,
            num_branches,
            vec![spec],
        )
    }

    /// Builds a family from its factors, checking their number, sizes and
    /// scale kinds against `structure`.
    pub fn from_blocks(
        structure: Structure,
        global_dim: usize,
        local_dim: usize,
        num_branches: usize,
        blocks: Vec<GaussianSpec>,
    ) -> Result<Self> {
        let z = local_dim * num_branches;
        let expected: Vec<(usize, bool)> = match structure {
            Structure::Dense => vec![(global_dim + z, false)],
            Structure::Block => vec![(global_dim, false), (z, false)],
            Structure::Diagonal => vec![(global_dim + z, true)],
        };
        if blocks.len() != expected.len() {
            return Err(Error::MalformedParameter {
                name: "joint factor count",
                expected: expected.len(),
                got: blocks.len(),
            });
        }
        for (b, (dim, diag)) in blocks.iter().zip(expected) {
            if b.dim() != dim {
                return Err(Error::DimensionMismatch {
                    what: "joint factor dimension",
                    expected: dim,
                    got: b.dim(),
                });
            }
            if b.scale.is_diagonal() != diag {
                return Err(Error::Precondition(format!(
                    "joint factor scale does not match {structure} structure"
                )));
            }
        }
        Ok(Self {
            structure,
            global_dim,
            local_dim,
            num_branches,
            blocks,
        })
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn num_branches(&self) -> usize {
        self.num_branches
    }

    pub fn total_dim(&self) -> usize {
        self.global_dim + self.local_dim * self.num_branches
    }

    pub fn blocks(&self) -> &[GaussianSpec] {
        &self.blocks
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(GaussianSpec::zeros_like).collect(),
            ..*self
        }
    }

    fn split(&self, full: ArrayView1<'_, f64>) -> (Array1<f64>, Vec<Array1<f64>>) {
        let g = self.global_dim;
        let l = self.local_dim;
        let theta = full.slice(s![..g]).to_owned();
        let z = (0..self.num_branches)
            .map(|i| full.slice(s![g + i * l..g + (i + 1) * l]).to_owned())
            .collect();
        (theta, z)
    }

    fn assemble(&self, theta: ArrayView1<'_, f64>, z: &[Array1<f64>]) -> Result<Array1<f64>> {
        if theta.len() != self.global_dim
            || z.len() != self.num_branches
            || z.iter().any(|zi| zi.len() != self.local_dim)
        {
            return Err(Error::DimensionMismatch {
                what: "joint point",
                expected: self.total_dim(),
                got: theta.len() + z.iter().map(|zi| zi.len()).sum::<usize>(),
            });
        }
        let mut out = Vec::with_capacity(self.total_dim());
        out.extend(theta.iter());
        for zi in z {
            out.extend(zi.iter());
        }
        Ok(Array1::from(out))
    }

    /// Maps per-factor noise to a joint draw with its log-density.
    pub fn transform(&self, eps: &[Array1<f64>]) -> JointDraw {
        let draws: Vec<_> = self
            .blocks
            .iter()
            .zip(eps)
            .map(|(b, e)| b.transform(e.view()))
            .collect();
        let logq = draws.iter().map(|d| d.logpdf).sum();
        let full = if draws.len() == 1 {
            draws[0].value.clone()
        } else {
            ndarray::concatenate![ndarray::Axis(0), draws[0].value, draws[1].value]
        };
        let (theta, z) = self.split(full.view());
        JointDraw {
            theta,
            z,
            eps: eps.to_vec(),
            logq,
        }
    }

    /// One draw; factor `b` takes its noise from `stream.child(b)`.
    pub fn sample(&self, stream: &RngStream) -> JointDraw {
        let eps: Vec<Array1<f64>> = self
            .blocks
            .iter()
            .enumerate()
            .map(|(b, spec)| Array1::from(stream.child(b as u64).standard_normals(spec.dim())))
            .collect();
        self.transform(&eps)
    }

    /// `log q(θ, z)` by triangular solves.
    pub fn log_density(&self, theta: ArrayView1<'_, f64>, z: &[Array1<f64>]) -> Result<f64> {
        let full = self.assemble(theta, z)?;
        match self.structure {
            Structure::Block => {
                let g = self.global_dim;
                Ok(self.blocks[0].logpdf(full.slice(s![..g]))?
                    + self.blocks[1].logpdf(full.slice(s![g..]))?)
            }
            _ => self.blocks[0].logpdf(full.view()),
        }
    }

    /// Adds the total-gradient contribution of `draw` to `grad`, given
    /// `∂f/∂θ`, `∂f/∂z_i` and the weight `w` of `−log q` in `f`.
    pub fn accumulate_grad(
        &self,
        draw: &JointDraw,
        g_theta: ArrayView1<'_, f64>,
        g_z: &[Array1<f64>],
        w: f64,
        grad: &mut JointGaussianFamily,
    ) {
        let g_full = self
            .assemble(g_theta, g_z)
            .expect("gradient shapes follow the draw");
        let gd = self.global_dim;
        let parts: Vec<ArrayView1<'_, f64>> = if self.blocks.len() == 1 {
            vec![g_full.view()]
        } else {
            vec![g_full.slice(s![..gd]), g_full.slice(s![gd..])]
        };
        for ((spec, g), (eps, out)) in self
            .blocks
            .iter()
            .zip(parts)
            .zip(draw.eps.iter().zip(grad.blocks.iter_mut()))
        {
            spec.accumulate_grad(eps.view(), g, w, out);
        }
    }

    /// Mean and covariance over `[θ, z_1, …, z_N]`.
    pub fn moments(&self) -> (Array1<f64>, Array2<f64>) {
        if self.blocks.len() == 1 {
            return (self.blocks[0].mean.clone(), self.blocks[0].covariance());
        }
        let g = self.global_dim;
        let t = self.total_dim();
        let mut cov = Array2::zeros((t, t));
        cov.slice_mut(s![..g, ..g])
            .assign(&self.blocks[0].covariance());
        cov.slice_mut(s![g.., g..])
            .assign(&self.blocks[1].covariance());
        let mean =
            ndarray::concatenate![ndarray::Axis(0), self.blocks[0].mean, self.blocks[1].mean];
        (mean, cov)
    }

    pub fn entropy(&self) -> f64 {
        self.blocks.iter().map(GaussianSpec::entropy).sum()
    }

    /// Branch family made of the `θ` marginal and each `z_i | θ` conditional.
    ///
    /// For a dense joint with factor `L`, the `θ` marginal keeps the top-left
    /// block of `L` unchanged, the couplings are `A = L_zθ L_θθ⁻¹`, and each
    /// `Σ_i` is the `i`-th diagonal block of `L_zz L_zzᵀ`. Covariance between
    /// different `z_i` given `θ` is dropped, so the result is exact only when
    /// the joint has none. Block and diagonal joints regroup without
    /// couplings.
    pub fn to_branch(&self) -> Result<BranchParams> {
        let g = self.global_dim;
        let l = self.local_dim;
        let n = self.num_branches;
        match self.structure {
            Structure::Dense => {
                let spec = &self.blocks[0];
                let gamma = spec.scale.gamma();
                let lf = spec.scale.factor();
                let raw = spec
                    .scale
                    .raw()
                    .slice(s![..UnconstrainedChol::packed_len(g)])
                    .to_owned();
                let global = GaussianSpec::new(
                    spec.mean.slice(s![..g]).to_owned(),
                    Scale::Tril(UnconstrainedChol::new(g, raw, gamma)?),
                )?;
                let l_tt = lf.slice(s![..g, ..g]);
                let mu_t = spec.mean.slice(s![..g]);
                let mut locals = Vec::with_capacity(n);
                for i in 0..n {
                    let r = g + i * l;
                    let mut a = Array2::zeros((l, g));
                    for k in 0..l {
                        // row k of A solves a L_θθ = (L_zθ)_k
                        let row = linalg::solve_lower_transpose(l_tt, lf.slice(s![r + k, ..g]));
                        a.row_mut(k).assign(&row);
                    }
                    let rows = lf.slice(s![r..r + l, g..]);
                    let cov = rows.dot(&rows.t());
                    let chol = linalg::cholesky(cov.view())?;
                    let mean = &spec.mean.slice(s![r..r + l]) - &a.dot(&mu_t);
                    locals.push(LocalParams {
                        mean,
                        coupling: Some(a),
                        scale: Scale::Tril(tril_unmap(chol.view(), gamma)?),
                    });
                }
                BranchParams::new_with(Structure::Dense, global, locals)
            }
            Structure::Block => {
                let zs = &self.blocks[1];
                let gamma = zs.scale.gamma();
                let cov = zs.covariance();
                let mut locals = Vec::with_capacity(n);
                for i in 0..n {
                    let r = i * l;
                    let chol = linalg::cholesky(cov.slice(s![r..r + l, r..r + l]))?;
                    locals.push(LocalParams {
                        mean: zs.mean.slice(s![r..r + l]).to_owned(),
                        coupling: None,
                        scale: Scale::Tril(tril_unmap(chol.view(), gamma)?),
                    });
                }
                BranchParams::new_with(Structure::Block, self.blocks[0].clone(), locals)
            }
            Structure::Diagonal => {
                let spec = &self.blocks[0];
                let gamma = spec.scale.gamma();
                let raw = spec.scale.raw();
                let part = |from: usize, to: usize| -> GaussianSpec {
                    GaussianSpec {
                        mean: spec.mean.slice(s![from..to]).to_owned(),
                        scale: Scale::Diag(DiagScale {
                            raw: raw.slice(s![from..to]).to_owned(),
                            gamma,
                        }),
                    }
                };
                let global = part(0, g);
                let locals = (0..n)
                    .map(|i| {
                        let p = part(g + i * l, g + (i + 1) * l);
                        LocalParams {
                            mean: p.mean,
                            coupling: None,
                            scale: p.scale,
                        }
                    })
                    .collect();
                BranchParams::new_with(Structure::Diagonal, global, locals)
            }
        }
    }

    fn block_names(&self) -> &'static [&'static str] {
        match self.structure {
            Structure::Block => &["joint/global", "joint/local"],
            _ => &["joint"],
        }
    }
}

/// Free-function form of [`JointGaussianFamily::to_branch`].
pub fn joint_to_branch(fam: &JointGaussianFamily) -> Result<BranchParams> {
    fam.to_branch()
}

impl Params for JointGaussianFamily {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        for (name, b) in self.block_names().iter().zip(&self.blocks) {
            visit_spec(name, b, f);
        }
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        let names = self.block_names();
        for (name, b) in names.iter().zip(self.blocks.iter_mut()) {
            visit_spec_mut(name, b, f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::testutil::random_branch;
    use crate::math::{mvn_logpdf, LN_2PI};
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random_joint(
        structure: Structure,
        g: usize,
        l: usize,
        n: usize,
        seed: u64,
    ) -> JointGaussianFamily {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut j = JointGaussianFamily::new(structure, g, l, n);
        let flat: Vec<f64> = (0..j.num_params())
            .map(|_| rng.random_range(-0.8..0.8))
            .collect();
        j.set_flat(&flat).unwrap();
        j
    }

    #[test]
    fn diagonal_standard_at_zero_noise() {
        let j = JointGaussianFamily::new(Structure::Diagonal, 2, 1, 3);
        let d = j.transform(&[Array1::zeros(5)]);
        assert!(d
            .theta
            .iter()
            .chain(d.z.iter().flatten())
            .all(|&v| v == 0.0));
        assert!((d.logq + 2.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn block_without_branches_is_global_factor() {
        let j = random_joint(Structure::Block, 3, 2, 0, 1);
        let d = j.sample(&RngStream::new(1, 1));
        assert!(d.z.is_empty());
        let lp = mvn_logpdf(&j.blocks()[0], d.theta.view()).unwrap();
        assert!((lp - d.logq).abs() < 1e-12);
    }

    #[test]
    fn draw_density_matches_solve() {
        for s in Structure::ALL {
            let j = random_joint(s, 1, 2, 1, 3);
            let (mean, cov) = j.moments();
            for k in 0..50 {
                let d = j.sample(&RngStream::new(3, k));
                let x = j.assemble(d.theta.view(), &d.z).unwrap();
                let oracle = linalg::zero_mean_mvn_logpdf(cov.view(), (&x - &mean).view()).unwrap();
                assert!((oracle - d.logq).abs() < 1e-10);
                assert!((j.log_density(d.theta.view(), &d.z).unwrap() - d.logq).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_dim_conversion_by_hand() {
        // Σ = [[2,1],[1,2]]: A = 1/2, Σ_1 = 2 - 1/2 = 3/2
        let cov = array![[2.0, 1.0], [1.0, 2.0]];
        let l = linalg::cholesky(cov.view()).unwrap();
        let spec = GaussianSpec::new(
            array![0.5, -1.0],
            Scale::Tril(tril_unmap(l.view(), 1.0).unwrap()),
        )
        .unwrap();
        let b = JointGaussianFamily::dense(1, 1, 1, spec)
            .unwrap()
            .to_branch()
            .unwrap();
        let w = &b.locals[0];
        assert!((w.coupling.as_ref().unwrap()[[0, 0]] - 0.5).abs() < 1e-14);
        assert!((w.scale.factor()[[0, 0]].powi(2) - 1.5).abs() < 1e-14);
        assert!((w.mean[0] - (-1.0 - 0.25)).abs() < 1e-14);
    }

    #[test]
    fn identity_joint_converts_to_independent_branches() {
        let mut j = JointGaussianFamily::new(Structure::Dense, 2, 2, 3);
        let mut flat = j.to_flat();
        for (k, v) in flat.iter_mut().take(8).enumerate() {
            *v = k as f64;
        }
        j.set_flat(&flat).unwrap();
        let b = j.to_branch().unwrap();
        for (i, w) in b.locals.iter().enumerate() {
            assert!(w.coupling.as_ref().unwrap().iter().all(|&a| a == 0.0));
            assert!((w.scale.factor() - Array2::<f64>::eye(2))
                .iter()
                .all(|v| v.abs() < 1e-15));
            assert_eq!(w.mean, j.blocks()[0].mean.slice(s![2 + 2 * i..4 + 2 * i]));
        }
    }

    #[test]
    fn conversion_preserves_theta_marginal_and_density() {
        for seed in 0..10 {
            let joint = random_branch(Structure::Dense, 2, 2, 3, seed)
                .to_joint()
                .unwrap();
            let b = joint.to_branch().unwrap();
            let (mean, cov) = joint.moments();
            assert!((&b.global.mean - &mean.slice(s![..2]))
                .iter()
                .all(|v| v.abs() < 1e-12));
            let vc = b.global.covariance();
            assert!((&vc - &cov.slice(s![..2, ..2]))
                .iter()
                .all(|v| v.abs() < 1e-12));
            for k in 0..100 {
                let d = joint.sample(&RngStream::new(seed, k));
                let lb = b.log_density(d.theta.view(), &d.z).unwrap();
                assert!((lb - d.logq).abs() < 1e-9, "{lb} vs {}", d.logq);
            }
        }
    }

    #[test]
    fn conversion_of_coupled_joint_keeps_marginals_of_each_branch() {
        let j = random_joint(Structure::Dense, 1, 1, 3, 11);
        let b = j.to_branch().unwrap();
        let (_, cov) = j.moments();
        let (_, bcov) = b.implied_moments();
        for i in 0..4 {
            assert!((cov[[i, i]] - bcov[[i, i]]).abs() < 1e-10);
            assert!((cov[[0, i]] - bcov[[0, i]]).abs() < 1e-10);
        }
    }

    #[test]
    fn block_and_diagonal_conversion_regroups() {
        for s in [Structure::Block, Structure::Diagonal] {
            let j = random_joint(s, 2, 1, 2, 5);
            let b = j.to_branch().unwrap();
            assert_eq!(b.structure(), s);
            for k in 0..20 {
                let d = j.sample(&RngStream::new(8, k));
                let lb = b.log_density(d.theta.view(), &d.z).unwrap();
                if s == Structure::Diagonal {
                    assert!((lb - d.logq).abs() < 1e-10);
                } else {
                    // block joints may couple z_i and z_j, which the branch family drops
                    assert!(lb.is_finite());
                }
            }
        }
    }

    #[test]
    fn entropy_matches_monte_carlo() {
        for (k, s) in Structure::ALL.into_iter().enumerate() {
            let j = random_joint(s, 2, 2, 2, 20 + k as u64);
            let n = 100_000;
            let vals: Vec<f64> = (0..n)
                .map(|t| -j.sample(&RngStream::new(77, t)).logq)
                .collect();
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - j.entropy()).abs() < 3.0 * se,
                "{s}: {mean} vs {}",
                j.entropy()
            );
        }
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        // f = cᵀx − w log q at fixed noise
        for s in Structure::ALL {
            let j = random_joint(s, 1, 1, 2, 40);
            let eps: Vec<Array1<f64>> = j
                .blocks()
                .iter()
                .map(|b| Array1::linspace(-0.7, 0.9, b.dim()))
                .collect();
            let c = array![0.3, -1.1, 0.8];
            let f = |j: &JointGaussianFamily| {
                let d = j.transform(&eps);
                c[0] * d.theta[0] + c[1] * d.z[0][0] + c[2] * d.z[1][0] - 0.7 * d.logq
            };
            let d = j.transform(&eps);
            let mut g = j.zeros_like();
            j.accumulate_grad(
                &d,
                c.slice(s![..1]),
                &[array![c[1]], array![c[2]]],
                0.7,
                &mut g,
            );
            let flat = j.to_flat();
            let gflat = g.to_flat();
            for k in 0..flat.len() {
                let h = 1e-6;
                let (mut p, mut m) = (j.clone(), j.clone());
                let mut fp = flat.clone();
                fp[k] += h;
                p.set_flat(&fp).unwrap();
                let mut fm = flat.clone();
                fm[k] -= h;
                m.set_flat(&fm).unwrap();
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!(
                    (fd - gflat[k]).abs() < 1e-7 * (1.0 + fd.abs()),
                    "{s} {k}: {fd} vs {}",
                    gflat[k]
                );
            }
        }
    }
}
