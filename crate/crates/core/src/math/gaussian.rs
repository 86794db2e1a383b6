use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{diag_transform, diag_transform_grad, diag_transform_inv, DEFAULT_GAMMA, LN_2PI};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Unconstrained parameters of a lower-triangular Cholesky factor.
///
/// `raw` packs the lower triangle row by row: `(0,0), (1,0), (1,1), (2,0), …`.
/// Off-diagonal entries are used verbatim; diagonal entries pass through
/// [`diag_transform`] so the realized factor always has a positive diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct UnconstrainedChol {
    raw: Array1<f64>,
    dim: usize,
    gamma: f64,
}

impl UnconstrainedChol {
    pub fn packed_len(dim: usize) -> usize {
        dim * (dim + 1) / 2
    }

    /// Position of entry `(row, col)`, `col <= row`, in the packed vector.
    #[inline]
    pub fn index(row: usize, col: usize) -> usize {
        debug_assert!(col <= row);
        row * (row + 1) / 2 + col
    }

    pub fn new(dim: usize, raw: Array1<f64>, gamma: f64) -> Result<Self> {
        let expected = Self::packed_len(dim);
        if raw.len() != expected {
            return Err(Error::MalformedParameter {
                name: "cholesky raw",
                expected,
                got: raw.len(),
            });
        }
        if gamma.is_nan() || gamma <= 0.0 {
            return Err(Error::Precondition(format!(
                "gamma must be positive, got {gamma}"
            )));
        }
        Ok(Self { raw, dim, gamma })
    }

    /// Raw vector realizing the identity factor.
    pub fn identity(dim: usize) -> Self {
        Self {
            raw: Array1::zeros(Self::packed_len(dim)),
            dim,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn raw(&self) -> &Array1<f64> {
        &self.raw
    }

    pub fn raw_mut(&mut self) -> &mut Array1<f64> {
        &mut self.raw
    }

    #[inline]
    pub fn entry(&self, row: usize, col: usize) -> f64 {
        match col.cmp(&row) {
            std::cmp::Ordering::Greater => 0.0,
            std::cmp::Ordering::Equal => {
                diag_transform(self.raw[Self::index(row, row)], self.gamma)
            }
            std::cmp::Ordering::Less => self.raw[Self::index(row, col)],
        }
    }

    /// The realized factor `L`.
    pub fn factor(&self) -> Array2<f64> {
        let d = self.dim;
        Array2::from_shape_fn((d, d), |(r, c)| self.entry(r, c))
    }

    /// `L ε` without materializing `L`.
    pub fn mul_vec(&self, eps: ArrayView1<'_, f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim);
        for r in 0..self.dim {
            let base = Self::index(r, 0);
            let mut s = 0.0;
            for c in 0..r {
                s += self.raw[base + c] * eps[c];
            }
            s += diag_transform(self.raw[base + r], self.gamma) * eps[r];
            out[r] = s;
        }
        out
    }

    pub fn log_diag_sum(&self) -> f64 {
        (0..self.dim)
            .map(|k| diag_transform(self.raw[Self::index(k, k)], self.gamma).ln())
            .sum()
    }
}

/// Realizes the lower-triangular factor of `u`.
pub fn tril_map(u: &UnconstrainedChol) -> Array2<f64> {
    u.factor()
}

/// Inverse of [`tril_map`] for a lower-triangular `l` with positive diagonal.
pub fn tril_unmap(l: ArrayView2<'_, f64>, gamma: f64) -> Result<UnconstrainedChol> {
    let d = l.nrows();
    if l.ncols() != d {
        return Err(Error::DimensionMismatch {
            what: "tril_unmap (square factor)",
            expected: d,
            got: l.ncols(),
        });
    }
    let mut raw = Array1::zeros(UnconstrainedChol::packed_len(d));
    for r in 0..d {
        for c in 0..r {
            raw[UnconstrainedChol::index(r, c)] = l[[r, c]];
        }
        let diag = l[[r, r]];
        if diag.is_nan() || diag <= 0.0 {
            return Err(Error::Precondition(format!(
                "factor diagonal must be positive, entry {r} is {diag}"
            )));
        }
        raw[UnconstrainedChol::index(r, r)] = diag_transform_inv(diag, gamma);
    }
    UnconstrainedChol::new(d, raw, gamma)
}

/// Independent per-coordinate scales `σ_k = ψ(raw_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagScale {
    pub raw: Array1<f64>,
    pub gamma: f64,
}

impl DiagScale {
    pub fn identity(dim: usize) -> Self {
        Self {
            raw: Array1::zeros(dim),
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn sigma(&self, k: usize) -> f64 {
        diag_transform(self.raw[k], self.gamma)
    }
}

/// Scale of a Gaussian factor: dense lower-triangular or diagonal.
#[derive(Clone, Debug, PartialEq)]
pub enum Scale {
    Tril(UnconstrainedChol),
    Diag(DiagScale),
}

impl Scale {
    pub fn dim(&self) -> usize {
        match self {
            Scale::Tril(u) => u.dim(),
            Scale::Diag(s) => s.raw.len(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self, Scale::Diag(_))
    }

    pub fn gamma(&self) -> f64 {
        match self {
            Scale::Tril(u) => u.gamma(),
            Scale::Diag(s) => s.gamma,
        }
    }

    pub fn raw(&self) -> &Array1<f64> {
        match self {
            Scale::Tril(u) => u.raw(),
            Scale::Diag(s) => &s.raw,
        }
    }

    pub fn raw_mut(&mut self) -> &mut Array1<f64> {
        match self {
            Scale::Tril(u) => u.raw_mut(),
            Scale::Diag(s) => &mut s.raw,
        }
    }

    /// Same variant and shape, all raw entries zero.
    pub fn zeros_like(&self) -> Self {
        let mut s = self.clone();
        s.raw_mut().fill(0.0);
        s
    }

    /// Builds a scale from a packed raw vector.
    pub fn from_raw(diagonal: bool, dim: usize, raw: Array1<f64>, gamma: f64) -> Result<Self> {
        if diagonal {
            if raw.len() != dim {
                return Err(Error::MalformedParameter {
                    name: "diagonal raw scale",
                    expected: dim,
                    got: raw.len(),
                });
            }
            Ok(Scale::Diag(DiagScale { raw, gamma }))
        } else {
            Ok(Scale::Tril(UnconstrainedChol::new(dim, raw, gamma)?))
        }
    }

    pub fn packed_len(diagonal: bool, dim: usize) -> usize {
        if diagonal {
            dim
        } else {
            UnconstrainedChol::packed_len(dim)
        }
    }

    pub fn factor(&self) -> Array2<f64> {
        match self {
            Scale::Tril(u) => u.factor(),
            Scale::Diag(s) => Array2::from_diag(&s.raw.mapv(|r| diag_transform(r, s.gamma))),
        }
    }

    #[inline]
    pub fn diag_entry(&self, k: usize) -> f64 {
        match self {
            Scale::Tril(u) => u.entry(k, k),
            Scale::Diag(s) => s.sigma(k),
        }
    }

    /// `L ε`.
    pub fn apply(&self, eps: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            Scale::Tril(u) => u.mul_vec(eps),
            Scale::Diag(s) => Array1::from_shape_fn(eps.len(), |k| s.sigma(k) * eps[k]),
        }
    }

    /// `L⁻¹ r` by forward substitution.
    pub fn solve(&self, r: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            Scale::Tril(u) => {
                let d = u.dim();
                let mut x = Array1::zeros(d);
                for i in 0..d {
                    let mut s = r[i];
                    for k in 0..i {
                        s -= u.entry(i, k) * x[k];
                    }
                    x[i] = s / u.entry(i, i);
                }
                x
            }
            Scale::Diag(s) => Array1::from_shape_fn(r.len(), |k| r[k] / s.sigma(k)),
        }
    }

    pub fn log_diag_sum(&self) -> f64 {
        match self {
            Scale::Tril(u) => u.log_diag_sum(),
            Scale::Diag(s) => (0..s.raw.len()).map(|k| s.sigma(k).ln()).sum(),
        }
    }

    /// Adds to `grad` the raw-parameter gradient of `gᵀ(L ε) + w · Σ log L_kk`.
    ///
    /// This is the scale part of the reparameterized total gradient: the
    /// first term is the sampling path, the second the entropy-bearing
    /// `−log q` evaluated at fixed `ε`.
    pub fn accumulate_grad(
        &self,
        eps: ArrayView1<'_, f64>,
        g: ArrayView1<'_, f64>,
        w: f64,
        grad: &mut Scale,
    ) {
        match (self, grad) {
            (Scale::Tril(u), Scale::Tril(gu)) => {
                let gamma = u.gamma();
                let raw = u.raw();
                let graw = gu.raw_mut();
                for r in 0..u.dim() {
                    let base = UnconstrainedChol::index(r, 0);
                    for c in 0..r {
                        graw[base + c] += g[r] * eps[c];
                    }
                    let x = raw[base + r];
                    let lrr = diag_transform(x, gamma);
                    graw[base + r] += (g[r] * eps[r] + w / lrr) * diag_transform_grad(x, gamma);
                }
            }
            (Scale::Diag(s), Scale::Diag(gs)) => {
                for k in 0..s.raw.len() {
                    let x = s.raw[k];
                    let sig = diag_transform(x, s.gamma);
                    gs.raw[k] += (g[k] * eps[k] + w / sig) * diag_transform_grad(x, s.gamma);
                }
            }
            _ => panic!("gradient container has a different scale variant"),
        }
    }
}

/// A Gaussian factor `N(mean, L Lᵀ)` with unconstrained scale parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSpec {
    pub mean: Array1<f64>,
    pub scale: Scale,
}

/// One reparameterized draw: `value = mean + L eps`, with its log-density.
#[derive(Clone, Debug)]
pub struct Draw {
    pub value: Array1<f64>,
    pub eps: Array1<f64>,
    pub logpdf: f64,
}

impl GaussianSpec {
    pub fn new(mean: Array1<f64>, scale: Scale) -> Result<Self> {
        if mean.len() != scale.dim() {
            return Err(Error::DimensionMismatch {
                what: "gaussian mean vs scale",
                expected: scale.dim(),
                got: mean.len(),
            });
        }
        Ok(Self { mean, scale })
    }

    /// Standard normal with a dense (lower-triangular) scale.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            scale: Scale::Tril(UnconstrainedChol::identity(dim)),
        }
    }

    /// Standard normal with a diagonal scale.
    pub fn standard_diag(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            scale: Scale::Diag(DiagScale::identity(dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            mean: Array1::zeros(self.dim()),
            scale: self.scale.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.mean.len() + self.scale.raw().len()
    }

    /// Maps standard-normal noise to a sample. The log-density reuses `eps`,
    /// so no triangular solve is needed.
    pub fn transform(&self, eps: ArrayView1<'_, f64>) -> Draw {
        let value = &self.mean + &self.scale.apply(eps);
        let logpdf =
            -0.5 * eps.dot(&eps) - self.scale.log_diag_sum() - 0.5 * self.dim() as f64 * LN_2PI;
        Draw {
            value,
            eps: eps.to_owned(),
            logpdf,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Draw {
        let eps = Array1::from_shape_fn(self.dim(), |_| StandardNormal.sample(rng));
        self.transform(eps.view())
    }

    /// Exact log-density via a triangular solve.
    pub fn logpdf(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                what: "gaussian logpdf point",
                expected: self.dim(),
                got: x.len(),
            });
        }
        let r = &x - &self.mean;
        let u = self.scale.solve(r.view());
        Ok(-0.5 * u.dot(&u) - self.scale.log_diag_sum() - 0.5 * self.dim() as f64 * LN_2PI)
    }

    pub fn covariance(&self) -> Array2<f64> {
        let l = self.scale.factor();
        l.dot(&l.t())
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        0.5 * self.dim() as f64 * (1.0 + LN_2PI) + self.scale.log_diag_sum()
    }

    /// Adds the total-gradient contribution of one draw to `grad`.
    ///
    /// `g` is `∂f/∂x` at the sampled point and `w` the weight of the `−log q`
    /// term in the objective.
    pub fn accumulate_grad(
        &self,
        eps: ArrayView1<'_, f64>,
        g: ArrayView1<'_, f64>,
        w: f64,
        grad: &mut GaussianSpec,
    ) {
        grad.mean += &g;
        self.scale.accumulate_grad(eps, g, w, &mut grad.scale);
    }

    /// KL(self ‖ N(0, I)).
    pub fn kl_to_standard(&self) -> f64 {
        let cov = self.covariance();
        let tr = cov.diag().sum();
        0.5 * (tr + self.mean.dot(&self.mean) - self.dim() as f64) - self.scale.log_diag_sum()
    }
}

/// Draws one sample from `spec` using `stream`, returning the sample and its
/// log-density computed from the same noise.
pub fn mvn_sample(spec: &GaussianSpec, stream: &RngStream) -> Draw {
    let eps = Array1::from(stream.standard_normals(spec.dim()));
    spec.transform(eps.view())
}

pub fn mvn_logpdf(spec: &GaussianSpec, x: ArrayView1<'_, f64>) -> Result<f64> {
    spec.logpdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn random_chol(dim: usize, rng: &mut impl Rng) -> UnconstrainedChol {
        let raw = Array1::from_shape_fn(UnconstrainedChol::packed_len(dim), |_| {
            rng.random_range(-1.5..1.5)
        });
        UnconstrainedChol::new(dim, raw, 1.0).unwrap()
    }

    #[test]
    fn tril_map_examples() {
        let u = UnconstrainedChol::new(1, array![0.0], 1.0).unwrap();
        assert_eq!(tril_map(&u), array![[1.0]]);
        let u = UnconstrainedChol::new(2, array![0.0, 5.0, 0.0], 1.0).unwrap();
        assert_eq!(tril_map(&u), array![[1.0, 0.0], [5.0, 1.0]]);
    }

    #[test]
    fn tril_map_rejects_bad_length() {
        let err = UnconstrainedChol::new(2, array![0.0, 1.0], 1.0).unwrap_err();
        assert!(matches!(
            err,
            Error::MalformedParameter {
                expected: 3,
                got: 2,
                ..
            }
        ));
    }

    #[test]
    fn tril_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for dim in 1..6 {
            let l = Array2::from_shape_fn((dim, dim), |(r, c)| match c.cmp(&r) {
                std::cmp::Ordering::Greater => 0.0,
                std::cmp::Ordering::Equal => rng.random_range(0.05..4.0),
                std::cmp::Ordering::Less => rng.random_range(-2.0..2.0),
            });
            let back = tril_map(&tril_unmap(l.view(), 1.0).unwrap());
            for (a, b) in back.iter().zip(l.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sample_examples() {
        let spec = GaussianSpec::standard(1);
        let d = spec.transform(array![0.0].view());
        assert_eq!(d.value[0], 0.0);
        assert!((d.logpdf + 0.918939).abs() < 1e-6);

        let l = array![[3.0]];
        let spec = GaussianSpec::new(array![2.0], Scale::Tril(tril_unmap(l.view(), 1.0).unwrap()))
            .unwrap();
        let d = spec.transform(array![1.0].view());
        assert!((d.value[0] - 5.0).abs() < 1e-12);
        let expected = -0.5 - 3f64.ln() - 0.5 * LN_2PI;
        assert!((d.logpdf - expected).abs() < 1e-12);
        assert!((d.logpdf + 2.517551).abs() < 1e-6);
    }

    #[test]
    fn logpdf_standard() {
        let spec = GaussianSpec::standard(1);
        assert!((spec.logpdf(array![0.0].view()).unwrap() + 0.918939).abs() < 1e-6);
        let spec = GaussianSpec::standard(2);
        assert!((spec.logpdf(array![0.0, 0.0].view()).unwrap() + 1.837877).abs() < 1e-6);
        assert!(spec.logpdf(array![0.0].view()).is_err());
    }

    #[test]
    fn sample_logpdf_matches_solve() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for trial in 0..100 {
            let dim = 1 + trial % 10;
            let mean = Array1::from_shape_fn(dim, |_| rng.random_range(-3.0..3.0));
            let spec = GaussianSpec::new(mean, Scale::Tril(random_chol(dim, &mut rng))).unwrap();
            let d = spec.sample(&mut rng);
            let lp = spec.logpdf(d.value.view()).unwrap();
            assert!(
                (lp - d.logpdf).abs() < 1e-10,
                "dim {dim}: {lp} vs {}",
                d.logpdf
            );
        }
    }

    #[test]
    fn extreme_raw_entries_stay_finite() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let dim = 4;
            let raw = Array1::from_shape_fn(10, |_| rng.random_range(-30.0..30.0));
            let spec = GaussianSpec::new(
                Array1::zeros(dim),
                Scale::Tril(UnconstrainedChol::new(dim, raw, 1.0).unwrap()),
            )
            .unwrap();
            let x = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
            assert!(spec.logpdf(x.view()).unwrap().is_finite());
        }
    }

    #[test]
    fn scale_gradient_matches_finite_differences() {
        // f(raw) = gᵀ(μ + L ε) + w Σ log L_kk
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for diagonal in [false, true] {
            let dim = 4;
            let raw = Array1::from_shape_fn(Scale::packed_len(diagonal, dim), |_| {
                rng.random_range(-1.0..1.0)
            });
            let scale = Scale::from_raw(diagonal, dim, raw, 1.0).unwrap();
            let eps = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
            let g = Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0));
            let w = 0.7;
            let f = |s: &Scale| g.dot(&s.apply(eps.view())) + w * s.log_diag_sum();
            let mut grad = scale.zeros_like();
            scale.accumulate_grad(eps.view(), g.view(), w, &mut grad);
            let h = 1e-5;
            for k in 0..scale.raw().len() {
                let mut p = scale.clone();
                p.raw_mut()[k] += h;
                let mut m = scale.clone();
                m.raw_mut()[k] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let an = grad.raw()[k];
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(
                    rel < 1e-4 || (fd - an).abs() < 1e-9,
                    "k={k} fd={fd} an={an}"
                );
            }
        }
    }
}
