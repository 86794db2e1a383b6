//! Amortization network mapping a branch's observations to its local
//! variational parameters.
//!
//! Each observation `(x_ij, y_ij)` goes through a feature MLP, the embeddings
//! are augmented with their elementwise squares, mean-pooled, and a second MLP
//! emits the raw parameter vector of `q(z_i | θ)`. Forward and backward passes
//! are written out by hand.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::BranchData;
use crate::error::{Error, Result};
use crate::families::{
    mat_slice, mat_slice_mut, vec_slice, vec_slice_mut, LocalParams, Params, Structure,
    TensorVisitor, TensorVisitorMut,
};
use crate::math::{order_invariant_sum, GaussianSpec, DEFAULT_GAMMA};
use crate::rng::RngStream;

/// Std of a standard normal truncated to `[-2, 2]`.
const TRUNCATED_STD: f64 = 0.879_625_661_034_239_8;

/// Hidden widths and activation slope of the two networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    /// Feature network widths; the last entry is the embedding size.
    pub feat_widths: Vec<usize>,
    /// Hidden widths of the parameter network (a linear output layer is added).
    pub param_widths: Vec<usize>,
    pub slope: f64,
    /// Std of the output layer's initial weights.
    pub final_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            feat_widths: vec![64, 64, 64, 128],
            param_widths: vec![256, 256, 256],
            slope: 0.01,
            final_std: 1e-3,
        }
    }
}

impl ArchConfig {
    pub fn embed_dim(&self) -> usize {
        *self
            .feat_widths
            .last()
            .expect("feature network has at least one layer")
    }

    fn feat_chain(&self, input: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.feat_widths.iter().copied())
            .collect()
    }

    fn param_chain(&self, output: usize) -> Vec<usize> {
        std::iter::once(2 * self.embed_dim())
            .chain(self.param_widths.iter().copied())
            .chain(std::iter::once(output))
            .collect()
    }

    /// Weights plus biases of both networks.
    pub fn param_count(&self, input: usize, output: usize) -> usize {
        let count = |w: &[usize]| w.windows(2).map(|p| p[0] * p[1] + p[1]).sum::<usize>();
        count(&self.feat_chain(input)) + count(&self.param_chain(output))
    }

    fn validate(&self) -> Result<()> {
        if self.feat_widths.is_empty()
            || self
                .feat_widths
                .iter()
                .chain(&self.param_widths)
                .any(|&w| w == 0)
        {
            return Err(Error::Precondition(
                "network widths must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// One fully connected layer, `out = in · weight + bias` with `weight`
/// stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Stack of layers with leaky-ReLU after every layer but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpWeights {
    pub layers: Vec<Layer>,
    pub slope: f64,
}

/// Activations kept by [`MlpWeights::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpTape {
    /// Input of each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let x: f64 = StandardNormal.sample(rng);
        if x.abs() <= 2.0 {
            return x * std / TRUNCATED_STD;
        }
    }
}

impl MlpWeights {
    /// Truncated-normal weights with std `√(1/fan_in)` (or `final_std` on the
    /// last layer when given), zero biases.
    pub fn init<R: Rng + ?Sized>(
        widths: &[usize],
        slope: f64,
        final_std: Option<f64>,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                let std = match final_std {
                    Some(s) if l + 1 == n => s,
                    _ => (1.0 / fan_in as f64).sqrt(),
                };
                Layer {
                    weight: Array2::from_shape_simple_fn((fan_in, fan_out), || {
                        truncated_normal(rng, std)
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers, slope }
    }

    pub fn zeros(widths: &[usize], slope: f64) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        Self { layers, slope }
    }

    pub fn zeros_like(&self) -> Self {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.bias.len()));
        Self::zeros(&widths, self.slope)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty network").bias.len()
    }

    pub fn forward(&self, input: &[f64]) -> (Vec<f64>, MlpTape) {
        let n = self.layers.len();
        let mut tape = MlpTape {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
        };
        let mut h = input.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = mat_slice(&layer.weight);
            let out_dim = layer.bias.len();
            let mut z = vec_slice(&layer.bias).to_vec();
            for (k, &hk) in h.iter().enumerate() {
                let row = &w[k * out_dim..(k + 1) * out_dim];
                for (zj, &wj) in z.iter_mut().zip(row) {
                    *zj += hk * wj;
                }
            }
            let next = if l + 1 < n {
                z.iter()
                    .map(|&v| if v > 0.0 { v } else { self.slope * v })
                    .collect()
            } else {
                z.clone()
            };
            tape.inputs.push(std::mem::replace(&mut h, next));
            tape.pre.push(z);
        }
        (h, tape)
    }

    /// Accumulates parameter gradients of `grad_out · output` into `grad` and
    /// returns the gradient with respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &[f64], grad: &mut MlpWeights) -> Vec<f64> {
        let n = self.layers.len();
        let mut g = grad_out.to_vec();
        for l in (0..n).rev() {
            if l + 1 < n {
                for (gj, &z) in g.iter_mut().zip(&tape.pre[l]) {
                    if z <= 0.0 {
                        *gj *= self.slope;
                    }
                }
            }
            let layer = &self.layers[l];
            let gl = &mut grad.layers[l];
            let out_dim = layer.bias.len();
            for (b, &gj) in vec_slice_mut(&mut gl.bias).iter_mut().zip(&g) {
                *b += gj;
            }
            let input = &tape.inputs[l];
            let gw = mat_slice_mut(&mut gl.weight);
            for (k, &hk) in input.iter().enumerate() {
                let row = &mut gw[k * out_dim..(k + 1) * out_dim];
                for (r, &gj) in row.iter_mut().zip(&g) {
                    *r += hk * gj;
                }
            }
            let w = mat_slice(&layer.weight);
            g = (0..input.len())
                .map(|k| {
                    w[k * out_dim..(k + 1) * out_dim]
                        .iter()
                        .zip(&g)
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect();
        }
        g
    }

    fn visit(&self, prefix: &str, f: &mut TensorVisitor<'_>) {
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &layer.weight;
            f(
                &format!("{prefix}/{l}/weight"),
                &[w.nrows(), w.ncols()],
                mat_slice(w),
            );
            f(
                &format!("{prefix}/{l}/bias"),
                &[layer.bias.len()],
                vec_slice(&layer.bias),
            );
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut TensorVisitorMut<'_>) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let shape = [layer.weight.nrows(), layer.weight.ncols()];
            f(
                &format!("{prefix}/{l}/weight"),
                &shape,
                mat_slice_mut(&mut layer.weight),
            );
            let n = layer.bias.len();
            f(
                &format!("{prefix}/{l}/bias"),
                &[n],
                vec_slice_mut(&mut layer.bias),
            );
        }
    }
}

/// Shared network `net_u` producing local parameters from branch data.
#[derive(Clone, Debug, PartialEq)]
pub struct AmortNet {
    pub feat: MlpWeights,
    pub param: MlpWeights,
    structure: Structure,
    local_dim: usize,
    global_dim: usize,
    gamma: f64,
}

/// Everything [`AmortNet::backward`] needs from one forward call.
#[derive(Clone, Debug)]
pub struct NetTape {
    feat: Vec<MlpTape>,
    embeds: Vec<Vec<f64>>,
    param: MlpTape,
}

impl AmortNet {
    /// Randomly initialized network; see [`MlpWeights::init`].
    pub fn init(
        arch: &ArchConfig,
        structure: Structure,
        local_dim: usize,
        global_dim: usize,
        covariate_dim: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        arch.validate()?;
        let mut rng = stream.rng();
        let out = LocalParams::raw_len(structure, local_dim, global_dim);
        let feat = MlpWeights::init(
            &arch.feat_chain(covariate_dim + 1),
            arch.slope,
            None,
            &mut rng,
        );
        let param = MlpWeights::init(
            &arch.param_chain(out),
            arch.slope,
            Some(arch.final_std),
            &mut rng,
        );
        Ok(Self {
            feat,
            param,
            structure,
            local_dim,
            global_dim,
            gamma: DEFAULT_GAMMA,
        })
    }

    /// All-zero network; its output is the standard-normal conditional.
    pub fn zeros(
        arch: &ArchConfig,
        structure: Structure,
        local_dim: usize,
        global_dim: usize,
        covariate_dim: usize,
    ) -> Self {
        let out = LocalParams::raw_len(structure, local_dim, global_dim);
        Self {
            feat: MlpWeights::zeros(&arch.feat_chain(covariate_dim + 1), arch.slope),
            param: MlpWeights::zeros(&arch.param_chain(out), arch.slope),
            structure,
            local_dim,
            global_dim,
            gamma: DEFAULT_GAMMA,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            feat: self.feat.zeros_like(),
            param: self.param.zeros_like(),
            ..*self
        }
    }

    pub fn structure(&self) -> Structure {
        self.structure
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn global_dim(&self) -> usize {
        self.global_dim
    }

    pub fn covariate_dim(&self) -> usize {
        self.feat.input_dim() - 1
    }

    /// Widths of both networks, recovered from the weights.
    pub fn arch(&self) -> ArchConfig {
        let widths = |m: &MlpWeights| m.layers.iter().map(|l| l.bias.len()).collect::<Vec<_>>();
        let mut param_widths = widths(&self.param);
        param_widths.pop();
        ArchConfig {
            feat_widths: widths(&self.feat),
            param_widths,
            slope: self.feat.slope,
            ..ArchConfig::default()
        }
    }

    /// Computes `w_i` for one branch. The result depends only on the
    /// multiset of observations: pooling sums are taken in sorted order.
    pub fn forward(&self, data: &BranchData) -> Result<(LocalParams, NetTape)> {
        let n = data.n();
        if n == 0 {
            return Err(Error::InvalidData(
                "amortized parameters need at least one observation".into(),
            ));
        }
        if data.x.ncols() != self.covariate_dim() {
            return Err(Error::DimensionMismatch {
                what: "branch covariates vs network input",
                expected: self.covariate_dim(),
                got: data.x.ncols(),
            });
        }
        let e_dim = self.feat.output_dim();
        let mut feat = Vec::with_capacity(n);
        let mut embeds = Vec::with_capacity(n);
        let mut input = vec![0.0; data.x.ncols() + 1];
        for (row, &y) in data.x.rows().into_iter().zip(data.y.iter()) {
            for (dst, &v) in input.iter_mut().zip(row.iter()) {
                *dst = v;
            }
            input[data.x.ncols()] = y;
            let (e, tape) = self.feat.forward(&input);
            embeds.push(e);
            feat.push(tape);
        }
        let mut column = vec![0.0; n];
        let mut pooled = vec![0.0; 2 * e_dim];
        for k in 0..e_dim {
            for (c, e) in column.iter_mut().zip(&embeds) {
                *c = e[k];
            }
            pooled[k] = order_invariant_sum(&mut column) / n as f64;
            for (c, e) in column.iter_mut().zip(&embeds) {
                *c = e[k] * e[k];
            }
            pooled[e_dim + k] = order_invariant_sum(&mut column) / n as f64;
        }
        let (raw, param) = self.param.forward(&pooled);
        let w = LocalParams::from_raw(
            self.structure,
            self.local_dim,
            self.global_dim,
            ArrayView1::from(&raw),
            self.gamma,
        )?;
        Ok((
            w,
            NetTape {
                feat,
                embeds,
                param,
            },
        ))
    }

    /// Accumulates into `grad` the gradient of `grad_rawᵀ w_i` with respect
    /// to every weight, where `grad_raw` follows the raw layout of
    /// [`LocalParams::to_raw`].
    pub fn backward(
        &self,
        tape: &NetTape,
        grad_raw: ArrayView1<'_, f64>,
        grad: &mut AmortNet,
    ) -> Result<()> {
        if grad_raw.len() != self.param.output_dim() {
            return Err(Error::DimensionMismatch {
                what: "upstream gradient vs network output",
                expected: self.param.output_dim(),
                got: grad_raw.len(),
            });
        }
        let g_raw = grad_raw.to_vec();
        let g_pooled = self.param.backward(&tape.param, &g_raw, &mut grad.param);
        let n = tape.embeds.len() as f64;
        let e_dim = self.feat.output_dim();
        let mut g_e = vec![0.0; e_dim];
        for (e, ft) in tape.embeds.iter().zip(&tape.feat) {
            for k in 0..e_dim {
                g_e[k] = (g_pooled[k] + 2.0 * e[k] * g_pooled[e_dim + k]) / n;
            }
            self.feat.backward(ft, &g_e, &mut grad.feat);
        }
        Ok(())
    }
}

/// [`AmortNet::init`] with the given architecture.
pub fn net_init(
    arch: &ArchConfig,
    structure: Structure,
    local_dim: usize,
    global_dim: usize,
    covariate_dim: usize,
    stream: &RngStream,
) -> Result<AmortNet> {
    AmortNet::init(
        arch,
        structure,
        local_dim,
        global_dim,
        covariate_dim,
        stream,
    )
}

pub fn net_forward(net: &AmortNet, data: &BranchData) -> Result<(LocalParams, NetTape)> {
    net.forward(data)
}

/// Gradient of `grad_rawᵀ w_i` with respect to the network weights.
pub fn net_backward(
    net: &AmortNet,
    tape: &NetTape,
    grad_raw: ArrayView1<'_, f64>,
) -> Result<AmortNet> {
    let mut g = net.zeros_like();
    net.backward(tape, grad_raw, &mut g)?;
    Ok(g)
}

/// Amortized branch family: a free global factor `q_v(θ)` and the network
/// producing every `q(z_i | θ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmortizedFamily {
    pub global: GaussianSpec,
    pub net: AmortNet,
}

impl AmortizedFamily {
    pub fn init(
        arch: &ArchConfig,
        structure: Structure,
        global_dim: usize,
        local_dim: usize,
        covariate_dim: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        Ok(Self {
            global: structure.standard_spec(global_dim),
            net: AmortNet::init(
                arch,
                structure,
                local_dim,
                global_dim,
                covariate_dim,
                stream,
            )?,
        })
    }

    pub fn structure(&self) -> Structure {
        self.net.structure()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            global: self.global.zeros_like(),
            net: self.net.zeros_like(),
        }
    }
}

impl Params for AmortizedFamily {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        self.global.for_each_tensor(f);
        self.net.for_each_tensor(f);
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        self.global.for_each_tensor_mut(f);
        self.net.for_each_tensor_mut(f);
    }
}

impl Params for AmortNet {
    fn for_each_tensor(&self, f: &mut TensorVisitor<'_>) {
        self.feat.visit("net/feat", f);
        self.param.visit("net/param", f);
    }

    fn for_each_tensor_mut(&mut self, f: &mut TensorVisitorMut<'_>) {
        self.feat.visit_mut("net/feat", f);
        self.param.visit_mut("net/param", f);
    }
}
