//! Fast self-test suite: transform identities, gradient checks, invariances
//! and a small unbiasedness test. Used by the `check` command.

use ndarray::{array, Array1, Array2};
use rand::Rng;

use crate::amortize::{AmortNet, ArchConfig};
use crate::data::BranchData;
use crate::error::Result;
use crate::estimators::{branch_elbo, mean_and_se, subsampled_branch_elbo, MinibatchSampler};
use crate::families::{BranchParams, Params, Structure};
use crate::math::{
    diag_transform, diag_transform_grad, diag_transform_inv, tril_map, tril_unmap,
    UnconstrainedChol,
};
use crate::models::{
    synthetic_forward_sample, HbdModel, PreferenceModel, SyntheticConfig, SyntheticModel,
};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// The diagonal transform under test, as plain function pointers so a
/// deliberately broken variant can be swapped in.
#[derive(Clone, Copy)]
pub struct DiagOps {
    pub forward: fn(f64, f64) -> f64,
    pub grad: fn(f64, f64) -> f64,
    pub inverse: fn(f64, f64) -> f64,
}

impl Default for DiagOps {
    fn default() -> Self {
        Self {
            forward: diag_transform,
            grad: diag_transform_grad,
            inverse: diag_transform_inv,
        }
    }
}

fn outcome(name: &'static str, r: std::result::Result<String, String>) -> CheckResult {
    match r {
        Ok(detail) => CheckResult {
            name,
            passed: true,
            detail,
        },
        Err(detail) => CheckResult {
            name,
            passed: false,
            detail,
        },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: Result<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn diag_identities(ops: &DiagOps) -> std::result::Result<String, String> {
    let g = 1.0;
    ensure((ops.forward)(0.0, g) == 1.0, || {
        format!("psi(0) = {}", (ops.forward)(0.0, g))
    })?;
    let expected = 0.5 * (3.0 + 13f64.sqrt());
    ensure(((ops.forward)(3.0, g) - expected).abs() < 1e-12, || {
        "psi(3) mismatch".into()
    })?;
    let mut rng = RngStream::new(0, 0).rng();
    for _ in 0..10_000 {
        let x: f64 = rng.random_range(-50.0..50.0);
        let y = (ops.forward)(x, g);
        ensure(y.is_finite() && y > 0.0, || {
            format!("psi({x}) = {y} not positive")
        })?;
        let back = (ops.inverse)(y, g);
        ensure((back - x).abs() < 1e-8 * (1.0 + x.abs()), || {
            format!("inverse round trip at {x}: {back}")
        })?;
    }
    for x in [-5.0, -1.0, 0.0, 1.0, 5.0] {
        let h = 1e-6;
        let fd = ((ops.forward)(x + h, g) - (ops.forward)(x - h, g)) / (2.0 * h);
        let an = (ops.grad)(x, g);
        ensure((fd - an).abs() < 1e-6 * (1.0 + fd.abs()), || {
            format!("psi' at {x}: fd {fd} vs {an}")
        })?;
    }
    Ok("psi(0)=1, positivity, inverse, derivative".into())
}

fn tril_round_trip() -> std::result::Result<String, String> {
    let mut rng = RngStream::new(1, 0).rng();
    for d in 1..=6 {
        let raw = Array1::from_shape_fn(UnconstrainedChol::packed_len(d), |_| {
            rng.random_range(-3.0..3.0)
        });
        let u = lib(UnconstrainedChol::new(d, raw.clone(), 1.0))?;
        let back = lib(tril_unmap(tril_map(&u).view(), 1.0))?;
        let err = (back.raw() - &raw)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        ensure(err < 1e-12, || format!("dim {d}: round trip error {err}"))?;
    }
    Ok("dims 1..6 within 1e-12".into())
}

fn model_gradient(
    model: &dyn HbdModel,
    data: &BranchData,
    seed: u64,
) -> std::result::Result<f64, String> {
    let mut rng = RngStream::new(seed, 0).rng();
    let theta = Array1::from_shape_fn(model.global_dim(), |_| rng.random_range(-1.0..1.0));
    let z = Array1::from_shape_fn(model.local_dim(), |_| rng.random_range(-1.0..1.0));
    let ev = model.log_branch_grad(theta.view(), z.view(), data);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (x, g, is_theta) in [(&theta, &ev.grad_theta, true), (&z, &ev.grad_z, false)] {
        for k in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[k] += h;
            m[k] -= h;
            let f = |v: &Array1<f64>| {
                if is_theta {
                    model.log_branch(v.view(), z.view(), data)
                } else {
                    model.log_branch(theta.view(), v.view(), data)
                }
            };
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / fd.abs().max(1e-3));
        }
    }
    Ok(worst)
}

fn model_gradients() -> std::result::Result<String, String> {
    let (ds, _) = lib(synthetic_forward_sample(
        &SyntheticConfig::uniform(2, 1, 5),
        &RngStream::new(2, 0),
    ))?;
    let syn = model_gradient(&SyntheticModel::new(2), &ds.branches[0], 3)?;
    let pref_data = lib(BranchData::new(
        array![[0.3, -1.0], [1.2, 0.4], [-0.7, 0.9]],
        array![1.0, 0.0, 1.0],
    ))?;
    let pref = model_gradient(&PreferenceModel::new(2), &pref_data, 4)?;
    ensure(syn < 1e-4 && pref < 1e-4, || {
        format!("relative errors {syn:e}, {pref:e}")
    })?;
    Ok(format!("max rel err {:.1e}", syn.max(pref)))
}

fn tiny_net() -> ArchConfig {
    ArchConfig {
        feat_widths: vec![3, 3],
        param_widths: vec![4, 4],
        slope: 0.01,
        final_std: 0.5,
    }
}

fn net_gradient() -> std::result::Result<String, String> {
    let mut net = lib(AmortNet::init(
        &tiny_net(),
        Structure::Dense,
        1,
        1,
        1,
        &RngStream::new(5, 0),
    ))?;
    let mut rng = RngStream::new(5, 1).rng();
    let flat: Vec<f64> = (0..net.num_params())
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    lib(net.set_flat(&flat))?;
    let data = lib(BranchData::new(array![[0.5], [-1.1]], array![0.3, 1.0]))?;
    let c = array![0.4, -0.8, 1.1];
    let (_, tape) = lib(net.forward(&data))?;
    let mut g = net.zeros_like();
    lib(net.backward(&tape, c.view(), &mut g))?;
    let g = g.to_flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..flat.len() {
        let eval = |delta: f64| -> std::result::Result<f64, String> {
            let mut f = flat.clone();
            f[k] += delta;
            let mut n = net.clone();
            lib(n.set_flat(&f))?;
            Ok(c.dot(&lib(n.forward(&data))?.0.to_raw()))
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-4));
    }
    ensure(worst < 1e-4, || format!("max rel err {worst:e}"))?;
    Ok(format!("max rel err {worst:.1e}"))
}

fn estimator_gradient() -> std::result::Result<String, String> {
    let model = SyntheticModel::new(1);
    let (data, _) = lib(synthetic_forward_sample(
        &SyntheticConfig::uniform(1, 2, 3),
        &RngStream::new(6, 0),
    ))?;
    let mut b = BranchParams::new(Structure::Dense, 1, 1, 2);
    let mut rng = RngStream::new(6, 1).rng();
    let flat: Vec<f64> = (0..b.num_params())
        .map(|_| rng.random_range(-0.5..0.5))
        .collect();
    lib(b.set_flat(&flat))?;
    let st = RngStream::new(6, 2);
    let g = lib(branch_elbo(&model, &b, &data, &st, 3))?.grad.to_flat();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..flat.len() {
        let eval = |delta: f64| -> std::result::Result<f64, String> {
            let mut f = flat.clone();
            f[k] += delta;
            let mut p = b.clone();
            lib(p.set_flat(&f))?;
            Ok(lib(branch_elbo(&model, &p, &data, &st, 3))?.elbo.value)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-3));
    }
    ensure(worst < 1e-3, || format!("max rel err {worst:e}"))?;
    Ok(format!("max rel err {worst:.1e}"))
}

fn permutation_invariance() -> std::result::Result<String, String> {
    let net = lib(AmortNet::init(
        &ArchConfig::default(),
        Structure::Dense,
        2,
        2,
        2,
        &RngStream::new(7, 0),
    ))?;
    let mut rng = RngStream::new(7, 1).rng();
    let x = Array2::from_shape_fn((9, 2), |_| rng.random_range(-2.0..2.0));
    let y = Array1::from_shape_fn(9, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
    let data = lib(BranchData::new(x, y))?;
    let perm = [4, 8, 0, 3, 7, 1, 6, 2, 5];
    let shuffled = data.select(&perm);
    let a = lib(net.forward(&data))?.0.to_raw();
    let b = lib(net.forward(&shuffled))?.0.to_raw();
    ensure(a == b, || "network output changed under permutation".into())?;
    let single = data.select(&[2]);
    let double = data.select(&[2, 2]);
    ensure(
        lib(net.forward(&single))?.0 == lib(net.forward(&double))?.0,
        || "network output changed under duplication".into(),
    )?;
    let model = PreferenceModel::new(2);
    let theta = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
    let z = array![0.3, -0.6];
    let va = model.log_branch(theta.view(), z.view(), &data);
    let vb = model.log_branch(theta.view(), z.view(), &shuffled);
    ensure(va.to_bits() == vb.to_bits(), || {
        format!("preference density {va} vs {vb}")
    })?;
    Ok("bitwise".into())
}

fn subsampling() -> std::result::Result<String, String> {
    let model = SyntheticModel::new(1);
    let (data, _) = lib(synthetic_forward_sample(
        &SyntheticConfig::uniform(1, 4, 3),
        &RngStream::new(8, 0),
    ))?;
    let b = BranchParams::new(Structure::Dense, 1, 1, 4);
    let n = 4000;
    let full = lib(branch_elbo(&model, &b, &data, &RngStream::new(8, 1), n))?
        .elbo
        .copies;
    let sampler = lib(MinibatchSampler::new(4, 2))?;
    let sub = (0..n as u64)
        .map(|k| {
            lib(subsampled_branch_elbo(
                &model,
                &b,
                &data,
                &sampler,
                &RngStream::new(8, 2).child(k),
                1,
            ))
            .map(|e| e.elbo.value)
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (mf, sf) = mean_and_se(&full);
    let (ms, ss) = mean_and_se(&sub);
    let z = (mf - ms).abs() / (sf * sf + ss * ss).sqrt();
    ensure(z < 3.0, || format!("means {mf:.4} vs {ms:.4}, z = {z:.2}"))?;
    let whole = lib(MinibatchSampler::new(4, 4))?;
    let st = RngStream::new(8, 3);
    let a = lib(branch_elbo(&model, &b, &data, &st, 5))?.elbo.value;
    let c = lib(subsampled_branch_elbo(&model, &b, &data, &whole, &st, 5))?
        .elbo
        .value;
    ensure(a.to_bits() == c.to_bits(), || {
        "full batch differs from branch estimator".into()
    })?;
    Ok(format!("z = {z:.2}, full batch bitwise"))
}

/// Runs every check with the given transform.
pub fn run_checks(ops: &DiagOps) -> Vec<CheckResult> {
    vec![
        outcome("diag transform identities", diag_identities(ops)),
        outcome("cholesky packing round trip", tril_round_trip()),
        outcome("model gradients", model_gradients()),
        outcome("network backward pass", net_gradient()),
        outcome("estimator gradient", estimator_gradient()),
        outcome("permutation invariance", permutation_invariance()),
        outcome("subsampling unbiasedness", subsampling()),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_checks(&DiagOps::default()) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }

    #[test]
    fn flipped_gamma_is_detected() {
        fn broken(x: f64, gamma: f64) -> f64 {
            0.5 * (x + (x * x - 4.0 * gamma).sqrt())
        }
        let ops = DiagOps {
            forward: broken,
            ..DiagOps::default()
        };
        let results = run_checks(&ops);
        assert!(results.iter().any(|r| !r.passed));
    }
}
