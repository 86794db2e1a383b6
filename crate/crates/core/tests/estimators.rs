mod common;

use common::*;
use hbvi::amortize::{AmortNet, AmortizedFamily, ArchConfig};
use hbvi::data::BranchDataset;
use hbvi::estimators::{
    amortized_elbo, branch_elbo, joint_elbo, subsampled_branch_elbo, MinibatchSampler,
};
use hbvi::families::{BranchParams, JointGaussianFamily, LocalParams, Params, Structure};
use hbvi::models::{synthetic_oracle, HbdModel, SyntheticModel};
use hbvi::rng::RngStream;
use hbvi::Error;
use ndarray::{array, Array1};

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        feat_widths: vec![3, 3],
        param_widths: vec![4],
        slope: 0.01,
        final_std: 0.3,
    }
}

#[test]
fn oracle_matched_branch_family_has_zero_variance() {
    let data = synthetic(1, 1, 1, 3);
    let oracle = synthetic_oracle(&data).unwrap();
    let q = oracle.optimal_branch_params().unwrap();
    let model = SyntheticModel::new(1);
    let e = branch_elbo(&model, &q, &data, &RngStream::new(1, 0), 1000).unwrap();
    let (mean, _) = mean_se(&e.elbo.copies);
    let var = e
        .elbo
        .copies
        .iter()
        .map(|c| (c - mean).powi(2))
        .sum::<f64>()
        / 999.0;
    assert!(var < 1e-20, "variance {var}");
    assert!((e.elbo.value - oracle.log_marginal).abs() < 1e-9);

    let joint = q.to_joint().unwrap();
    let e = joint_elbo(&model, &joint, &data, &RngStream::new(2, 0), 1000).unwrap();
    let (mean, _) = mean_se(&e.elbo.copies);
    let var = e
        .elbo
        .copies
        .iter()
        .map(|c| (c - mean).powi(2))
        .sum::<f64>()
        / 999.0;
    assert!(var < 1e-20, "variance {var}");
    assert!((e.elbo.value - oracle.log_marginal).abs() < 1e-9);
}

#[test]
fn estimates_stay_below_log_marginal() {
    let model = SyntheticModel::new(2);
    for seed in 0..3 {
        let data = synthetic(2, 3, 4, 10 + seed);
        let bound = synthetic_oracle(&data).unwrap().log_marginal;
        let st = RngStream::new(seed, 5);
        let n = 10_000;
        for s in Structure::ALL {
            let j = random_joint(s, 2, 2, 3, seed);
            let e = joint_elbo(&model, &j, &data, &st, n).unwrap().elbo;
            assert!(
                e.value <= bound + 3.0 * e.std_err(),
                "joint {s}: {} > {bound}",
                e.value
            );
            let b = random_branch(s, 2, 2, 3, seed);
            let e = branch_elbo(&model, &b, &data, &st, n).unwrap().elbo;
            assert!(e.value <= bound + 3.0 * e.std_err(), "branch {s}");
            // one batch per call, so average over calls
            let sampler = MinibatchSampler::new(3, 2).unwrap();
            let vals: Vec<f64> = (0..2000)
                .map(|k| {
                    subsampled_branch_elbo(&model, &b, &data, &sampler, &st.child(k), 1)
                        .unwrap()
                        .elbo
                        .value
                })
                .collect();
            let (m, se) = mean_se(&vals);
            assert!(m <= bound + 3.0 * se, "subsampled {s}");
        }
    }
}

#[test]
fn joint_gradient_matches_finite_differences() {
    let model = SyntheticModel::new(1);
    let data = synthetic(1, 2, 3, 4);
    let st = RngStream::new(4, 4);
    for s in Structure::ALL {
        let j = random_joint(s, 1, 1, 2, 8);
        let e = joint_elbo(&model, &j, &data, &st, 3).unwrap();
        check_fd(&j, &e.grad.to_flat(), 1e-5, 1e-3, |p| {
            joint_elbo(&model, p, &data, &st, 3).unwrap().elbo.value
        });
    }
}

#[test]
fn branch_gradient_matches_finite_differences() {
    let model = SyntheticModel::new(1);
    let data = synthetic(1, 2, 3, 5);
    let st = RngStream::new(5, 5);
    for s in Structure::ALL {
        let b = random_branch(s, 1, 1, 2, 9);
        let e = branch_elbo(&model, &b, &data, &st, 3).unwrap();
        check_fd(&b, &e.grad.to_flat(), 1e-5, 1e-3, |p| {
            branch_elbo(&model, p, &data, &st, 3).unwrap().elbo.value
        });
    }
}

#[test]
fn subsampled_gradient_matches_finite_differences() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 4, 3, 6);
    let st = RngStream::new(6, 6);
    let sampler = MinibatchSampler::new(4, 2).unwrap();
    for s in Structure::ALL {
        let b = random_branch(s, 2, 2, 4, 10);
        let e = subsampled_branch_elbo(&model, &b, &data, &sampler, &st, 2).unwrap();
        let g = e.grad.to_flat();
        check_fd(&b, &g, 1e-5, 1e-3, |p| {
            subsampled_branch_elbo(&model, p, &data, &sampler, &st, 2)
                .unwrap()
                .elbo
                .value
        });
        // branches outside the batch get no gradient
        for i in (0..4).filter(|i| !e.elbo.batch.contains(i)) {
            assert!(e.grad.locals[i].to_raw().iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn amortized_gradient_matches_finite_differences() {
    let model = SyntheticModel::new(1);
    let data = synthetic(1, 2, 3, 7);
    let st = RngStream::new(7, 7);
    let sampler = MinibatchSampler::full(2);
    for s in Structure::ALL {
        let mut fam =
            AmortizedFamily::init(&tiny_arch(), s, 1, 1, 1, &RngStream::new(3, 3)).unwrap();
        randomize(&mut fam, 0.6, 21);
        let e = amortized_elbo(&model, &fam, &data, &sampler, &st, 2).unwrap();
        check_fd(&fam, &e.grad.to_flat(), 1e-5, 1e-3, |p| {
            amortized_elbo(&model, p, &data, &sampler, &st, 2)
                .unwrap()
                .elbo
                .value
        });
    }
}

#[test]
fn no_branches_gives_negative_kl() {
    let model = SyntheticModel::new(3);
    let data = BranchDataset::new(vec![], 3).unwrap();
    for s in Structure::ALL {
        let b = random_branch(s, 3, 3, 0, 12);
        let e = branch_elbo(&model, &b, &data, &RngStream::new(1, 2), 20_000)
            .unwrap()
            .elbo;
        let kl = b.global.kl_to_standard();
        assert!(
            (e.value + kl).abs() < 3.0 * e.std_err(),
            "{s}: {} vs {}",
            e.value,
            -kl
        );
    }
}

#[test]
fn branch_and_converted_joint_agree() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 3, 4, 13);
    let b = random_branch(Structure::Dense, 2, 2, 3, 14);
    let j = b.to_joint().unwrap();
    let back = j.to_branch().unwrap();
    // pointwise: the two families assign the same density to joint draws
    for k in 0..100 {
        let d = j.sample(&RngStream::new(15, k));
        let lb = back.log_density(d.theta.view(), &d.z).unwrap();
        assert!((lb - d.logq).abs() < 1e-9);
    }
    let n = 100_000;
    let eb = branch_elbo(&model, &back, &data, &RngStream::new(16, 0), n)
        .unwrap()
        .elbo;
    let ej = joint_elbo(&model, &j, &data, &RngStream::new(17, 0), n)
        .unwrap()
        .elbo;
    let se = (eb.std_err().powi(2) + ej.std_err().powi(2)).sqrt();
    assert!(
        (eb.value - ej.value).abs() < 3.0 * se,
        "{} vs {} (se {se})",
        eb.value,
        ej.value
    );
}

#[test]
fn full_batch_is_bitwise_branch_elbo() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 5, 3, 18);
    let b = random_branch(Structure::Dense, 2, 2, 5, 19);
    let st = RngStream::new(20, 1);
    let full = branch_elbo(&model, &b, &data, &st, 4).unwrap();
    let sub = subsampled_branch_elbo(
        &model,
        &b,
        &data,
        &MinibatchSampler::new(5, 5).unwrap(),
        &st,
        4,
    )
    .unwrap();
    assert_eq!(full.elbo.value.to_bits(), sub.elbo.value.to_bits());
    assert_eq!(full.elbo.copies, sub.elbo.copies);
    assert_eq!(full.grad.to_flat(), sub.grad.to_flat());
}

#[test]
fn subsampling_is_unbiased() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 10, 4, 21);
    let b = random_branch(Structure::Dense, 2, 2, 10, 22);
    let sampler = MinibatchSampler::new(10, 3).unwrap();
    let n = 20_000;
    let full: Vec<f64> = branch_elbo(&model, &b, &data, &RngStream::new(23, 0), n)
        .unwrap()
        .elbo
        .copies;
    let sub: Vec<f64> = (0..n as u64)
        .map(|k| {
            subsampled_branch_elbo(&model, &b, &data, &sampler, &RngStream::new(24, k), 1)
                .unwrap()
                .elbo
                .value
        })
        .collect();
    let (mf, sf) = mean_se(&full);
    let (ms, ss) = mean_se(&sub);
    let se = (sf * sf + ss * ss).sqrt();
    assert!((mf - ms).abs() < 3.0 * se, "{mf} vs {ms} (se {se})");
}

#[test]
fn inclusion_frequencies_are_uniform() {
    let sampler = MinibatchSampler::new(10, 3).unwrap();
    let mut counts = [0usize; 10];
    let trials = 10_000;
    for k in 0..trials {
        let b = sampler.sample(&RngStream::new(25, k));
        assert_eq!(b.len(), 3);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        for i in b {
            counts[i] += 1;
        }
    }
    let p = 0.3;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    for c in counts {
        assert!((c as f64 - trials as f64 * p).abs() < 3.0 * sd, "count {c}");
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 6, 3, 26);
    let b = random_branch(Structure::Dense, 2, 2, 6, 27);
    let st = RngStream::new(28, 0);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| branch_elbo(&model, &b, &data, &st, 5).unwrap())
    };
    let a = run(1);
    let c = run(4);
    assert_eq!(a.elbo.copies, c.elbo.copies);
    assert_eq!(a.grad.to_flat(), c.grad.to_flat());
}

#[test]
fn frozen_network_reproduces_fixed_locals() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 4, 3, 29);
    let b = random_branch(Structure::Dense, 2, 2, 4, 30);
    let target: LocalParams = b.locals[0].clone();
    let mut net = AmortNet::zeros(&tiny_arch(), Structure::Dense, 2, 2, 2);
    net.param
        .layers
        .last_mut()
        .unwrap()
        .bias
        .assign(&target.to_raw());
    let fam = AmortizedFamily {
        global: b.global.clone(),
        net,
    };
    let fixed =
        BranchParams::new_with(Structure::Dense, b.global.clone(), vec![target; 4]).unwrap();
    let sampler = MinibatchSampler::new(4, 2).unwrap();
    for k in 0..20 {
        let st = RngStream::new(31, k);
        let a = amortized_elbo(&model, &fam, &data, &sampler, &st, 3)
            .unwrap()
            .elbo;
        let f = subsampled_branch_elbo(&model, &fixed, &data, &sampler, &st, 3)
            .unwrap()
            .elbo;
        assert_eq!(a.batch, f.batch);
        assert!((a.value - f.value).abs() < 1e-9);
    }
}

#[test]
fn amortized_estimate_ignores_observation_order() {
    let model = SyntheticModel::new(2);
    let data = synthetic(2, 3, 5, 32);
    let shuffled = BranchDataset::new(
        data.branches
            .iter()
            .map(|d| d.select(&[3, 0, 4, 2, 1]))
            .collect(),
        2,
    )
    .unwrap();
    let fam = AmortizedFamily::init(
        &ArchConfig::default(),
        Structure::Dense,
        2,
        2,
        2,
        &RngStream::new(33, 0),
    )
    .unwrap();
    let sampler = MinibatchSampler::full(3);
    let st = RngStream::new(34, 0);
    let a = amortized_elbo(&model, &fam, &data, &sampler, &st, 4)
        .unwrap()
        .elbo;
    let b = amortized_elbo(&model, &fam, &shuffled, &sampler, &st, 4)
        .unwrap()
        .elbo;
    assert_eq!(a.copies, b.copies);
}

#[test]
fn amortized_requires_symmetric_model() {
    let model = Asymmetric(SyntheticModel::new(1));
    let data = synthetic(1, 2, 2, 35);
    let fam = AmortizedFamily::init(
        &tiny_arch(),
        Structure::Dense,
        1,
        1,
        1,
        &RngStream::new(1, 1),
    )
    .unwrap();
    let r = amortized_elbo(
        &model,
        &fam,
        &data,
        &MinibatchSampler::full(2),
        &RngStream::new(1, 1),
        1,
    );
    assert!(matches!(r, Err(Error::Precondition(_))));
}

#[test]
fn non_finite_density_names_the_branch() {
    let model = SyntheticModel::new(1);
    let mut data = synthetic(1, 3, 2, 36);
    data.branches[1].y[0] = f64::NAN;
    let b = BranchParams::new(Structure::Dense, 1, 1, 3);
    let r = branch_elbo(&model, &b, &data, &RngStream::new(1, 1), 1);
    assert!(
        matches!(
            r,
            Err(Error::NonFinite {
                branch: Some(1),
                ..
            })
        ),
        "{r:?}"
    );
    let j = JointGaussianFamily::new(Structure::Dense, 1, 1, 3);
    let r = joint_elbo(&model, &j, &data, &RngStream::new(1, 1), 1);
    assert!(matches!(
        r,
        Err(Error::NonFinite {
            branch: Some(1),
            ..
        })
    ));
}

#[test]
fn estimators_are_deterministic() {
    let model = SyntheticModel::new(1);
    let data = synthetic(1, 3, 2, 37);
    let j = random_joint(Structure::Block, 1, 1, 3, 38);
    let st = RngStream::new(39, 0);
    let a = joint_elbo(&model, &j, &data, &st, 3).unwrap();
    let b = joint_elbo(&model, &j, &data, &st, 3).unwrap();
    assert_eq!(a.elbo, b.elbo);
}

/// Probabilists' Gauss–Hermite rule with 5 nodes (exact to degree 9).
fn gauss_hermite() -> Vec<(f64, f64)> {
    let r = 10f64.sqrt();
    let a = (5.0 - r).sqrt();
    let b = (5.0 + r).sqrt();
    let wa = (7.0 + 2.0 * 10f64.sqrt()) / 60.0;
    let wb = (7.0 - 2.0 * 10f64.sqrt()) / 60.0;
    vec![(0.0, 8.0 / 15.0), (a, wa), (-a, wa), (b, wb), (-b, wb)]
}

#[test]
fn estimators_match_quadrature() {
    // D = 1, N = 1, n = 1: log p − log q is quadratic in the 2-d noise, so a
    // tensor Gauss–Hermite rule gives the ELBO exactly.
    let model = SyntheticModel::new(1);
    let data = synthetic(1, 1, 1, 40);
    let gh = gauss_hermite();
    let n = 20_000;
    for s in Structure::ALL {
        let j = random_joint(s, 1, 1, 1, 41);
        let mut exact = 0.0;
        for &(e1, w1) in &gh {
            for &(e2, w2) in &gh {
                let eps: Vec<Array1<f64>> = match j.blocks().len() {
                    1 => vec![array![e1, e2]],
                    _ => vec![array![e1], array![e2]],
                };
                let d = j.transform(&eps);
                let lp = model.log_prior(d.theta.view())
                    + model.log_branch(d.theta.view(), d.z[0].view(), &data.branches[0]);
                exact += w1 * w2 * (lp - d.logq);
            }
        }
        let e = joint_elbo(&model, &j, &data, &RngStream::new(42, 0), n)
            .unwrap()
            .elbo;
        assert!((e.value - exact).abs() < 3.0 * e.std_err(), "joint {s}");

        let b = random_branch(s, 1, 1, 1, 43);
        let mut exact = 0.0;
        for &(e1, w1) in &gh {
            for &(e2, w2) in &gh {
                let g = b.global.transform(array![e1].view());
                let l = b.locals[0]
                    .transform(g.value.view(), array![e2].view())
                    .unwrap();
                let lp = model.log_prior(g.value.view())
                    + model.log_branch(g.value.view(), l.value.view(), &data.branches[0]);
                exact += w1 * w2 * (lp - g.logpdf - l.logpdf);
            }
        }
        let e = branch_elbo(&model, &b, &data, &RngStream::new(44, 0), n)
            .unwrap()
            .elbo;
        assert!((e.value - exact).abs() < 3.0 * e.std_err(), "branch {s}");
        let sub: Vec<f64> = (0..n as u64)
            .map(|k| {
                subsampled_branch_elbo(
                    &model,
                    &b,
                    &data,
                    &MinibatchSampler::new(1, 1).unwrap(),
                    &RngStream::new(45, k),
                    1,
                )
                .unwrap()
                .elbo
                .value
            })
            .collect();
        let (m, se) = mean_se(&sub);
        assert!((m - exact).abs() < 3.0 * se, "subsampled {s}");

        let mut net = AmortNet::zeros(&tiny_arch(), s, 1, 1, 1);
        net.param
            .layers
            .last_mut()
            .unwrap()
            .bias
            .assign(&b.locals[0].to_raw());
        let fam = AmortizedFamily {
            global: b.global.clone(),
            net,
        };
        let e = amortized_elbo(
            &model,
            &fam,
            &data,
            &MinibatchSampler::full(1),
            &RngStream::new(46, 0),
            n,
        )
        .unwrap()
        .elbo;
        assert!((e.value - exact).abs() < 3.0 * e.std_err(), "amortized {s}");
    }
}
