//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use hbvi::amortize::ArchConfig;
use hbvi::check::{run_checks, DiagOps};
use hbvi::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use hbvi::data::{
    load_ratings, pca_features, preprocess, read_dataset, split, write_dataset, BranchDataset,
    SplitDataset,
};
use hbvi::families::{joint_to_branch, Dims, FamilyKind, Structure};
use hbvi::metrics::evaluate;
use hbvi::models::{
    synthetic_forward_sample, synthetic_oracle, HbdModel, PreferenceModel, SyntheticConfig,
    SyntheticModel,
};
use hbvi::posterior::Posterior;
use hbvi::rng::RngStream;
use hbvi::train::{train, TraceRecord, TrainState};

use crate::config::{ModelKind, RunConfig};
use crate::manifest::write_manifest;

// Stream ids for the non-training uses of the seed. Training step `t` uses
// stream `t`, so these sit at the top of the range.
const GENERATE_STREAM: u64 = u64::MAX;
const SPLIT_STREAM: u64 = u64::MAX - 1;
const INIT_STREAM: u64 = u64::MAX - 2;
const EVAL_STREAM: u64 = u64::MAX - 3;
const CONVERT_STREAM: u64 = u64::MAX - 4;

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))
}

fn build_model(kind: ModelKind, covariate_dim: usize) -> Box<dyn HbdModel> {
    match kind {
        ModelKind::Synthetic => Box::new(SyntheticModel::new(covariate_dim)),
        ModelKind::Preference => Box::new(PreferenceModel::new(covariate_dim)),
    }
}

fn dims_of(model: &dyn HbdModel, data: &BranchDataset) -> Dims {
    Dims {
        global: model.global_dim(),
        local: model.local_dim(),
        covariate: data.covariate_dim,
    }
}

struct Loaded {
    model: Box<dyn HbdModel>,
    split: SplitDataset,
    dims: Dims,
}

fn load_data(cfg: &RunConfig) -> Result<Loaded> {
    let path = cfg.data_path();
    let data =
        read_dataset(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    ensure!(
        !data.is_empty(),
        "dataset {} has no branches",
        path.display()
    );
    let model = build_model(cfg.model, data.covariate_dim);
    model.validate(&data)?;
    let split = split(
        &data,
        cfg.test_fraction(),
        &RngStream::new(cfg.seed, SPLIT_STREAM),
    )?;
    let dims = dims_of(model.as_ref(), &data);
    Ok(Loaded { model, split, dims })
}

fn data_inputs(cfg: &RunConfig) -> Vec<(&'static str, std::path::PathBuf)> {
    let data = cfg.data_path();
    let mut sidecar = data.clone().into_os_string();
    sidecar.push(".dims");
    vec![("dataset", data), ("dataset_dims", sidecar.into())]
}

fn manifest(
    cfg: &RunConfig,
    command: &str,
    inputs: &[(&'static str, std::path::PathBuf)],
) -> Result<()> {
    let refs: Vec<(&str, &Path)> = inputs.iter().map(|(n, p)| (*n, p.as_path())).collect();
    write_manifest(cfg, command, &refs)
}

fn join_values(v: impl IntoIterator<Item = f64>) -> String {
    v.into_iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn generate(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let out = cfg.data_path();
    let mut inputs = Vec::new();
    match cfg.model {
        ModelKind::Synthetic => {
            ensure!(cfg.branches > 0, "the number of branches must be positive");
            ensure!(cfg.dim > 0, "dim must be positive");
            let shape = SyntheticConfig::uniform(cfg.dim, cfg.branches, cfg.obs_per_branch);
            let (data, latents) =
                synthetic_forward_sample(&shape, &RngStream::new(cfg.seed, GENERATE_STREAM))?;
            write_dataset(&out, &data)?;

            let mut lat = String::from("name,values\n");
            lat.push_str(&format!(
                "theta,{}\n",
                join_values(latents.theta.iter().copied())
            ));
            for (i, z) in latents.z.iter().enumerate() {
                lat.push_str(&format!("z/{i},{}\n", join_values(z.iter().copied())));
            }
            fs::write(cfg.out_dir.join("latents.csv"), lat)?;

            let oracle = synthetic_oracle(&data)?;
            let summary = format!(
                "log_marginal={:?}\nbranches={}\nobservations={}\ndim={}\nposterior_global_mean={}\n",
                oracle.log_marginal,
                data.len(),
                data.num_observations(),
                cfg.dim,
                join_values(oracle.posterior_global.mean.iter().copied()),
            );
            fs::write(cfg.out_dir.join("oracle.txt"), summary)?;
            log::info!(
                "wrote {} branches, {} observations; log p(y|x) = {:.6}",
                data.len(),
                data.num_observations(),
                oracle.log_marginal
            );
        }
        ModelKind::Preference => {
            let ratings = cfg
                .ratings
                .clone()
                .context("the preference model needs `ratings = <csv path>`")?;
            let table = load_ratings(&ratings)?;
            let (table, pca) = pca_features(&table, cfg.pca_components)?;
            let data = preprocess(&table, cfg.max_ratings_per_user, cfg.threshold)?;
            ensure!(!data.is_empty(), "no users left after preprocessing");
            write_dataset(&out, &data)?;
            log::info!(
                "wrote {} users, {} ratings; explained variance {:.4}",
                data.len(),
                data.num_observations(),
                pca.explained_variance_ratio().sum()
            );
            inputs.push(("ratings", ratings));
        }
    }
    manifest(cfg, "generate", &inputs)
}

fn check_checkpoint(ck: &Checkpoint, dims: Dims, n: usize) -> Result<()> {
    ensure!(
        ck.dims == dims,
        "checkpoint dims {:?} do not match the dataset and model {:?}",
        ck.dims,
        dims
    );
    ensure!(
        ck.num_branches == n,
        "checkpoint has {} branches, dataset has {n}",
        ck.num_branches
    );
    Ok(())
}

pub fn train_cmd(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let Loaded { model, split, dims } = load_data(cfg)?;
    let n = split.train.len();
    if cfg.family == FamilyKind::Amortized && !model.is_symmetric() {
        bail!("amortized families need a symmetric model");
    }
    let mut inputs = data_inputs(cfg);
    let mut state = match &cfg.resume {
        Some(path) => {
            let ck =
                load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            check_checkpoint(&ck, dims, n)?;
            inputs.push(("resume", path.clone()));
            log::info!(
                "resuming {} {} run at iteration {}",
                ck.posterior.structure(),
                ck.posterior.kind(),
                ck.iter
            );
            TrainState::from_checkpoint(ck, cfg.ema_smoothing)
        }
        None => {
            let p = Posterior::init(
                cfg.family,
                cfg.structure,
                dims,
                n,
                &ArchConfig::default(),
                &RngStream::new(cfg.seed, INIT_STREAM),
            )?;
            TrainState::new(p, cfg.ema_smoothing)
        }
    };
    manifest(cfg, "train", &inputs)?;

    let trace_path = cfg.out_dir.join("trace.csv");
    let mut trace = std::io::BufWriter::new(fs::File::create(&trace_path)?);
    writeln!(trace, "{}", TraceRecord::CSV_HEADER)?;
    let mut last = None;
    train(
        model.as_ref(),
        &split.train,
        &mut state,
        &cfg.train_config(),
        |r| {
            writeln!(trace, "{}", r.to_csv_row())?;
            log::debug!("iter {} elbo {:.4} ema {:.4}", r.iter, r.elbo, r.ema_elbo);
            last = Some(*r);
            Ok(())
        },
    )?;
    trace.flush()?;
    save_checkpoint(&cfg.checkpoint_path(), &state.to_checkpoint(dims, n))?;
    if let Some(r) = last {
        log::info!(
            "iteration {}: ELBO estimate {:.6}, EMA {:.6}",
            r.iter,
            r.elbo,
            r.ema_elbo
        );
        println!("final_ema_elbo={:?}", r.ema_elbo);
    }
    Ok(())
}

pub fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let path = cfg.checkpoint_path();
    let ck =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let Loaded { model, split, dims } = load_data(cfg)?;
    check_checkpoint(&ck, dims, split.train.len())?;
    let mut inputs = data_inputs(cfg);
    inputs.push(("checkpoint", path));
    manifest(cfg, "eval", &inputs)?;
    let report = evaluate(
        model.as_ref(),
        &ck.posterior,
        &split,
        cfg.k_samples,
        &RngStream::new(cfg.seed, EVAL_STREAM),
    )?;
    fs::write(cfg.out_dir.join("metrics.txt"), report.to_key_value())?;
    fs::write(cfg.out_dir.join("metrics.json"), report.to_json())?;
    print!("{}", report.to_key_value());
    Ok(())
}

pub fn convert_cmd(cfg: &RunConfig) -> Result<()> {
    prepare_out_dir(cfg)?;
    let path = cfg.checkpoint_path();
    let ck =
        load_checkpoint(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let joint = match &ck.posterior {
        Posterior::Joint(j) if j.structure() == Structure::Dense => j,
        other => bail!(
            "conversion needs a dense joint checkpoint, got {} {}",
            other.structure(),
            other.kind()
        ),
    };
    let branch = joint_to_branch(joint)?;
    let stream = RngStream::new(cfg.seed, CONVERT_STREAM);
    let mut worst = 0.0f64;
    for k in 0..10 {
        let d = joint.sample(&stream.child(k));
        let a = joint.log_density(d.theta.view(), &d.z)?;
        let b = branch.log_density(d.theta.view(), &d.z)?;
        worst = worst.max((a - b).abs());
    }
    log::info!("density spot check over 10 draws: max |log q_joint - log q_branch| = {worst:.3e}");
    if worst > 1e-6 {
        log::warn!("converted density differs by {worst:.3e}");
    }
    let out = cfg.out_dir.join("checkpoint-branch.bin");
    save_checkpoint(
        &out,
        &Checkpoint {
            posterior: Posterior::Branch(branch),
            dims: ck.dims,
            num_branches: ck.num_branches,
            adam: None,
            iter: 0,
            ema: None,
        },
    )?;
    manifest(cfg, "convert", &[("checkpoint", path)])?;
    println!("density_max_abs_diff={worst:e}");
    println!("output={}", out.display());
    Ok(())
}

/// Runs the self-test suite; returns whether every check passed.
pub fn check_cmd() -> bool {
    let start = std::time::Instant::now();
    let results = run_checks(&DiagOps::default());
    let mut ok = true;
    for r in &results {
        let tag = if r.passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {}: {}", r.name, r.detail);
        ok &= r.passed;
    }
    println!(
        "{} of {} checks passed in {:.1}s",
        results.iter().filter(|r| r.passed).count(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    ok
}
