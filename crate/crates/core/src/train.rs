//! Training loop: estimator, Adam step, online EMA of the ELBO trace.

use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::data::BranchDataset;
use crate::error::{Error, Result};
use crate::estimators::{MinibatchSampler, DEFAULT_N_MC};
use crate::families::{Dims, FamilyKind};
use crate::models::HbdModel;
use crate::optim::{AdamState, LrSchedule};
use crate::posterior::Posterior;
use crate::rng::RngStream;

pub const DEFAULT_EMA_SMOOTHING: f64 = 0.001;

/// Bias-corrected exponential moving average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ema {
    pub smoothing: f64,
    pub value: f64,
    pub weight: f64,
}

impl Ema {
    pub fn new(smoothing: f64) -> Self {
        Self {
            smoothing,
            value: 0.0,
            weight: 0.0,
        }
    }

    pub fn update(&mut self, x: f64) {
        let a = self.smoothing;
        self.value = (1.0 - a) * self.value + a * x;
        self.weight = (1.0 - a) * self.weight + a;
    }

    /// Current average; NaN before the first update.
    pub fn get(&self) -> f64 {
        if self.weight > 0.0 {
            self.value / self.weight
        } else {
            f64::NAN
        }
    }
}

/// One row of the training trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    /// Completed optimizer steps.
    pub iter: u64,
    pub wall_seconds: f64,
    pub lr: f64,
    pub elbo: f64,
    pub ema_elbo: f64,
}

impl TraceRecord {
    pub const CSV_HEADER: &'static str = "iter,wall_seconds,lr,elbo,ema_elbo";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{:.6},{:e},{:?},{:?}",
            self.iter, self.wall_seconds, self.lr, self.elbo, self.ema_elbo
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Total optimizer steps; training resumes from the state's counter.
    pub iters: u64,
    pub n_mc: usize,
    /// Branches per minibatch; `None` uses every branch.
    pub batch_size: Option<usize>,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Emit a trace row every this many steps (and after the last).
    pub trace_every: u64,
    pub ema_smoothing: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iters: 10_000,
            n_mc: DEFAULT_N_MC,
            batch_size: None,
            schedule: LrSchedule::default(),
            seed: 0,
            trace_every: 100,
            ema_smoothing: DEFAULT_EMA_SMOOTHING,
        }
    }
}

/// Mutable state of a run; round-trips through [`Checkpoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub posterior: Posterior,
    pub adam: AdamState,
    pub iter: u64,
    pub ema: Ema,
}

impl TrainState {
    pub fn new(posterior: Posterior, ema_smoothing: f64) -> Self {
        let adam = AdamState::new(crate::families::Params::num_params(&posterior));
        Self {
            posterior,
            adam,
            iter: 0,
            ema: Ema::new(ema_smoothing),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, ema_smoothing: f64) -> Self {
        let n = crate::families::Params::num_params(&ck.posterior);
        Self {
            adam: ck.adam.unwrap_or_else(|| AdamState::new(n)),
            iter: ck.iter,
            ema: ck.ema.unwrap_or_else(|| Ema::new(ema_smoothing)),
            posterior: ck.posterior,
        }
    }

    pub fn to_checkpoint(&self, dims: Dims, num_branches: usize) -> Checkpoint {
        Checkpoint {
            posterior: self.posterior.clone(),
            dims,
            num_branches,
            adam: Some(self.adam.clone()),
            iter: self.iter,
            ema: Some(self.ema),
        }
    }
}

/// Builds the minibatch sampler for a run, enforcing that joint families
/// see every branch.
pub fn make_sampler(
    kind: FamilyKind,
    num_branches: usize,
    batch_size: Option<usize>,
) -> Result<MinibatchSampler> {
    match batch_size {
        None => Ok(MinibatchSampler::full(num_branches)),
        Some(b) if b == num_branches => Ok(MinibatchSampler::full(num_branches)),
        Some(b) => {
            if kind == FamilyKind::Joint {
                return Err(Error::Precondition(format!(
                    "joint families need the full batch ({num_branches}), got {b}"
                )));
            }
            MinibatchSampler::new(num_branches, b)
        }
    }
}

/// Runs optimizer steps `state.iter..cfg.iters`. Step `t` draws all of its
/// randomness from `RngStream::new(cfg.seed, t)`, so a resumed run repeats
/// the uninterrupted one.
pub fn train(
    model: &dyn HbdModel,
    data: &BranchDataset,
    state: &mut TrainState,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TraceRecord) -> Result<()>,
) -> Result<()> {
    if let Some(n) = state.posterior.num_branches() {
        if n != data.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset branches vs family branches",
                expected: n,
                got: data.len(),
            });
        }
    }
    let sampler = make_sampler(state.posterior.kind(), data.len(), cfg.batch_size)?;
    let start = Instant::now();
    let every = cfg.trace_every.max(1);
    while state.iter < cfg.iters {
        let t = state.iter;
        let at = |source: Error| Error::AtIteration {
            iter: t,
            source: Box::new(source),
        };
        let lr = cfg.schedule.lr_at(t);
        let stream = RngStream::new(cfg.seed, t);
        let (est, grad) = state
            .posterior
            .estimate(model, data, &sampler, &stream, cfg.n_mc)
            .map_err(at)?;
        state
            .adam
            .step(&mut state.posterior, &grad, lr)
            .map_err(at)?;
        state.ema.update(est.value);
        state.iter += 1;
        if state.iter.is_multiple_of(every) || state.iter == cfg.iters {
            on_record(&TraceRecord {
                iter: state.iter,
                wall_seconds: start.elapsed().as_secs_f64(),
                lr,
                elbo: est.value,
                ema_elbo: state.ema.get(),
            })?;
        }
    }
    Ok(())
}
