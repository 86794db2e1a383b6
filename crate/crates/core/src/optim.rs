//! Adam with a step-drop learning-rate schedule.
//!
//! The ELBO is maximized by running standard Adam descent on its negation.

use crate::error::{Error, Result};
use crate::families::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators of Adam, stored flat in parameter traversal order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub s: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            s: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn for_params<P: Params + ?Sized>(params: &P) -> Self {
        Self::new(params.num_params())
    }

    /// One ascent step on `params` along the ELBO gradient `grads`.
    ///
    /// A gradient with a non-finite entry is rejected before any state
    /// changes.
    pub fn step<P: Params + ?Sized, G: Params + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
        lr: f64,
    ) -> Result<()> {
        let g = grads.to_flat();
        let mut p = params.to_flat();
        self.step_flat(&mut p, &g, lr)?;
        params.set_flat(&p)
    }

    /// [`AdamState::step`] on flat vectors.
    pub fn step_flat(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "adam state vs parameters",
                expected: self.m.len(),
                got: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grads.len()
                },
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient {
                index,
                step: self.t + 1,
            });
        }
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        for ((p, &ascent), (m, s)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.s.iter_mut()))
        {
            let g = -ascent;
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *s = BETA2 * *s + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*s / c2).sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<P: Params + ?Sized, G: Params + ?Sized>(
    state: &mut AdamState,
    params: &mut P,
    grads: &G,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}

/// Piecewise-constant schedule `base · factor^min(⌊t / every⌋, max_drops)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub drop_every: u64,
    pub drop_factor: f64,
    pub max_drops: u32,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            drop_every: u64::MAX,
            drop_factor: 1.0,
            max_drops: 0,
        }
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        let drops = (t / self.drop_every.max(1)).min(self.max_drops as u64);
        self.base * self.drop_factor.powi(drops as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 1e-3,
            drop_every: 50_000,
            drop_factor: 0.1,
            max_drops: 3,
        }
    }
}

pub fn lr_at(sched: &LrSchedule, t: u64) -> f64 {
    sched.lr_at(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        st.step_flat(&mut p, &[0.0; 3], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_has_magnitude_lr() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0, 0.0];
        st.step_flat(&mut p, &[3.0, -0.25], 0.01).unwrap();
        assert!((p[0] - 0.01).abs() < 1e-9);
        assert!((p[1] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn climbs_a_quadratic() {
        // maximize −(x − 3)²
        let mut st = AdamState::new(1);
        let mut x = vec![0.0];
        for _ in 0..2000 {
            let g = -2.0 * (x[0] - 3.0);
            st.step_flat(&mut x, &[g], 0.05).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "{}", x[0]);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, 1.0];
        let r = st.step_flat(&mut p, &[0.5, f64::NAN], 0.1);
        assert!(matches!(
            r,
            Err(Error::NonFiniteGradient { index: 1, step: 1 })
        ));
        assert_eq!(st, AdamState::new(2));
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn first_step_is_scale_invariant() {
        let g = [0.3, -1.7, 4.0];
        let mut base = None;
        for c in [1.0, 10.0, 1e3] {
            let mut st = AdamState::new(3);
            let mut p = vec![0.0; 3];
            let gc: Vec<f64> = g.iter().map(|v| v * c).collect();
            st.step_flat(&mut p, &gc, 1e-3).unwrap();
            match &base {
                None => base = Some(p),
                Some(b) => {
                    for (x, y) in p.iter().zip(b) {
                        assert!((x - y).abs() / y.abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-3);
        assert!((s.lr_at(49_999) - 1e-3).abs() < 1e-18);
        assert!((s.lr_at(50_000) - 1e-4).abs() < 1e-15);
        assert!((s.lr_at(150_000) - 1e-6).abs() < 1e-18);
        assert!((s.lr_at(10_000_000) - 1e-6).abs() < 1e-18);
        let flat = LrSchedule { max_drops: 0, ..s };
        assert_eq!(flat.lr_at(1_000_000), 1e-3);
        assert_eq!(LrSchedule::constant(0.5).lr_at(u64::MAX), 0.5);
    }
}
