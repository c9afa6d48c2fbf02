//! Fixed-step classical Runge–Kutta integration.
//!
//! Every rollout in the crate (ground truth, Neural ODE, UDE) goes through
//! [`rk4_step`], which is what makes the backward pass in
//! [`crate::autodiff`] an exact derivative of the computed trajectory.

use serde::{Deserialize, Serialize};

use crate::dynamics::{State3, Trajectory};
use crate::error::{Blowup, Error, Result};

/// A (possibly time-dependent) vector field `du/dt = f(t, u)`.
pub trait VectorField {
    fn eval(&self, t: f64, u: &State3) -> State3;
}

impl<F> VectorField for F
where
    F: Fn(f64, &State3) -> State3,
{
    #[inline]
    fn eval(&self, t: f64, u: &State3) -> State3 {
        self(t, u)
    }
}

/// Internal step and output grid of a fixed-step integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    step: f64,
    save_dt: f64,
    substeps: usize,
}

impl IntegratorConfig {
    /// `save_dt` must be a positive integer multiple of `step` (relative
    /// slack 1e−9).
    pub fn new(step: f64, save_dt: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::contract(format!("integrator step must be > 0, got {step}")));
        }
        if !(save_dt > 0.0 && save_dt.is_finite()) {
            return Err(Error::contract(format!("save_dt must be > 0, got {save_dt}")));
        }
        let ratio = save_dt / step;
        let substeps = ratio.round();
        if substeps < 1.0 || (ratio - substeps).abs() > 1e-9 * ratio {
            return Err(Error::contract(format!(
                "save_dt ({save_dt}) must be an integer multiple of step ({step})"
            )));
        }
        Ok(IntegratorConfig {
            step,
            save_dt,
            substeps: substeps as usize,
        })
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn save_dt(&self) -> f64 {
        self.save_dt
    }

    /// RK4 steps per saved sample.
    pub fn substeps(&self) -> usize {
        self.substeps
    }

    /// Number of save intervals that fit in `[t0, t1]`.
    pub fn intervals(&self, t0: f64, t1: f64) -> usize {
        let n = (t1 - t0) / self.save_dt;
        (n + 1e-9).floor().max(0.0) as usize
    }

    /// The saved-sample times on `[t0, t1]`.
    pub fn save_times(&self, t0: f64, t1: f64) -> Vec<f64> {
        (0..=self.intervals(t0, t1))
            .map(|k| t0 + k as f64 * self.save_dt)
            .collect()
    }

    /// True when `times` is exactly this config's save grid on `[t0, t1]`
    /// (to 1e−9).
    pub fn grid_matches(&self, t0: f64, t1: f64, times: &[f64]) -> bool {
        let expected = self.save_times(t0, t1);
        expected.len() == times.len()
            && expected
                .iter()
                .zip(times)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()))
    }

    /// Time at internal step `i`, computed directly rather than accumulated.
    #[inline]
    pub(crate) fn step_time(&self, t0: f64, i: usize) -> f64 {
        t0 + i as f64 * self.step
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig::new(0.01, 0.1).expect("valid default grid")
    }
}

/// One classical RK4 step: `u + h/6 (k1 + 2k2 + 2k3 + k4)`.
///
/// Returns the failing stage time if any stage evaluation is non-finite.
#[inline]
pub fn rk4_step<F: VectorField + ?Sized>(
    field: &F,
    state: &State3,
    t: f64,
    h: f64,
) -> std::result::Result<State3, f64> {
    let half = 0.5 * h;
    let k1 = field.eval(t, state);
    if !k1.is_finite() {
        return Err(t);
    }
    let k2 = field.eval(t + half, &state.axpy(half, &k1));
    if !k2.is_finite() {
        return Err(t + half);
    }
    let k3 = field.eval(t + half, &state.axpy(half, &k2));
    if !k3.is_finite() {
        return Err(t + half);
    }
    let k4 = field.eval(t + h, &state.axpy(h, &k3));
    if !k4.is_finite() {
        return Err(t + h);
    }
    let sixth = h / 6.0;
    let mut next = *state;
    for i in 0..3 {
        next[i] += sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    if !next.is_finite() {
        return Err(t + h);
    }
    Ok(next)
}

/// Integrates `field` from `u0` at `t0` to `t1`, saving every
/// `cfg.save_dt()`. The first sample is `u0` exactly.
///
/// When `t1 − t0` is not a whole number of save intervals the run stops at
/// the last grid point before `t1`.
pub fn integrate<F: VectorField + ?Sized>(
    field: &F,
    u0: State3,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> std::result::Result<Trajectory, Blowup> {
    let n = cfg.intervals(t0, t1);
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(t0);
    states.push(u0);
    let h = cfg.step();
    let mut u = u0;
    let mut i = 0;
    for k in 1..=n {
        for _ in 0..cfg.substeps() {
            let t = cfg.step_time(t0, i);
            u = match rk4_step(field, &u, t, h) {
                Ok(next) => next,
                Err(time) => {
                    return Err(Blowup {
                        time,
                        partial: Trajectory::from_parts_unchecked(times, states),
                    })
                }
            };
            i += 1;
        }
        times.push(t0 + k as f64 * cfg.save_dt());
        states.push(u);
    }
    Ok(Trajectory::from_parts_unchecked(times, states))
}
