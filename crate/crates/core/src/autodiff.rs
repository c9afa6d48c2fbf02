//! Exact gradients of the trajectory loss, by reverse-mode differentiation
//! through the unrolled RK4 rollout (discretize-then-optimize).
//!
//! The forward pass records, for every RK4 step, the step's start state and
//! its first three stage slopes; those four vectors determine every stage
//! input. The backward pass walks the steps in reverse and pulls the
//! cotangent through each stage with the field's vector–Jacobian product,
//! accumulating `∂L/∂θ` along the way.

use std::cell::RefCell;

use crate::dynamics::{State3, Trajectory};
use crate::error::{Blowup, Error, Result};
use crate::integrate::{integrate, IntegratorConfig, VectorField};

/// A vector field `f(t, u; θ)` that can be differentiated with respect to
/// both `u` and `θ`.
pub trait ParamField {
    fn param_count(&self) -> usize;

    fn eval(&mut self, theta: &[f64], t: f64, u: &State3) -> State3;

    /// Returns `(∂f/∂u)ᵀ cot` and adds `(∂f/∂θ)ᵀ cot` into `grad`.
    fn vjp(&mut self, theta: &[f64], t: f64, u: &State3, cot: &State3, grad: &mut [f64]) -> State3;
}

/// Adapter exposing a `ParamField` at fixed θ as a plain [`VectorField`].
pub struct Frozen<'a, F: ParamField> {
    field: RefCell<&'a mut F>,
    theta: &'a [f64],
}

impl<'a, F: ParamField> Frozen<'a, F> {
    pub fn new(field: &'a mut F, theta: &'a [f64]) -> Self {
        Frozen {
            field: RefCell::new(field),
            theta,
        }
    }
}

impl<F: ParamField> VectorField for Frozen<'_, F> {
    fn eval(&self, t: f64, u: &State3) -> State3 {
        self.field.borrow_mut().eval(self.theta, t, u)
    }
}

/// Initial condition, time span and grid of a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rollout {
    pub u0: State3,
    pub t0: f64,
    pub t1: f64,
    pub grid: IntegratorConfig,
}

impl Rollout {
    pub fn save_times(&self) -> Vec<f64> {
        self.grid.save_times(self.t0, self.t1)
    }

    /// Integrates `field` at `theta` over this rollout.
    pub fn run<F: ParamField>(&self, field: &mut F, theta: &[f64]) -> std::result::Result<Trajectory, Blowup> {
        let frozen = Frozen::new(field, theta);
        integrate(&frozen, self.u0, self.t0, self.t1, &self.grid)
    }
}

/// Loss value and its gradient with respect to θ.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Sum of squared errors over every saved time and all three components.
pub fn trajectory_loss(pred: &Trajectory, truth: &Trajectory) -> Result<f64> {
    if !pred.same_grid(truth) {
        return Err(Error::contract(format!(
            "prediction grid ({} samples) does not match truth grid ({} samples)",
            pred.len(),
            truth.len()
        )));
    }
    Ok(pred
        .states()
        .iter()
        .zip(truth.states())
        .map(|(p, q)| (*p - *q).0.iter().map(|d| d * d).sum::<f64>())
        .sum())
}

/// Loss only; no tape.
pub fn rollout_loss<F: ParamField>(
    field: &mut F,
    theta: &[f64],
    rollout: &Rollout,
    truth: &Trajectory,
) -> Result<f64> {
    let pred = rollout.run(field, theta)?;
    trajectory_loss(&pred, truth)
}

/// SSE of the rollout against `truth` and its exact gradient.
pub fn loss_and_grad<F: ParamField>(
    field: &mut F,
    theta: &[f64],
    rollout: &Rollout,
    truth: &Trajectory,
) -> Result<LossReport> {
    weighted_loss_and_grad(field, theta, rollout, truth, None)
}

/// `Σ_k w_k ‖pred_k − truth_k‖²` and its gradient. `weights = None` means all
/// ones, i.e. plain SSE.
pub fn weighted_loss_and_grad<F: ParamField>(
    field: &mut F,
    theta: &[f64],
    rollout: &Rollout,
    truth: &Trajectory,
    weights: Option<&[f64]>,
) -> Result<LossReport> {
    if theta.len() != field.param_count() {
        return Err(Error::contract(format!(
            "θ has {} entries, the field needs {}",
            theta.len(),
            field.param_count()
        )));
    }
    let grid = &rollout.grid;
    let n_saves = grid.intervals(rollout.t0, rollout.t1);
    if !grid.grid_matches(rollout.t0, rollout.t1, truth.times()) {
        return Err(Error::contract(format!(
            "truth grid ({} samples) does not match the rollout's save grid ({} samples)",
            truth.len(),
            n_saves + 1
        )));
    }
    if let Some(w) = weights {
        if w.len() != truth.len() {
            return Err(Error::contract("one loss weight per saved sample is required"));
        }
    }
    let weight = |k: usize| weights.map_or(1.0, |w| w[k]);

    let sub = grid.substeps();
    let h = grid.step();
    let half = 0.5 * h;
    let n_steps = n_saves * sub;

    // Forward pass with tape.
    let mut tape: Vec<[State3; 4]> = Vec::with_capacity(n_steps);
    let mut saved = Vec::with_capacity(n_saves + 1);
    saved.push(rollout.u0);
    let mut u = rollout.u0;
    for i in 0..n_steps {
        let t = grid.step_time(rollout.t0, i);
        let k1 = field.eval(theta, t, &u);
        let k2 = field.eval(theta, t + half, &u.axpy(half, &k1));
        let k3 = field.eval(theta, t + half, &u.axpy(half, &k2));
        let k4 = field.eval(theta, t + h, &u.axpy(h, &k3));
        tape.push([u, k1, k2, k3]);
        let mut next = u;
        for c in 0..3 {
            next[c] += h / 6.0 * (k1[c] + 2.0 * k2[c] + 2.0 * k3[c] + k4[c]);
        }
        if !next.is_finite() {
            let mut times = rollout.save_times();
            times.truncate(saved.len());
            return Err(Blowup {
                time: t + h,
                partial: Trajectory::from_parts_unchecked(times, saved),
            }
            .into());
        }
        u = next;
        if (i + 1) % sub == 0 {
            saved.push(u);
        }
    }

    let mut value = 0.0;
    for (k, (p, q)) in saved.iter().zip(truth.states()).enumerate() {
        value += weight(k) * (*p - *q).0.iter().map(|d| d * d).sum::<f64>();
    }

    // Backward pass.
    let mut grad = vec![0.0; theta.len()];
    let mut bar = State3::ZERO;
    for i in (0..n_steps).rev() {
        if (i + 1) % sub == 0 {
            let k = (i + 1) / sub;
            bar = bar.axpy(2.0 * weight(k), &(saved[k] - truth.states()[k]));
        }
        let [u, k1, k2, k3] = tape[i];
        let t = grid.step_time(rollout.t0, i);
        let mut k1_bar = bar * (h / 6.0);
        let mut k2_bar = bar * (h / 3.0);
        let mut k3_bar = bar * (h / 3.0);
        let k4_bar = bar * (h / 6.0);

        let s4 = field.vjp(theta, t + h, &u.axpy(h, &k3), &k4_bar, &mut grad);
        bar = bar + s4;
        k3_bar = k3_bar.axpy(h, &s4);

        let s3 = field.vjp(theta, t + half, &u.axpy(half, &k2), &k3_bar, &mut grad);
        bar = bar + s3;
        k2_bar = k2_bar.axpy(half, &s3);

        let s2 = field.vjp(theta, t + half, &u.axpy(half, &k1), &k2_bar, &mut grad);
        bar = bar + s2;
        k1_bar = k1_bar.axpy(half, &s2);

        let s1 = field.vjp(theta, t, &u, &k1_bar, &mut grad);
        bar = bar + s1;
    }

    Ok(LossReport { value, gradient: grad })
}

/// Central finite differences of `f` at `theta`: the reference gradient the
/// reverse pass is checked against.
pub fn central_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + eps;
            let up = f(&probe);
            probe[i] = theta[i] - eps;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Per-coordinate relative discrepancy `|a − b| / max(|a|, |b|, floor)`.
///
/// The floor keeps coordinates whose true gradient is (numerically) zero
/// from reporting a huge relative error from rounding noise alone.
pub fn relative_errors(analytic: &[f64], reference: &[f64], floor: f64) -> Vec<f64> {
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .collect()
}
