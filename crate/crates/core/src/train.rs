//! Training loop shared by the Neural ODE and UDE problems.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{loss_and_grad, ParamField, Rollout};
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::net::FlatParams;
use crate::optim::{adam_step, bfgs_minimize_observed, radam_step, AdamState, BfgsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Radam,
    /// Adam for most of the budget, then BFGS from the best Adam iterate.
    AdamBfgs,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Radam => "radam",
            OptimizerKind::AdamBfgs => "adam_bfgs",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "radam" => Ok(OptimizerKind::Radam),
            "adam_bfgs" => Ok(OptimizerKind::AdamBfgs),
            other => Err(Error::Parse(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// How θ is optimized: algorithm, learning rate, budget and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Total iteration budget (Adam steps plus BFGS iterations).
    pub iterations: usize,
    /// Share of the budget given to BFGS under [`OptimizerKind::AdamBfgs`].
    #[serde(default = "default_bfgs_fraction")]
    pub bfgs_fraction: f64,
    /// Seeds the network initialization.
    pub seed: u64,
}

fn default_bfgs_fraction() -> f64 {
    0.1
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            lr: 0.01,
            iterations: 50_000,
            bfgs_fraction: 0.1,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config {
                key: "iterations".into(),
                message: "the iteration budget must be at least 1".into(),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config {
                key: "lr".into(),
                message: format!("learning rate must be positive, got {}", self.lr),
            });
        }
        if !(0.0..=1.0).contains(&self.bfgs_fraction) {
            return Err(Error::Config {
                key: "bfgs_fraction".into(),
                message: format!("must lie in [0, 1], got {}", self.bfgs_fraction),
            });
        }
        Ok(())
    }

    /// `(adam_iterations, bfgs_iterations)`.
    pub fn split(&self) -> (usize, usize) {
        match self.optimizer {
            OptimizerKind::AdamBfgs => {
                let bfgs = (self.iterations as f64 * self.bfgs_fraction).round() as usize;
                let bfgs = bfgs.min(self.iterations);
                (self.iterations - bfgs, bfgs)
            }
            _ => (self.iterations, 0),
        }
    }
}

/// Consecutive non-finite rollouts tolerated before training gives up.
pub const MAX_CONSECUTIVE_BLOWUPS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Best parameters seen.
    pub theta: FlatParams,
    /// Loss at the start of every iteration; `inf` marks a blown-up rollout.
    pub history: Vec<f64>,
    /// Loss at `theta`.
    pub final_loss: f64,
    pub adam_iterations: usize,
    pub bfgs_iterations: usize,
    pub bfgs_line_search_failed: bool,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.history.first().copied().unwrap_or(f64::NAN)
    }

    /// Running minimum of the history.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.history
            .iter()
            .map(|&v| {
                best = best.min(v);
                best
            })
            .collect()
    }
}

/// Fits `field` to `truth` from `theta0`.
///
/// A step that lands on a blown-up rollout is retried from the last good
/// point with the step length halved per consecutive failure; more than
/// [`MAX_CONSECUTIVE_BLOWUPS`] failures in a row is reported as divergence.
pub fn fit<F: ParamField>(
    field: &mut F,
    theta0: FlatParams,
    rollout: &Rollout,
    truth: &Trajectory,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    fit_observed(field, theta0, rollout, truth, config, |_, _| {})
}

/// [`fit`] with a callback `observe(iteration, loss)` per iteration.
pub fn fit_observed<F: ParamField>(
    field: &mut F,
    theta0: FlatParams,
    rollout: &Rollout,
    truth: &Trajectory,
    config: &TrainConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    if theta0.len() != field.param_count() {
        return Err(Error::contract(format!(
            "θ has {} entries, the field needs {}",
            theta0.len(),
            field.param_count()
        )));
    }
    let (n_adam, n_bfgs) = config.split();
    let step_fn = match config.optimizer {
        OptimizerKind::Radam => radam_step,
        _ => adam_step,
    };

    let mut theta = theta0.0;
    let mut history = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, theta.clone());
    let mut state = AdamState::new(theta.len(), config.lr);
    // last point with a finite loss, the optimizer state there and its gradient
    let mut anchor: Option<(Vec<f64>, AdamState, Vec<f64>)> = None;
    let mut consecutive = 0usize;

    for it in 0..n_adam {
        match loss_and_grad(field, &theta, rollout, truth) {
            Ok(rep) if rep.value.is_finite() && rep.gradient.iter().all(|g| g.is_finite()) => {
                consecutive = 0;
                history.push(rep.value);
                observe(it, rep.value);
                if rep.value < best.0 {
                    best = (rep.value, theta.clone());
                }
                anchor = Some((theta.clone(), state.clone(), rep.gradient.clone()));
                step_fn(&mut state, &mut theta, &rep.gradient);
            }
            Ok(_) | Err(Error::Blowup(_)) => {
                consecutive += 1;
                history.push(f64::INFINITY);
                observe(it, f64::INFINITY);
                if consecutive > MAX_CONSECUTIVE_BLOWUPS {
                    return Err(Error::Diverged { consecutive, history });
                }
                let Some((good, good_state, grad)) = &anchor else {
                    return Err(Error::Diverged { consecutive, history });
                };
                theta.clone_from(good);
                state = good_state.clone();
                state.lr = config.lr * 0.5f64.powi(consecutive.min(60) as i32);
                step_fn(&mut state, &mut theta, grad);
                state.lr = config.lr;
            }
            Err(e) => return Err(e),
        }
    }

    let mut bfgs_iterations = 0;
    let mut line_search_failed = false;
    if n_bfgs > 0 {
        let start = if best.0.is_finite() { best.1.clone() } else { theta.clone() };
        let mut objective = |x: &[f64]| match loss_and_grad(field, x, rollout, truth) {
            Ok(rep) if rep.value.is_finite() => (rep.value, rep.gradient),
            _ => (f64::INFINITY, vec![0.0; x.len()]),
        };
        let opts = BfgsOptions {
            max_iters: n_bfgs,
            grad_tol: 1e-10,
            ..BfgsOptions::default()
        };
        let offset = n_adam;
        let out = bfgs_minimize_observed(&mut objective, &start, &opts, |i, s| {
            history.push(s.value);
            observe(offset + i, s.value);
        });
        bfgs_iterations = out.iterations;
        line_search_failed = out.line_search_failed;
        if out.value < best.0 {
            best = (out.value, out.theta);
        }
    }

    if !best.0.is_finite() {
        return Err(Error::Diverged {
            consecutive,
            history,
        });
    }
    Ok(TrainOutcome {
        theta: FlatParams(best.1),
        history,
        final_loss: best.0,
        adam_iterations: n_adam,
        bfgs_iterations,
        bfgs_line_search_failed: line_search_failed,
    })
}
