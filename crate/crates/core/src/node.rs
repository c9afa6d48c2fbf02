//! Neural ODE: a network replaces the whole Lorenz right-hand side,
//! `du/dt = NN(u; θ)`.
//!
//! The network is autonomous (three inputs); time enters only through the
//! integration.

use crate::autodiff::{ParamField, Rollout};
use crate::dynamics::{simulate_truth_with, LorenzParams, State3, Trajectory};
use crate::error::{Blowup, Error, Result};
use crate::integrate::IntegratorConfig;
use crate::net::{init_params, FlatParams, Mlp, MlpSpec};
use crate::train::{fit_observed, TrainConfig, TrainOutcome};

/// `du/dt = NN(u)` as a differentiable field.
#[derive(Debug, Clone)]
pub struct NodeField {
    mlp: Mlp,
}

impl NodeField {
    pub fn new(spec: MlpSpec) -> Self {
        NodeField { mlp: Mlp::new(spec) }
    }
}

impl ParamField for NodeField {
    fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    #[inline]
    fn eval(&mut self, theta: &[f64], _t: f64, u: &State3) -> State3 {
        let o = self.mlp.forward(theta, &u.0);
        State3::new(o[0], o[1], o[2])
    }

    #[inline]
    fn vjp(&mut self, theta: &[f64], _t: f64, u: &State3, cot: &State3, grad: &mut [f64]) -> State3 {
        let mut du = State3::ZERO;
        self.mlp.backward(theta, &u.0, &cot.0, grad, &mut du.0);
        du
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProblem {
    pub spec: MlpSpec,
    pub u0: State3,
    pub train_span: (f64, f64),
    pub grid: IntegratorConfig,
    pub truth: Trajectory,
}

impl NodeProblem {
    pub fn new(
        spec: MlpSpec,
        u0: State3,
        train_span: (f64, f64),
        grid: IntegratorConfig,
        truth: Trajectory,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.input_dim != 3 || spec.output_dim != 3 {
            return Err(Error::contract(format!(
                "a Neural ODE network maps 3 → 3, got {spec}"
            )));
        }
        if !grid.grid_matches(train_span.0, train_span.1, truth.times()) {
            return Err(Error::contract(
                "truth trajectory does not match the training span and save grid",
            ));
        }
        Ok(NodeProblem {
            spec,
            u0,
            train_span,
            grid,
            truth,
        })
    }

    /// Problem whose truth is the Lorenz system itself.
    pub fn lorenz(
        spec: MlpSpec,
        params: &LorenzParams,
        u0: State3,
        train_span: (f64, f64),
        grid: IntegratorConfig,
    ) -> Result<Self> {
        let truth = simulate_truth_with(u0, params, train_span.0, train_span.1, &grid)?;
        NodeProblem::new(spec, u0, train_span, grid, truth)
    }

    /// Same problem with different targets, e.g. noisy observations.
    pub fn with_truth(&self, truth: Trajectory) -> Result<Self> {
        NodeProblem::new(self.spec.clone(), self.u0, self.train_span, self.grid, truth)
    }

    pub fn field(&self) -> NodeField {
        NodeField::new(self.spec.clone())
    }

    pub fn rollout(&self) -> Rollout {
        self.rollout_to(self.train_span.1)
    }

    pub fn rollout_to(&self, t1: f64) -> Rollout {
        Rollout {
            u0: self.u0,
            t0: self.train_span.0,
            t1,
            grid: self.grid,
        }
    }

    pub fn init_params(&self, seed: u64) -> FlatParams {
        init_params(&self.spec, seed)
    }

    fn check_theta(&self, theta: &FlatParams) -> Result<()> {
        if theta.len() != self.spec.param_count() {
            return Err(Error::contract(format!(
                "θ has {} entries, {} needs {}",
                theta.len(),
                self.spec,
                self.spec.param_count()
            )));
        }
        Ok(())
    }
}

/// Integrates the Neural ODE over the training span.
pub fn node_rollout(problem: &NodeProblem, theta: &FlatParams) -> Result<Trajectory> {
    problem.check_theta(theta)?;
    Ok(problem.rollout().run(&mut problem.field(), &theta.0)?)
}

/// Trains from the seeded Glorot initialization.
pub fn train_node(problem: &NodeProblem, config: &TrainConfig) -> Result<TrainOutcome> {
    train_node_observed(problem, config, |_, _| {})
}

pub fn train_node_observed(
    problem: &NodeProblem,
    config: &TrainConfig,
    observe: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let theta0 = problem.init_params(config.seed);
    fit_observed(
        &mut problem.field(),
        theta0,
        &problem.rollout(),
        &problem.truth,
        config,
        observe,
    )
}

/// Rolls the trained model out from `u0` to `horizon_t1` without retraining.
///
/// On blowup the error carries the samples computed so far.
pub fn forecast(
    problem: &NodeProblem,
    theta: &FlatParams,
    horizon_t1: f64,
) -> Result<Trajectory, Error> {
    problem.check_theta(theta)?;
    if horizon_t1 < problem.train_span.1 {
        return Err(Error::contract(format!(
            "forecast horizon {horizon_t1} ends before the training span ({})",
            problem.train_span.1
        )));
    }
    problem
        .rollout_to(horizon_t1)
        .run(&mut problem.field(), &theta.0)
        .map_err(|b: Blowup| b.into())
}
