//! Universal differential equation for the Lorenz system: known structure
//! with three learned terms,
//!
//! ```text
//! dx/dt = σ (y − NN1)
//! dy/dt = −y + 0.1 · NN2
//! dz/dt = −β + z + 10 · NN3      (verbatim form)
//! dz/dt = −β z + 10 · NN3        (corrected form)
//! ```
//!
//! Equating each line with the true Lorenz field identifies what each
//! network has to learn; see [`analytic_targets`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamField, Rollout};
use crate::dynamics::{fmt17, simulate_truth_with, LorenzParams, State3, Trajectory};
use crate::error::{Blowup, Error, Result};
use crate::integrate::IntegratorConfig;
use crate::net::{init_params, FlatParams, Mlp, MlpSpec};
use crate::train::{fit_observed, TrainConfig, TrainOutcome};

/// Scale applied to NN2 in the y equation.
pub const NN2_SCALE: f64 = 0.1;
/// Scale applied to NN3 in the z equation.
pub const NN3_SCALE: f64 = 10.0;

/// Which inputs the networks see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// `(x, y, z)`.
    State,
    /// `(t, x, y, z)`.
    TimeAndState,
}

impl InputMode {
    pub fn width(self) -> usize {
        match self {
            InputMode::State => 3,
            InputMode::TimeAndState => 4,
        }
    }
}

/// Known part of the z equation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZEquation {
    /// `−β + z + 10·NN3`.
    Verbatim,
    /// `−β z + 10·NN3`.
    Corrected,
}

/// One network with three outputs, or three single-output networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NetLayout {
    #[default]
    Shared,
    Separate,
}

/// The residuals `(g1, g2, g3)` that make the UDE reproduce the Lorenz field
/// exactly at `state`:
///
/// * `g1 = x`
/// * `g2 = 10 · x (ρ − z)`
/// * `g3 = (x y − β z + β − z) / 10` (verbatim) or `x y / 10` (corrected)
pub fn analytic_targets(state: &State3, p: &LorenzParams, form: ZEquation) -> [f64; 3] {
    let [x, y, z] = state.0;
    let g1 = x;
    let g2 = x * (p.rho - z) / NN2_SCALE;
    let g3 = match form {
        ZEquation::Verbatim => (x * y - p.beta * z + p.beta - z) / NN3_SCALE,
        ZEquation::Corrected => x * y / NN3_SCALE,
    };
    [g1, g2, g3]
}

/// The UDE right-hand side given the three network outputs `n`.
#[inline]
pub fn ude_rhs_from_outputs(state: &State3, n: &[f64; 3], p: &LorenzParams, form: ZEquation) -> State3 {
    let [_, y, z] = state.0;
    let dz = match form {
        ZEquation::Verbatim => -p.beta + z + NN3_SCALE * n[2],
        ZEquation::Corrected => -p.beta * z + NN3_SCALE * n[2],
    };
    State3::new(p.sigma * (y - n[0]), -y + NN2_SCALE * n[1], dz)
}

/// Differentiable UDE vector field.
#[derive(Debug, Clone)]
pub struct UdeField {
    nets: Vec<Mlp>,
    offsets: Vec<usize>,
    input_mode: InputMode,
    form: ZEquation,
    params: LorenzParams,
    input: [f64; 4],
}

impl UdeField {
    pub fn new(spec: &MlpSpec, layout: NetLayout, input_mode: InputMode, form: ZEquation, params: LorenzParams) -> Self {
        let specs = member_specs(spec, layout);
        let mut offsets = Vec::with_capacity(specs.len());
        let mut off = 0;
        for s in &specs {
            offsets.push(off);
            off += s.param_count();
        }
        UdeField {
            nets: specs.into_iter().map(Mlp::new).collect(),
            offsets,
            input_mode,
            form,
            params,
            input: [0.0; 4],
        }
    }

    fn fill_input(&mut self, t: f64, u: &State3) -> usize {
        match self.input_mode {
            InputMode::State => {
                self.input[..3].copy_from_slice(&u.0);
                3
            }
            InputMode::TimeAndState => {
                self.input[0] = t;
                self.input[1..].copy_from_slice(&u.0);
                4
            }
        }
    }

    /// The three network outputs `(NN1, NN2, NN3)` at `(t, u)`.
    pub fn outputs(&mut self, theta: &[f64], t: f64, u: &State3) -> [f64; 3] {
        let w = self.fill_input(t, u);
        let input = self.input;
        if self.nets.len() == 1 {
            let n = self.nets[0].param_count();
            let o = self.nets[0].forward(&theta[..n], &input[..w]);
            [o[0], o[1], o[2]]
        } else {
            let mut n = [0.0; 3];
            for (i, net) in self.nets.iter_mut().enumerate() {
                let off = self.offsets[i];
                n[i] = net.forward(&theta[off..off + net.param_count()], &input[..w])[0];
            }
            n
        }
    }
}

fn member_specs(spec: &MlpSpec, layout: NetLayout) -> Vec<MlpSpec> {
    match layout {
        NetLayout::Shared => vec![spec.clone()],
        NetLayout::Separate => (0..3)
            .map(|_| MlpSpec {
                output_dim: 1,
                ..spec.clone()
            })
            .collect(),
    }
}

impl ParamField for UdeField {
    fn param_count(&self) -> usize {
        self.nets.iter().map(Mlp::param_count).sum()
    }

    #[inline]
    fn eval(&mut self, theta: &[f64], t: f64, u: &State3) -> State3 {
        let n = self.outputs(theta, t, u);
        ude_rhs_from_outputs(u, &n, &self.params, self.form)
    }

    fn vjp(&mut self, theta: &[f64], t: f64, u: &State3, cot: &State3, grad: &mut [f64]) -> State3 {
        let p = self.params;
        // cotangents of the three network outputs
        let n_bar = [-p.sigma * cot[0], NN2_SCALE * cot[1], NN3_SCALE * cot[2]];
        // direct dependence on the state
        let dz_dz = match self.form {
            ZEquation::Verbatim => 1.0,
            ZEquation::Corrected => -p.beta,
        };
        let mut du = State3::new(0.0, p.sigma * cot[0] - cot[1], dz_dz * cot[2]);

        let w = self.fill_input(t, u);
        let input = self.input;
        let mut in_bar = [0.0; 4];
        let mut accumulate = |in_bar_part: &[f64]| {
            for (a, b) in in_bar[..w].iter_mut().zip(in_bar_part) {
                *a += b;
            }
        };
        if self.nets.len() == 1 {
            let n = self.nets[0].param_count();
            let mut part = [0.0; 4];
            self.nets[0].backward(&theta[..n], &input[..w], &n_bar, &mut grad[..n], &mut part[..w]);
            accumulate(&part[..w]);
        } else {
            for (i, net) in self.nets.iter_mut().enumerate() {
                let off = self.offsets[i];
                let n = net.param_count();
                let mut part = [0.0; 4];
                net.backward(
                    &theta[off..off + n],
                    &input[..w],
                    &n_bar[i..i + 1],
                    &mut grad[off..off + n],
                    &mut part[..w],
                );
                accumulate(&part[..w]);
            }
        }
        let state_part = match self.input_mode {
            InputMode::State => &in_bar[..3],
            InputMode::TimeAndState => &in_bar[1..4],
        };
        for c in 0..3 {
            du[c] += state_part[c];
        }
        du
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UdeProblem {
    /// Output width 3. Under [`NetLayout::Separate`] each of the three
    /// networks uses this spec with a single output.
    pub spec: MlpSpec,
    pub layout: NetLayout,
    pub input_mode: InputMode,
    pub z_equation: ZEquation,
    pub params: LorenzParams,
    pub u0: State3,
    pub train_span: (f64, f64),
    pub grid: IntegratorConfig,
    pub truth: Trajectory,
}

impl UdeProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        spec: MlpSpec,
        layout: NetLayout,
        input_mode: InputMode,
        z_equation: ZEquation,
        params: LorenzParams,
        u0: State3,
        train_span: (f64, f64),
        grid: IntegratorConfig,
        truth: Trajectory,
    ) -> Result<Self> {
        spec.validate()?;
        if spec.output_dim != 3 {
            return Err(Error::contract(format!("UDE network needs 3 outputs, got {spec}")));
        }
        if spec.input_dim != input_mode.width() {
            return Err(Error::contract(format!(
                "input mode {input_mode:?} needs {} inputs, got {spec}",
                input_mode.width()
            )));
        }
        if !grid.grid_matches(train_span.0, train_span.1, truth.times()) {
            return Err(Error::contract(
                "truth trajectory does not match the training span and save grid",
            ));
        }
        Ok(UdeProblem {
            spec,
            layout,
            input_mode,
            z_equation,
            params,
            u0,
            train_span,
            grid,
            truth,
        })
    }

    /// Default construction: shared network, truth from the Lorenz system.
    pub fn lorenz(
        spec: MlpSpec,
        input_mode: InputMode,
        z_equation: ZEquation,
        params: LorenzParams,
        u0: State3,
        train_span: (f64, f64),
        grid: IntegratorConfig,
    ) -> Result<Self> {
        let truth = simulate_truth_with(u0, &params, train_span.0, train_span.1, &grid)?;
        UdeProblem::new(spec, NetLayout::Shared, input_mode, z_equation, params, u0, train_span, grid, truth)
    }

    pub fn with_truth(&self, truth: Trajectory) -> Result<Self> {
        UdeProblem::new(
            self.spec.clone(),
            self.layout,
            self.input_mode,
            self.z_equation,
            self.params,
            self.u0,
            self.train_span,
            self.grid,
            truth,
        )
    }

    pub fn with_layout(mut self, layout: NetLayout) -> Self {
        self.layout = layout;
        self
    }

    pub fn field(&self) -> UdeField {
        UdeField::new(&self.spec, self.layout, self.input_mode, self.z_equation, self.params)
    }

    pub fn param_count(&self) -> usize {
        member_specs(&self.spec, self.layout).iter().map(MlpSpec::param_count).sum()
    }

    /// Glorot initialization of every member network, concatenated.
    pub fn init_params(&self, seed: u64) -> FlatParams {
        let specs = member_specs(&self.spec, self.layout);
        if specs.len() == 1 {
            return init_params(&specs[0], seed);
        }
        let mut theta = Vec::with_capacity(self.param_count());
        for (i, s) in specs.iter().enumerate() {
            theta.extend(init_params(s, seed.wrapping_add(i as u64)).0);
        }
        FlatParams(theta)
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

    fn check_theta(&self, theta: &FlatParams) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::contract(format!(
                "θ has {} entries, the UDE networks need {}",
                theta.len(),
                self.param_count()
            )));
        }
        Ok(())
    }
}

/// The UDE right-hand side at `(state, t)`.
pub fn ude_rhs(state: &State3, t: f64, theta: &FlatParams, problem: &UdeProblem) -> Result<State3> {
    problem.check_theta(theta)?;
    Ok(problem.field().eval(&theta.0, t, state))
}

pub fn ude_rollout(problem: &UdeProblem, theta: &FlatParams) -> Result<Trajectory> {
    problem.check_theta(theta)?;
    Ok(problem.rollout().run(&mut problem.field(), &theta.0)?)
}

/// Rollout from `u0` to `horizon_t1 ≥` the end of the training span.
pub fn ude_forecast(problem: &UdeProblem, theta: &FlatParams, horizon_t1: f64) -> Result<Trajectory> {
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

/// Trains from the seeded initialization with the configured optimizer
/// (Adam followed by BFGS refinement by default).
pub fn train_ude(problem: &UdeProblem, config: &TrainConfig) -> Result<TrainOutcome> {
    train_ude_observed(problem, config, |_, _| {})
}

pub fn train_ude_observed(
    problem: &UdeProblem,
    config: &TrainConfig,
    observe: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    fit_observed(
        &mut problem.field(),
        problem.init_params(config.seed),
        &problem.rollout(),
        &problem.truth,
        config,
        observe,
    )
}

/// Learned network outputs paired with the analytic residuals along the
/// truth trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSamples {
    pub times: Vec<f64>,
    pub learned: Vec<[f64; 3]>,
    pub target: Vec<[f64; 3]>,
}

/// Per-term recovery quality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermError {
    pub rmse: f64,
    pub target_std: f64,
    /// `rmse / target_std`.
    pub normalized_rmse: f64,
}

impl ResidualSamples {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// RMSE of each learned term against its target, and that RMSE divided
    /// by the target's standard deviation.
    pub fn term_errors(&self) -> [TermError; 3] {
        let n = self.len().max(1) as f64;
        std::array::from_fn(|i| {
            let mse = self
                .learned
                .iter()
                .zip(&self.target)
                .map(|(a, b)| (a[i] - b[i]).powi(2))
                .sum::<f64>()
                / n;
            let mean = self.target.iter().map(|g| g[i]).sum::<f64>() / n;
            let var = self.target.iter().map(|g| (g[i] - mean).powi(2)).sum::<f64>() / n;
            let rmse = mse.sqrt();
            let target_std = var.sqrt();
            TermError {
                rmse,
                target_std,
                normalized_rmse: rmse / target_std,
            }
        })
    }

    /// CSV `t,nn1,g1,nn2,g2,nn3,g3`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,nn1,g1,nn2,g2,nn3,g3\n");
        for ((t, n), g) in self.times.iter().zip(&self.learned).zip(&self.target) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt17(*t),
                fmt17(n[0]),
                fmt17(g[0]),
                fmt17(n[1]),
                fmt17(g[1]),
                fmt17(n[2]),
                fmt17(g[2])
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Samples the learned terms and their analytic targets on the truth grid.
pub fn recover_terms(problem: &UdeProblem, theta: &FlatParams) -> Result<ResidualSamples> {
    problem.check_theta(theta)?;
    let mut field = problem.field();
    let mut out = ResidualSamples {
        times: Vec::with_capacity(problem.truth.len()),
        learned: Vec::with_capacity(problem.truth.len()),
        target: Vec::with_capacity(problem.truth.len()),
    };
    for (t, s) in problem.truth.iter() {
        out.times.push(t);
        out.learned.push(field.outputs(&theta.0, t, s));
        out.target.push(analytic_targets(s, &problem.params, problem.z_equation));
    }
    Ok(out)
}
