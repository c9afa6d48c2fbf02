//! The Lorenz system: parameters, vector field, fixed points and ground truth.
//!
//! ```text
//! dx/dt = σ (y − x)
//! dy/dt = x (ρ − z) − y
//! dz/dt = x y − β z
//! ```

use std::fmt::Write as _;
use std::ops::{Add, Index, IndexMut, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Blowup, Error, Result};
use crate::integrate::{integrate, IntegratorConfig};

/// Physical constants of the Lorenz system.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorenzParams {
    /// Prandtl number.
    pub sigma: f64,
    /// Rayleigh number.
    pub rho: f64,
    /// Geometric factor of the convection cells.
    pub beta: f64,
}

impl LorenzParams {
    /// σ = 10, ρ = 28, β = 8/3: the classic chaotic regime.
    pub const CANONICAL: LorenzParams = LorenzParams {
        sigma: 10.0,
        rho: 28.0,
        beta: 8.0 / 3.0,
    };

    pub fn new(sigma: f64, rho: f64, beta: f64) -> Result<Self> {
        if !(sigma.is_finite() && rho.is_finite() && beta.is_finite()) {
            return Err(Error::contract("Lorenz parameters must be finite"));
        }
        Ok(LorenzParams { sigma, rho, beta })
    }

    /// The three equilibria: the origin and the two convection centres
    /// `(±√(β(ρ−1)), ±√(β(ρ−1)), ρ−1)`.
    ///
    /// For ρ ≤ 1 the convection centres do not exist and only the origin is
    /// returned.
    pub fn fixed_points(&self) -> Vec<State3> {
        let mut out = vec![State3::ZERO];
        let r = self.beta * (self.rho - 1.0);
        if r > 0.0 {
            let c = r.sqrt();
            out.push(State3::new(c, c, self.rho - 1.0));
            out.push(State3::new(-c, -c, self.rho - 1.0));
        }
        out
    }
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self::CANONICAL
    }
}

/// A point in the three-dimensional Lorenz phase space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct State3(pub [f64; 3]);

impl State3 {
    pub const ZERO: State3 = State3([0.0; 3]);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        State3([x, y, z])
    }

    pub fn x(&self) -> f64 {
        self.0[0]
    }

    pub fn y(&self) -> f64 {
        self.0[1]
    }

    pub fn z(&self) -> f64 {
        self.0[2]
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + k * other`, the shape every Runge–Kutta stage needs.
    #[inline]
    pub fn axpy(&self, k: f64, other: &State3) -> State3 {
        State3([
            self.0[0] + k * other.0[0],
            self.0[1] + k * other.0[1],
            self.0[2] + k * other.0[2],
        ])
    }
}

impl From<[f64; 3]> for State3 {
    fn from(v: [f64; 3]) -> Self {
        State3(v)
    }
}

impl From<State3> for [f64; 3] {
    fn from(s: State3) -> Self {
        s.0
    }
}

impl Index<usize> for State3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for State3 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for State3 {
    type Output = State3;
    fn add(self, rhs: State3) -> State3 {
        State3([self.0[0] + rhs.0[0], self.0[1] + rhs.0[1], self.0[2] + rhs.0[2]])
    }
}

impl Sub for State3 {
    type Output = State3;
    fn sub(self, rhs: State3) -> State3 {
        State3([self.0[0] - rhs.0[0], self.0[1] - rhs.0[1], self.0[2] - rhs.0[2]])
    }
}

impl Mul<f64> for State3 {
    type Output = State3;
    fn mul(self, k: f64) -> State3 {
        State3([self.0[0] * k, self.0[1] * k, self.0[2] * k])
    }
}

/// Sampled solution of a three-dimensional ODE.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    times: Vec<f64>,
    states: Vec<State3>,
}

impl Trajectory {
    /// Builds a trajectory, checking that times strictly increase, lengths
    /// agree and every state is finite.
    pub fn new(times: Vec<f64>, states: Vec<State3>) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::contract(format!(
                "trajectory has {} times but {} states",
                times.len(),
                states.len()
            )));
        }
        if let Some(w) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::contract(format!(
                "trajectory times must strictly increase (index {})",
                w + 1
            )));
        }
        if let Some(i) = states.iter().position(|s| !s.is_finite()) {
            return Err(Error::contract(format!("non-finite state at index {i}")));
        }
        Ok(Trajectory { times, states })
    }

    /// Skips validation; only for producers that guarantee the invariants.
    pub(crate) fn from_parts_unchecked(times: Vec<f64>, states: Vec<State3>) -> Self {
        debug_assert_eq!(times.len(), states.len());
        Trajectory { times, states }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[State3] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &State3)> {
        self.times.iter().copied().zip(self.states.iter())
    }

    /// The samples with `t <= t_end` (inclusive up to a 1e−9 slack).
    pub fn truncate_to(&self, t_end: f64) -> Trajectory {
        let n = self.times.iter().take_while(|&&t| t <= t_end + 1e-9).count();
        Trajectory::from_parts_unchecked(self.times[..n].to_vec(), self.states[..n].to_vec())
    }

    /// Applies `f` to every state, keeping the time grid.
    pub fn map_states(&self, mut f: impl FnMut(usize, &State3) -> State3) -> Result<Trajectory> {
        let states = self.states.iter().enumerate().map(|(i, s)| f(i, s)).collect();
        Trajectory::new(self.times.clone(), states)
    }

    /// True when both grids have the same length and agree to 1e−9.
    pub fn same_grid(&self, other: &Trajectory) -> bool {
        self.len() == other.len()
            && self
                .times
                .iter()
                .zip(&other.times)
                .all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + a.abs()))
    }

    /// Diagonal of the axis-aligned bounding box around all states.
    pub fn bounding_box_diagonal(&self) -> f64 {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for s in &self.states {
            for k in 0..3 {
                lo[k] = lo[k].min(s[k]);
                hi[k] = hi[k].max(s[k]);
            }
        }
        if self.states.is_empty() {
            return 0.0;
        }
        (0..3).map(|k| (hi[k] - lo[k]).powi(2)).sum::<f64>().sqrt()
    }

    /// CSV with header `t,x,y,z` and 17 significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(80 * (self.len() + 1));
        out.push_str("t,x,y,z\n");
        for (t, s) in self.iter() {
            let _ = writeln!(out, "{},{},{},{}", fmt17(t), fmt17(s[0]), fmt17(s[1]), fmt17(s[2]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Trajectory> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == "t,x,y,z" => {}
            other => {
                return Err(Error::Parse(format!(
                    "expected header `t,x,y,z`, found {other:?}"
                )))
            }
        }
        let mut times = Vec::new();
        let mut states = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let vals = line
                .split(',')
                .map(|f| f.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse(format!("row {}: {e}", lineno + 2)))?;
            if vals.len() != 4 {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected 4",
                    lineno + 2,
                    vals.len()
                )));
            }
            times.push(vals[0]);
            states.push(State3::new(vals[1], vals[2], vals[3]));
        }
        Trajectory::new(times, states)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Right-hand side of the Lorenz equations.
#[inline]
pub fn lorenz_rhs(state: &State3, p: &LorenzParams) -> State3 {
    let [x, y, z] = state.0;
    State3([p.sigma * (y - x), x * (p.rho - z) - y, x * y - p.beta * z])
}

/// Internal RK4 step used for every ground-truth trajectory.
pub const TRUTH_STEP: f64 = 0.01;

/// Default save interval of the training data.
pub const DEFAULT_SAVE_DT: f64 = 0.1;

/// Default initial condition.
pub const DEFAULT_U0: State3 = State3::new(1.0, 0.0, 0.0);

/// Integrates the Lorenz system with fixed-step RK4 (step [`TRUTH_STEP`]) and
/// samples it every `save_dt` on `[t0, t1]`.
pub fn simulate_truth(
    u0: State3,
    p: &LorenzParams,
    t0: f64,
    t1: f64,
    save_dt: f64,
) -> Result<Trajectory, Error> {
    simulate_truth_with(u0, p, t0, t1, &IntegratorConfig::new(TRUTH_STEP, save_dt)?)
}

/// [`simulate_truth`] with an explicit integrator configuration.
pub fn simulate_truth_with(
    u0: State3,
    p: &LorenzParams,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<Trajectory, Error> {
    if !(t1 >= t0) {
        return Err(Error::contract(format!("t1 ({t1}) must be >= t0 ({t0})")));
    }
    let field = |_t: f64, u: &State3| lorenz_rhs(u, p);
    integrate(&field, u0, t0, t1, cfg).map_err(|b: Blowup| Error::Blowup(b))
}
