//! Optimizers over a flat parameter vector: Adam, RAdam and BFGS.

use serde::{Deserialize, Serialize};

/// Moment estimates and hyperparameters shared by Adam and RAdam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// β1 = 0.9, β2 = 0.999, ε = 1e−8.
    pub fn new(n: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn update_moments(&mut self, grad: &[f64]) {
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for ((m, v), &g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64]) {
    state.update_moments(grad);
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for ((th, m), v) in theta.iter_mut().zip(&state.m).zip(&state.v) {
        let m_hat = m / c1;
        let v_hat = v / c2;
        *th -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

/// Length of the approximated simple moving average at step `t`; the
/// adaptive learning rate is only used once it exceeds 4.
pub fn radam_sma_length(beta2: f64, t: u64) -> f64 {
    let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
    let b2t = beta2.powi(t as i32);
    rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t)
}

/// Rectified Adam update, in place. While the variance of the adaptive
/// learning rate is intractable (SMA length ≤ 4, the first four steps at
/// β2 = 0.999) it takes a plain bias-corrected momentum step.
pub fn radam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64]) {
    state.update_moments(grad);
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let rho_inf = 2.0 / (1.0 - state.beta2) - 1.0;
    let rho_t = radam_sma_length(state.beta2, state.t);
    if rho_t > 4.0 {
        let r = ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf
            / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
            .sqrt();
        for ((th, m), v) in theta.iter_mut().zip(&state.m).zip(&state.v) {
            let v_hat = (v / c2).sqrt();
            *th -= state.lr * r * (m / c1) / (v_hat + state.eps);
        }
    } else {
        for (th, m) in theta.iter_mut().zip(&state.m) {
            *th -= state.lr * m / c1;
        }
    }
}

/// Inverse-Hessian approximation and the last accepted point.
#[derive(Debug, Clone, PartialEq)]
pub struct BfgsState {
    n: usize,
    /// Row-major `n × n`.
    pub inv_hessian: Vec<f64>,
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    updates: usize,
}

impl BfgsState {
    pub fn new(x: Vec<f64>, value: f64, grad: Vec<f64>) -> Self {
        let n = x.len();
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            h[i * n + i] = 1.0;
        }
        BfgsState {
            n,
            inv_hessian: h,
            x,
            value,
            grad,
            updates: 0,
        }
    }

    /// `−H g`.
    pub fn direction(&self) -> Vec<f64> {
        let n = self.n;
        (0..n)
            .map(|i| {
                -self.inv_hessian[i * n..(i + 1) * n]
                    .iter()
                    .zip(&self.grad)
                    .map(|(h, g)| h * g)
                    .sum::<f64>()
            })
            .collect()
    }

    fn reset_to_identity(&mut self) {
        self.inv_hessian.fill(0.0);
        for i in 0..self.n {
            self.inv_hessian[i * self.n + i] = 1.0;
        }
        self.updates = 0;
    }

    /// Moves to the accepted point and applies the inverse-BFGS update.
    /// Returns false when the curvature guard `sᵀy > 1e−10 ‖s‖‖y‖` skipped it.
    pub fn accept(&mut self, x: Vec<f64>, value: f64, grad: Vec<f64>) -> bool {
        let n = self.n;
        let s: Vec<f64> = x.iter().zip(&self.x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad.iter().zip(&self.grad).map(|(a, b)| a - b).collect();
        self.x = x;
        self.value = value;
        self.grad = grad;

        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let s_norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let y_norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(sy > 1e-10 * s_norm * y_norm) {
            return false;
        }
        let h = &mut self.inv_hessian;
        if self.updates == 0 {
            // scale the identity to the observed curvature before the first update
            let scale = sy / (y_norm * y_norm);
            for i in 0..n {
                h[i * n + i] = scale;
            }
        }
        let rho = 1.0 / sy;
        let hy: Vec<f64> = (0..n)
            .map(|i| h[i * n..(i + 1) * n].iter().zip(&y).map(|(a, b)| a * b).sum())
            .collect();
        let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
        let coef = rho * rho * yhy + rho;
        for i in 0..n {
            for j in i..n {
                let v = h[i * n + j] - rho * (hy[i] * s[j] + s[i] * hy[j]) + coef * s[i] * s[j];
                h[i * n + j] = v;
                h[j * n + i] = v;
            }
        }
        self.updates += 1;
        true
    }

    /// Largest `|H_ij − H_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.inv_hessian[i * n + j] - self.inv_hessian[j * n + i]).abs());
            }
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Backtracking contraction factor.
    pub shrink: f64,
    pub initial_step: f64,
    pub max_backtracks: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iters: 100,
            grad_tol: 1e-8,
            c1: 1e-4,
            shrink: 0.5,
            initial_step: 1.0,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BfgsOutcome {
    pub theta: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    /// Objective value after each accepted iterate.
    pub history: Vec<f64>,
    pub converged: bool,
    /// The line search could not find sufficient decrease; `theta` is the
    /// best point found.
    pub line_search_failed: bool,
    pub skipped_updates: usize,
}

/// Minimizes `f` starting from `theta0` with inverse BFGS and a backtracking
/// Armijo line search.
///
/// `f` returns the value and gradient; a non-finite value marks a point the
/// line search must back away from. The returned point is never worse than
/// `theta0`.
pub fn bfgs_minimize<F>(mut f: F, theta0: &[f64], opts: &BfgsOptions) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    bfgs_minimize_observed(&mut f, theta0, opts, |_, _| {})
}

/// [`bfgs_minimize`] calling `observe(iteration, state)` after every
/// accepted step.
pub fn bfgs_minimize_observed<F, O>(
    f: &mut F,
    theta0: &[f64],
    opts: &BfgsOptions,
    mut observe: O,
) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    O: FnMut(usize, &BfgsState),
{
    let (v0, g0) = f(theta0);
    let mut state = BfgsState::new(theta0.to_vec(), v0, g0);
    let mut outcome = BfgsOutcome {
        theta: theta0.to_vec(),
        value: v0,
        iterations: 0,
        history: Vec::new(),
        converged: false,
        line_search_failed: false,
        skipped_updates: 0,
    };
    if !v0.is_finite() {
        outcome.line_search_failed = true;
        return outcome;
    }
    let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |a, v| a.max(v.abs()));

    for iter in 0..opts.max_iters {
        if inf_norm(&state.grad) < opts.grad_tol {
            outcome.converged = true;
            break;
        }
        let mut dir = state.direction();
        let mut slope: f64 = dir.iter().zip(&state.grad).map(|(d, g)| d * g).sum();
        if !(slope < 0.0) {
            state.reset_to_identity();
            dir = state.direction();
            slope = dir.iter().zip(&state.grad).map(|(d, g)| d * g).sum();
        }

        let mut alpha = opts.initial_step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<f64> = state.x.iter().zip(&dir).map(|(x, d)| x + alpha * d).collect();
            let (v, g) = f(&trial);
            if v.is_finite() && v <= state.value + opts.c1 * alpha * slope {
                accepted = Some((trial, v, g));
                break;
            }
            alpha *= opts.shrink;
        }
        let Some((x, v, g)) = accepted else {
            outcome.line_search_failed = true;
            break;
        };
        if !state.accept(x, v, g) {
            outcome.skipped_updates += 1;
        }
        outcome.iterations = iter + 1;
        outcome.history.push(state.value);
        observe(iter, &state);
    }
    if !outcome.converged && inf_norm(&state.grad) < opts.grad_tol {
        outcome.converged = true;
    }
    outcome.theta = state.x;
    outcome.value = state.value;
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = AdamState::new(3, 0.01);
        let mut th = vec![1.0, -2.0, 3.0];
        adam_step(&mut s, &mut th, &[0.0; 3]);
        assert_eq!(th, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut s = AdamState::new(3, 0.01);
        let mut th = vec![0.0; 3];
        adam_step(&mut s, &mut th, &[5.0, -1e-3, 0.0]);
        assert!((th[0] + 0.01).abs() < 1e-8);
        assert!((th[1] - 0.01).abs() < 1e-7);
        assert_eq!(th[2], 0.0);
    }

    #[test]
    fn adam_and_radam_minimize_quadratic() {
        for step in [adam_step as fn(&mut AdamState, &mut [f64], &[f64]), radam_step] {
            let mut s = AdamState::new(1, 0.01);
            let mut th = vec![1.0];
            for _ in 0..2000 {
                let g = [2.0 * th[0]];
                step(&mut s, &mut th, &g);
            }
            assert!(th[0].abs() < 1e-3, "{}", th[0]);
        }
    }

    #[test]
    fn radam_warmup_is_plain_momentum() {
        assert!(radam_sma_length(0.999, 4) <= 4.0);
        assert!(radam_sma_length(0.999, 5) > 4.0);
        let mut s = AdamState::new(2, 0.1);
        let mut th = vec![0.0, 0.0];
        let g = [3.0, -0.5];
        radam_step(&mut s, &mut th, &g);
        // bias-corrected first moment is g itself
        assert!((th[0] + 0.3).abs() < 1e-12);
        assert!((th[1] - 0.05).abs() < 1e-12);
        let mut zero = AdamState::new(2, 0.1);
        let mut th0 = vec![1.0, 2.0];
        for _ in 0..10 {
            radam_step(&mut zero, &mut th0, &[0.0, 0.0]);
        }
        assert_eq!(th0, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_is_permutation_equivariant() {
        let grads = [[0.3, -1.0, 2.0], [0.1, 0.4, -0.2], [1.5, 0.0, -3.0]];
        let mut a = AdamState::new(3, 0.05);
        let mut b = AdamState::new(3, 0.05);
        let mut ta = vec![0.2, 0.4, -0.6];
        let mut tb = vec![-0.6, 0.2, 0.4];
        for g in grads {
            adam_step(&mut a, &mut ta, &g);
            adam_step(&mut b, &mut tb, &[g[2], g[0], g[1]]);
        }
        assert_eq!([ta[2], ta[0], ta[1]], [tb[0], tb[1], tb[2]]);
    }

    fn sphere(x: &[f64]) -> (f64, Vec<f64>) {
        (x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect())
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        (v, g)
    }

    #[test]
    fn bfgs_on_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let out = bfgs_minimize(sphere, &x0, &BfgsOptions { max_iters: 15, grad_tol: 1e-12, ..Default::default() });
        let norm = out.theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-8, "{norm} after {}", out.iterations);
    }

    #[test]
    fn bfgs_at_optimum_returns_start() {
        let out = bfgs_minimize(sphere, &[0.0; 4], &BfgsOptions::default());
        assert_eq!(out.theta, vec![0.0; 4]);
        assert_eq!(out.iterations, 0);
        assert!(out.converged);
    }

    #[test]
    fn bfgs_on_rosenbrock() {
        let opts = BfgsOptions { max_iters: 200, grad_tol: 1e-10, ..Default::default() };
        let out = bfgs_minimize(rosenbrock, &[-1.2, 1.0], &opts);
        assert!((out.theta[0] - 1.0).abs() < 1e-6 && (out.theta[1] - 1.0).abs() < 1e-6, "{out:?}");
        assert!(out.iterations <= 200);
        assert!(out.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn bfgs_keeps_inverse_hessian_symmetric() {
        let mut worst: f64 = 0.0;
        let mut f = rosenbrock;
        bfgs_minimize_observed(&mut f, &[-1.2, 1.0], &BfgsOptions { max_iters: 50, ..Default::default() }, |_, s| {
            worst = worst.max(s.asymmetry());
        });
        assert!(worst <= 1e-12);
    }

    #[test]
    fn bfgs_backs_away_from_non_finite_points() {
        // infinite outside the unit ball
        let f = |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            if r2 > 1.0 {
                (f64::INFINITY, vec![0.0; x.len()])
            } else {
                ((x[0] - 0.5).powi(2) + x[1] * x[1], vec![2.0 * (x[0] - 0.5), 2.0 * x[1]])
            }
        };
        let out = bfgs_minimize(f, &[-0.5, 0.5], &BfgsOptions::default());
        assert!((out.theta[0] - 0.5).abs() < 1e-6 && out.theta[1].abs() < 1e-6);
    }
}
