//! Experiment configuration files (TOML).
//!
//! Every section is optional and falls back to the defaults of the baseline
//! experiments; unknown keys are rejected with the offending key named.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{LorenzParams, State3};
use crate::error::{Error, Result};
use crate::integrate::IntegratorConfig;
use crate::net::{Activation, MlpSpec};
use crate::train::{OptimizerKind, TrainConfig};
use crate::ude::{ZEquation, InputMode, NetLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Node,
    Ude,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Node => "node",
            ModelKind::Ude => "ude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub activation: Activation,
    pub hidden: Vec<usize>,
    /// UDE only.
    pub input_mode: InputMode,
    /// UDE only.
    pub z_equation: ZEquation,
    /// UDE only.
    pub layout: NetLayout,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            activation: Activation::Sigmoid,
            hidden: vec![25, 25],
            input_mode: InputMode::TimeAndState,
            z_equation: ZEquation::Verbatim,
            layout: NetLayout::Shared,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub u0: [f64; 3],
    pub train_span: [f64; 2],
    pub forecast_t1: f64,
    pub save_dt: f64,
    /// Internal RK4 step, for truth and training alike.
    pub step: f64,
    /// Std-dev of additive Gaussian noise on the training targets.
    pub noise_level: f64,
    /// Defaults to the training seed.
    pub noise_seed: Option<u64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            u0: [1.0, 0.0, 0.0],
            train_span: [0.0, 10.0],
            forecast_t1: 15.0,
            save_dt: 0.1,
            step: 0.01,
            noise_level: 0.0,
            noise_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BreakdownSection {
    /// Fraction of the truth bounding-box diagonal.
    pub threshold: f64,
}

impl Default for BreakdownSection {
    fn default() -> Self {
        BreakdownSection { threshold: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "defaults::optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::bfgs_fraction")]
    pub bfgs_fraction: f64,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
}

mod defaults {
    use crate::train::OptimizerKind;
    pub fn optimizer() -> OptimizerKind {
        OptimizerKind::Adam
    }
    pub fn lr() -> f64 {
        0.01
    }
    pub fn iterations() -> usize {
        50_000
    }
    pub fn bfgs_fraction() -> f64 {
        0.1
    }
    pub fn seed() -> u64 {
        42
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            optimizer: defaults::optimizer(),
            lr: defaults::lr(),
            iterations: defaults::iterations(),
            bfgs_fraction: defaults::bfgs_fraction(),
            seed: defaults::seed(),
        }
    }
}

impl From<&TrainSection> for TrainConfig {
    fn from(t: &TrainSection) -> Self {
        TrainConfig {
            optimizer: t.optimizer,
            lr: t.lr,
            iterations: t.iterations,
            bfgs_fraction: t.bfgs_fraction,
            seed: t.seed,
        }
    }
}

/// Axes of a hyperparameter sweep. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub activation: Vec<Activation>,
    pub hidden: Vec<Vec<usize>>,
    pub lr: Vec<f64>,
    pub optimizer: Vec<OptimizerKind>,
    pub iterations: Vec<usize>,
    pub noise_level: Vec<f64>,
    /// Worker threads for the arms.
    pub workers: Option<usize>,
}

/// One experiment: a model, its data, how to train it and how to judge its
/// forecast.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_kind")]
    pub kind: ModelKind,
    #[serde(default)]
    pub lorenz: LorenzSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub breakdown: BreakdownSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_kind() -> ModelKind {
    ModelKind::Node
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LorenzSection {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzSection {
    fn default() -> Self {
        let p = LorenzParams::CANONICAL;
        LorenzSection {
            sigma: p.sigma,
            rho: p.rho,
            beta: p.beta,
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: default_name(),
            kind: default_kind(),
            lorenz: LorenzSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            breakdown: BreakdownSection::default(),
            sweep: None,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Neural ODE baseline: sigmoid 2×25, Adam lr 0.01, 50 000 iterations,
    /// train on (0, 10), forecast to 15.
    pub fn node_baseline() -> Self {
        ExperimentConfig {
            name: "node_baseline".into(),
            ..Default::default()
        }
    }

    /// UDE baseline: sigmoid 2×25 on (t, x, y, z), Adam then BFGS,
    /// train on (0, 8), forecast to 15.
    pub fn ude_baseline() -> Self {
        ExperimentConfig {
            name: "ude_baseline".into(),
            kind: ModelKind::Ude,
            data: DataSection {
                train_span: [0.0, 8.0],
                ..Default::default()
            },
            train: TrainSection {
                optimizer: OptimizerKind::AdamBfgs,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let key = unknown_key(e.message())
                .or_else(|| e.span().and_then(|span| key_at(text, span.start)))
                .unwrap_or_else(|| "<document>".into());
            config_err(&key, e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        LorenzParams::new(self.lorenz.sigma, self.lorenz.rho, self.lorenz.beta)
            .map_err(|e| config_err("lorenz", e.to_string()))?;
        let d = &self.data;
        if !State3(d.u0).is_finite() {
            return Err(config_err("data.u0", "initial condition must be finite"));
        }
        if !(d.train_span[1] >= d.train_span[0]) {
            return Err(config_err("data.train_span", "end must not precede start"));
        }
        if !(d.forecast_t1 >= d.train_span[1]) {
            return Err(config_err("data.forecast_t1", "must not precede the end of the training span"));
        }
        IntegratorConfig::new(d.step, d.save_dt).map_err(|e| config_err("data.save_dt", e.to_string()))?;
        if !(d.noise_level >= 0.0) {
            return Err(config_err("data.noise_level", "must be >= 0"));
        }
        if self.model.hidden.contains(&0) {
            return Err(config_err("model.hidden", "layer widths must be positive"));
        }
        if !(self.breakdown.threshold > 0.0) {
            return Err(config_err("breakdown.threshold", "must be > 0"));
        }
        TrainConfig::from(&self.train).validate().map_err(|e| match e {
            Error::Config { key, message } => config_err(&format!("train.{key}"), message),
            other => other,
        })?;
        Ok(())
    }

    pub fn lorenz_params(&self) -> LorenzParams {
        LorenzParams {
            sigma: self.lorenz.sigma,
            rho: self.lorenz.rho,
            beta: self.lorenz.beta,
        }
    }

    pub fn grid(&self) -> IntegratorConfig {
        IntegratorConfig::new(self.data.step, self.data.save_dt).expect("validated grid")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig::from(&self.train)
    }

    pub fn u0(&self) -> State3 {
        State3(self.data.u0)
    }

    pub fn train_span(&self) -> (f64, f64) {
        (self.data.train_span[0], self.data.train_span[1])
    }

    pub fn noise_seed(&self) -> u64 {
        self.data.noise_seed.unwrap_or(self.train.seed)
    }

    /// Network shape implied by the model kind and input mode.
    pub fn mlp_spec(&self) -> MlpSpec {
        let input_dim = match self.kind {
            ModelKind::Node => 3,
            ModelKind::Ude => self.model.input_mode.width(),
        };
        MlpSpec {
            input_dim,
            hidden_layers: self.model.hidden.clone(),
            output_dim: 3,
            activation: self.model.activation,
        }
    }

    /// Cartesian product of the sweep axes applied to this config. Arms
    /// share every setting, seed included, except the swept ones.
    pub fn expand_sweep(&self) -> Result<Vec<ExperimentConfig>> {
        let Some(sweep) = &self.sweep else {
            return Err(config_err("sweep", "missing [sweep] section"));
        };
        let mut base = self.clone();
        base.sweep = None;
        let mut arms = vec![base];

        fn axis<T: Clone>(
            arms: Vec<ExperimentConfig>,
            values: &[T],
            label: impl Fn(&T) -> String,
            apply: impl Fn(&mut ExperimentConfig, &T),
        ) -> Vec<ExperimentConfig> {
            if values.is_empty() {
                return arms;
            }
            arms.into_iter()
                .flat_map(|arm| {
                    values.iter().map(move |v| (arm.clone(), v.clone()))
                })
                .map(|(mut arm, v)| {
                    apply(&mut arm, &v);
                    arm.name = format!("{}_{}", arm.name, label(&v));
                    arm
                })
                .collect()
        }

        arms = axis(arms, &sweep.activation, |a| a.to_string(), |c, a| c.model.activation = *a);
        arms = axis(
            arms,
            &sweep.hidden,
            |h| format!("h{}", h.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("x")),
            |c, h| c.model.hidden = h.clone(),
        );
        arms = axis(arms, &sweep.lr, |lr| format!("lr{lr}"), |c, lr| c.train.lr = *lr);
        arms = axis(arms, &sweep.optimizer, |o| o.to_string(), |c, o| c.train.optimizer = *o);
        arms = axis(arms, &sweep.iterations, |n| format!("it{n}"), |c, n| c.train.iterations = *n);
        arms = axis(arms, &sweep.noise_level, |n| format!("noise{n}"), |c, n| c.data.noise_level = *n);

        if arms.len() == 1 && self.sweep.as_ref().is_some_and(|s| {
            s.activation.is_empty()
                && s.hidden.is_empty()
                && s.lr.is_empty()
                && s.optimizer.is_empty()
                && s.iterations.is_empty()
                && s.noise_level.is_empty()
        }) {
            return Err(config_err("sweep", "the sweep grid is empty; give at least one axis"));
        }
        for arm in &arms {
            arm.validate()?;
        }
        Ok(arms)
    }

    pub fn sweep_workers(&self) -> Option<usize> {
        self.sweep.as_ref().and_then(|s| s.workers)
    }
}

/// The `key` of the `key = value` line containing byte offset `at`.
fn key_at(text: &str, at: usize) -> Option<String> {
    let start = text[..at.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
    let line = text[start..].lines().next()?;
    let (key, _) = line.split_once('=')?;
    let key = key.trim();
    (!key.is_empty()).then(|| key.to_string())
}

/// Pulls the key name out of serde's "unknown field `x`" message.
fn unknown_key(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let end = start + message[start..].find('`')?;
    Some(message[start..end].to_string())
}
