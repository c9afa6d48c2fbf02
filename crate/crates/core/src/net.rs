//! Dense multilayer perceptrons over a flat parameter vector.
//!
//! Layout of θ, layer by layer: the weight matrix row-major
//! (`fan_out × fan_in`), then the bias vector. The output layer is affine.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and its image `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub const ALL: [Activation; 3] = [Activation::Sigmoid, Activation::Tanh, Activation::Relu];
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation `{other}`"))),
        }
    }
}

/// Shape of a network: input width, hidden widths, output width, activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_layers: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_layers: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            hidden_layers,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::contract(format!("all layer widths must be positive: {self}")));
        }
        Ok(())
    }

    /// Default shallow network: two hidden layers of 25.
    pub fn shallow(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        MlpSpec {
            input_dim,
            hidden_layers: vec![25, 25],
            output_dim,
            activation,
        }
    }

    /// Deep variant: a third hidden layer widened to 100.
    pub fn deep(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        MlpSpec {
            input_dim,
            hidden_layers: vec![25, 25, 100],
            output_dim,
            activation,
        }
    }

    /// `(fan_in, fan_out)` of every affine layer, output layer last.
    pub fn layer_dims(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let widths = std::iter::once(self.input_dim)
            .chain(self.hidden_layers.iter().copied())
            .chain(std::iter::once(self.output_dim));
        widths.clone().zip(widths.skip(1))
    }

    /// Σ (fan_in + 1) · fan_out.
    pub fn param_count(&self) -> usize {
        self.layer_dims().map(|(i, o)| (i + 1) * o).sum()
    }

    fn widest(&self) -> usize {
        self.hidden_layers
            .iter()
            .copied()
            .chain([self.input_dim, self.output_dim])
            .max()
            .unwrap_or(1)
    }
}

impl fmt::Display for MlpSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.input_dim)?;
        for h in &self.hidden_layers {
            write!(f, "→{h}")?;
        }
        write!(f, "→{} ({})", self.output_dim, self.activation)
    }
}

/// The trainable parameter vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FlatParams(pub Vec<f64>);

impl FlatParams {
    pub fn zeros(n: usize) -> Self {
        FlatParams(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// JSON checkpoint: `{"spec": {...}, "theta": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: MlpSpec,
    pub theta: FlatParams,
}

impl Checkpoint {
    pub fn new(spec: MlpSpec, theta: FlatParams) -> Result<Self> {
        if theta.len() != spec.param_count() {
            return Err(Error::contract(format!(
                "θ has {} entries, {spec} needs {}",
                theta.len(),
                spec.param_count()
            )));
        }
        Ok(Checkpoint { spec, theta })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        Checkpoint::new(c.spec, c.theta)
    }
}

/// Glorot-uniform weights, zero biases. Deterministic in `seed`.
pub fn init_params(spec: &MlpSpec, seed: u64) -> FlatParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_params_with(spec, &mut rng)
}

pub(crate) fn init_params_with<R: Rng>(spec: &MlpSpec, rng: &mut R) -> FlatParams {
    let mut theta = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        theta.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        theta.extend(std::iter::repeat_n(0.0, fan_out));
    }
    FlatParams(theta)
}

/// One-shot forward pass; allocates a fresh evaluator.
pub fn forward(spec: &MlpSpec, theta: &FlatParams, input: &[f64]) -> Result<Vec<f64>> {
    if theta.len() != spec.param_count() {
        return Err(Error::contract(format!(
            "θ has {} entries, {spec} needs {}",
            theta.len(),
            spec.param_count()
        )));
    }
    if input.len() != spec.input_dim {
        return Err(Error::contract(format!(
            "input has {} entries, {spec} takes {}",
            input.len(),
            spec.input_dim
        )));
    }
    let mut mlp = Mlp::new(spec.clone());
    Ok(mlp.forward(theta.as_slice(), input).to_vec())
}

/// Reusable evaluator with preallocated activation buffers.
///
/// Not `Sync`-shared: give each worker its own.
#[derive(Debug, Clone)]
pub struct Mlp {
    spec: MlpSpec,
    // (fan_in, fan_out, offset into θ) per layer
    layers: Vec<(usize, usize, usize)>,
    // pre[l], post[l]: pre- and post-activation of layer l; post[0..] feeds layer l+1
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Mlp {
    pub fn new(spec: MlpSpec) -> Self {
        let mut offset = 0;
        let layers: Vec<_> = spec
            .layer_dims()
            .map(|(i, o)| {
                let l = (i, o, offset);
                offset += (i + 1) * o;
                l
            })
            .collect();
        let pre = layers.iter().map(|&(_, o, _)| vec![0.0; o]).collect();
        let post = layers.iter().map(|&(_, o, _)| vec![0.0; o]).collect();
        let w = spec.widest();
        Mlp {
            input: vec![0.0; spec.input_dim],
            spec,
            layers,
            pre,
            post,
            delta: vec![0.0; w],
            delta_next: vec![0.0; w],
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Evaluates the network. Slices must have the spec's lengths.
    pub fn forward(&mut self, theta: &[f64], input: &[f64]) -> &[f64] {
        debug_assert_eq!(theta.len(), self.spec.param_count());
        debug_assert_eq!(input.len(), self.spec.input_dim);
        self.input.copy_from_slice(input);
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        for (l, &(fan_in, fan_out, off)) in self.layers.iter().enumerate() {
            let (w, rest) = theta[off..].split_at(fan_in * fan_out);
            let b = &rest[..fan_out];
            let (before, after) = self.post.split_at_mut(l);
            let x: &[f64] = if l == 0 { &self.input } else { &before[l - 1] };
            let pre = &mut self.pre[l];
            let out = &mut after[0];
            for j in 0..fan_out {
                let row = &w[j * fan_in..(j + 1) * fan_in];
                let z = b[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                pre[j] = z;
                out[j] = if l == last { z } else { act.apply(z) };
            }
        }
        &self.post[last]
    }

    /// Vector–Jacobian product at `input`.
    ///
    /// Accumulates `(∂out/∂θ)ᵀ out_cot` into `grad_theta` and writes
    /// `(∂out/∂input)ᵀ out_cot` into `input_cot`. Runs its own forward pass.
    pub fn backward(
        &mut self,
        theta: &[f64],
        input: &[f64],
        out_cot: &[f64],
        grad_theta: &mut [f64],
        input_cot: &mut [f64],
    ) {
        self.forward(theta, input);
        self.backward_after_forward(theta, out_cot, grad_theta, input_cot);
    }

    /// [`Mlp::backward`] reusing the activations of the latest forward pass.
    pub fn backward_after_forward(
        &mut self,
        theta: &[f64],
        out_cot: &[f64],
        grad_theta: &mut [f64],
        input_cot: &mut [f64],
    ) {
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        self.delta[..out_cot.len()].copy_from_slice(out_cot);
        for l in (0..self.layers.len()).rev() {
            let (fan_in, fan_out, off) = self.layers[l];
            if l != last {
                let (pre, post) = (&self.pre[l], &self.post[l]);
                for j in 0..fan_out {
                    self.delta[j] *= act.derivative(pre[j], post[j]);
                }
            }
            let x: &[f64] = if l == 0 { &self.input } else { &self.post[l - 1] };
            let (gw, grest) = grad_theta[off..].split_at_mut(fan_in * fan_out);
            let gb = &mut grest[..fan_out];
            let w = &theta[off..off + fan_in * fan_out];
            self.delta_next[..fan_in].fill(0.0);
            for j in 0..fan_out {
                let d = self.delta[j];
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                let grow = &mut gw[j * fan_in..(j + 1) * fan_in];
                let wrow = &w[j * fan_in..(j + 1) * fan_in];
                for i in 0..fan_in {
                    grow[i] += d * x[i];
                    self.delta_next[i] += d * wrow[i];
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_next);
        }
        input_cot.copy_from_slice(&self.delta[..self.spec.input_dim]);
    }

    /// Activations of hidden layer `l` from the latest forward pass.
    pub fn hidden_activations(&self, l: usize) -> &[f64] {
        &self.post[l]
    }
}
