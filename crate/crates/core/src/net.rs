//! Dense feed-forward networks with analytic backpropagation.
//!
//! Weights are stored `(fan_in, fan_out)` so a batch `X` of shape
//! `(examples, features)` maps to `X·W + b`. Hidden layers apply the spec's
//! activation; a classifier ends in a clamped logistic sigmoid, while a
//! feature extractor (the BR-NN trunk) applies the hidden activation to its
//! output layer as well.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lower/upper clamp applied to every emitted probability.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    #[serde(default)]
    pub hidden_widths: Vec<usize>,
    #[serde(default = "one")]
    pub output_width: usize,
    #[serde(default)]
    pub hidden_activation: Activation,
}

fn one() -> usize {
    1
}

impl LayerSpec {
    /// Binary classifier: `input → hidden... → 1`.
    pub fn classifier(input_width: usize, hidden_widths: &[usize]) -> Self {
        Self {
            input_width,
            hidden_widths: hidden_widths.to_vec(),
            output_width: 1,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.hidden_activation = activation;
        self
    }

    /// `[input, hidden..., output]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.hidden_widths.len() + 2);
        widths.push(self.input_width);
        widths.extend_from_slice(&self.hidden_widths);
        widths.push(self.output_width);
        widths
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer widths must be positive, got {:?}",
                self.widths()
            )));
        }
        Ok(())
    }
}

/// What the last layer emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// One logit squashed to a clamped probability.
    Sigmoid,
    /// Activated features, consumed by further sub-networks.
    Features,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub spec: LayerSpec,
    pub head: Head,
    pub layers: Vec<Dense>,
}

/// Per-layer gradients; same shapes as [`NetworkParams::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        }
    }

    /// Flattened view in layer order, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

/// Activations recorded by [`NetworkParams::forward`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    /// Pre-activation of every layer; for a classifier the last one is the
    /// logit column.
    pub pre_activations: Vec<Array2<f64>>,
    /// Output of every layer; for a classifier the last one holds `p`.
    pub activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    pub fn logits(&self) -> ArrayView1<'_, f64> {
        self.pre_activations
            .last()
            .expect("trace has at least one layer")
            .column(0)
    }

    pub fn p(&self) -> ArrayView1<'_, f64> {
        self.output().column(0)
    }

    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("trace has at least one layer")
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<NetworkParams> {
    init_with_head(spec, Head::Sigmoid, seed)
}

pub fn init_with_head(spec: &LayerSpec, head: Head, seed: u64) -> Result<NetworkParams> {
    spec.validate()?;
    if head == Head::Sigmoid && spec.output_width != 1 {
        return Err(Error::InvalidConfig(format!(
            "sigmoid head needs output width 1, got {}",
            spec.output_width
        )));
    }
    let mut stream = rng::stream(seed);
    let widths = spec.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng::uniform(&mut stream, -bound, bound)
            });
            Dense {
                weights,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    Ok(NetworkParams {
        spec: spec.clone(),
        head,
        layers,
    })
}

impl NetworkParams {
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`NetworkParams::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch {
                what: "flat parameter vector",
                expected: self.parameter_count(),
                actual: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(Dense::is_finite)
    }

    pub fn forward(&self, batch: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        if batch.ncols() != self.spec.input_width {
            return Err(Error::ShapeMismatch {
                what: "forward input width",
                expected: self.spec.input_width,
                actual: batch.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let activation = self.spec.hidden_activation;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 {
                batch
            } else {
                activations[i - 1].view()
            };
            let mut pre = input.dot(&layer.weights);
            pre += &layer.bias;
            let out = if i == last && self.head == Head::Sigmoid {
                pre.mapv(|z| clamp_probability(sigmoid(z)))
            } else {
                pre.mapv(|z| activation.apply(z))
            };
            pre_activations.push(pre);
            activations.push(out);
        }
        Ok(ForwardTrace {
            input: batch.to_owned(),
            pre_activations,
            activations,
        })
    }

    /// Probabilities only, without keeping the trace.
    pub fn predict(&self, batch: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let trace = self.forward(batch)?;
        Ok(trace.p().to_owned())
    }

    /// Gradients of the batch-mean loss `(1/n) Σ ℓ_i` given `dℓ_i/dp_i`.
    ///
    /// The clamp on `p` is treated as the identity when chaining through
    /// the sigmoid.
    pub fn backward(&self, trace: &ForwardTrace, dl_dp: ArrayView1<'_, f64>) -> Result<Gradients> {
        self.backward_with_input(trace, dl_dp, false).map(|(g, _)| g)
    }

    /// As [`NetworkParams::backward`], also returning the gradient with
    /// respect to the input rows when `want_input` is set.
    pub fn backward_with_input(
        &self,
        trace: &ForwardTrace,
        dl_dp: ArrayView1<'_, f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        if self.head != Head::Sigmoid {
            return Err(Error::InvalidConfig(
                "backward on p requires a sigmoid head".into(),
            ));
        }
        let n = trace.batch_size();
        if dl_dp.len() != n {
            return Err(Error::ShapeMismatch {
                what: "dL/dp length",
                expected: n,
                actual: dl_dp.len(),
            });
        }
        let scale = 1.0 / n as f64;
        let p = trace.p();
        let mut delta = Array2::zeros((n, 1));
        Zip::from(delta.column_mut(0))
            .and(&p)
            .and(&dl_dp)
            .for_each(|d, &p, &g| *d = g * p * (1.0 - p) * scale);
        Ok(self.backprop(trace, delta, want_input))
    }

    /// Backpropagation for a [`Head::Features`] network. `d_features` is the
    /// gradient of the batch objective with respect to the emitted features
    /// and is used as-is (no further averaging).
    pub fn backward_features(
        &self,
        trace: &ForwardTrace,
        d_features: ArrayView2<'_, f64>,
        want_input: bool,
    ) -> Result<(Gradients, Option<Array2<f64>>)> {
        if self.head != Head::Features {
            return Err(Error::InvalidConfig(
                "backward_features requires a feature head".into(),
            ));
        }
        let out = trace.output();
        if d_features.dim() != out.dim() {
            return Err(Error::ShapeMismatch {
                what: "feature gradient columns",
                expected: out.ncols(),
                actual: d_features.ncols(),
            });
        }
        let activation = self.spec.hidden_activation;
        let pre = trace.pre_activations.last().expect("nonempty");
        let mut delta = d_features.to_owned();
        Zip::from(&mut delta)
            .and(pre)
            .for_each(|d, &z| *d *= activation.derivative(z));
        Ok(self.backprop(trace, delta, want_input))
    }

    /// `delta` is the gradient with respect to the last pre-activation.
    fn backprop(
        &self,
        trace: &ForwardTrace,
        mut delta: Array2<f64>,
        want_input: bool,
    ) -> (Gradients, Option<Array2<f64>>) {
        let activation = self.spec.hidden_activation;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut d_input = None;
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 {
                trace.input.view()
            } else {
                trace.activations[i - 1].view()
            };
            let weights = input.t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if i > 0 || want_input {
                let mut upstream = delta.dot(&self.layers[i].weights.t());
                if i > 0 {
                    Zip::from(&mut upstream)
                        .and(&trace.pre_activations[i - 1])
                        .for_each(|d, &z| *d *= activation.derivative(z));
                    delta = upstream;
                } else {
                    d_input = Some(upstream);
                }
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        (Gradients { layers: grads }, d_input)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub t: u64,
    moments: Option<(Gradients, Gradients)>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            t: 0,
            moments: None,
        })
    }
}

/// One optimizer update in place. Rejects non-finite gradients before
/// touching any parameter.
pub fn step(params: &mut NetworkParams, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::ShapeMismatch {
            what: "gradient layer count",
            expected: params.layers.len(),
            actual: grads.layers.len(),
        });
    }
    for (i, (g, p)) in grads.layers.iter().zip(&params.layers).enumerate() {
        if g.weights.dim() != p.weights.dim() || g.bias.len() != p.bias.len() {
            return Err(Error::ShapeMismatch {
                what: "gradient layer shape",
                expected: p.weights.len(),
                actual: g.weights.len(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of layer {i}")));
        }
    }

    let cfg = state.config;
    state.t += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.layers.iter_mut().zip(&grads.layers) {
                p.weights.scaled_add(-cfg.learning_rate, &g.weights);
                p.bias.scaled_add(-cfg.learning_rate, &g.bias);
            }
        }
        OptimizerKind::Adam => {
            let (m, v) = state.moments.get_or_insert_with(|| {
                (Gradients::zeros_like(params), Gradients::zeros_like(params))
            });
            let t = state.t as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
            };
            for (((p, g), m), v) in params
                .layers
                .iter_mut()
                .zip(&grads.layers)
                .zip(&mut m.layers)
                .zip(&mut v.layers)
            {
                Zip::from(&mut p.weights)
                    .and(&mut m.weights)
                    .and(&mut v.weights)
                    .and(&g.weights)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
                Zip::from(&mut p.bias)
                    .and(&mut m.bias)
                    .and(&mut v.bias)
                    .and(&g.bias)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }

    for (i, layer) in params.layers.iter().enumerate() {
        if !layer.is_finite() {
            return Err(Error::NonFinite(format!("parameters of layer {i} after step")));
        }
    }
    Ok(())
}
