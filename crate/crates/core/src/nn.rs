//! Minimal multilayer perceptron with exact reverse-mode gradients.
//!
//! Networks are plain data: an [`MlpSpec`] describes the shape, a [`ParamBundle`]
//! holds every weight and bias in one flat `f64` vector, and [`forward`] records a
//! [`Tape`] that the gradient routines replay backwards. Gradients are available
//! both with respect to the parameters and with respect to the input vector; the
//! latter is what lets a critic's action gradient flow into an actor.
//!
//! The last hidden layer's post-activation features can be normalized
//! ([`FeatureNorm`]); the normalization Jacobian is part of the backward pass.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slope of the negative half of the leaky ReLU.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;
/// Lower bound on the feature norm used by penultimate normalization.
pub const PNORM_MIN_NORM: f64 = 1e-8;
/// Variance floor inside layer-norm and RMS-norm square roots.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("non-finite value {value} in input at index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("non-finite gradient {value} at index {index}")]
    NonFiniteGradient { index: usize, value: f64 },
    #[error("{what}: expected length {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("tape was recorded with a different network layout")]
    TapeMismatch,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu,
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z >= 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Normalization applied to the penultimate (last hidden) layer's features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureNorm {
    None,
    /// L2 normalization to a unit vector, no mean subtraction.
    Pnorm,
    /// Zero mean, unit variance across the feature vector (no affine terms).
    LayerNorm,
    /// Unit root-mean-square across the feature vector (no affine terms).
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Init {
    Orthogonal { hidden_gain: f64, output_gain: f64 },
    UniformFanIn,
}

impl Default for Init {
    fn default() -> Self {
        Init::Orthogonal {
            hidden_gain: std::f64::consts::SQRT_2,
            output_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
    pub feature_norm: FeatureNorm,
    #[serde(default)]
    pub init: Init,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            hidden_dims,
            output_dim,
            activation: Activation::LeakyRelu,
            feature_norm: FeatureNorm::Pnorm,
            init: Init::default(),
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_feature_norm(mut self, feature_norm: FeatureNorm) -> Self {
        self.feature_norm = feature_norm;
        self
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(NnError::InvalidSpec(
                "input and output dimensions must be at least 1".into(),
            ));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(NnError::InvalidSpec(
                "hidden layer widths must be at least 1".into(),
            ));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &width in &self.hidden_dims {
            shapes.push((width, fan_in));
            fan_in = width;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }
}

/// Location of one dense layer inside the flat parameter vector: `rows * cols`
/// row-major weights starting at `offset`, followed by `rows` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayerLayout {
    #[inline]
    pub fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.rows * self.cols
    }

    #[inline]
    pub fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.rows * self.cols;
        start..start + self.rows
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBundle {
    pub values: Vec<f64>,
    pub layout: Vec<LayerLayout>,
}

impl ParamBundle {
    /// All-zero parameters with the layout of `spec`.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut layout = Vec::new();
        let mut offset = 0;
        for (rows, cols) in spec.layer_shapes() {
            layout.push(LayerLayout { rows, cols, offset });
            offset += rows * (cols + 1);
        }
        ParamBundle {
            values: vec![0.0; offset],
            layout,
        }
    }

    /// Parameters drawn according to `spec.init`; biases start at zero.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut bundle = Self::zeros(spec);
        let n_layers = bundle.layout.len();
        for (i, layer) in bundle.layout.clone().into_iter().enumerate() {
            let weights = match spec.init {
                Init::Orthogonal {
                    hidden_gain,
                    output_gain,
                } => {
                    let gain = if i + 1 == n_layers {
                        output_gain
                    } else {
                        hidden_gain
                    };
                    orthogonal_init(rng, layer.rows, layer.cols, gain)
                }
                Init::UniformFanIn => {
                    let bound = 1.0 / (layer.cols as f64).sqrt();
                    let w: Vec<f64> = (0..layer.rows * layer.cols)
                        .map(|_| rng.random_range(-bound..bound))
                        .collect();
                    for b in &mut bundle.values[layer.biases()] {
                        *b = rng.random_range(-bound..bound);
                    }
                    w
                }
            };
            bundle.values[layer.weights()].copy_from_slice(&weights);
        }
        bundle
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Checks that the layout is contiguous and covers `values` exactly.
    pub fn check_layout(&self) -> Result<(), NnError> {
        let mut expected = 0;
        for layer in &self.layout {
            if layer.offset != expected {
                return Err(NnError::TapeMismatch);
            }
            expected += layer.len();
        }
        if expected != self.values.len() {
            return Err(NnError::Dimension {
                what: "parameter vector",
                expected,
                got: self.values.len(),
            });
        }
        Ok(())
    }

    /// `self <- (1 - tau) * self + tau * online`.
    pub fn polyak_update(&mut self, online: &ParamBundle, tau: f64) {
        debug_assert_eq!(self.values.len(), online.values.len());
        for (t, &o) in self.values.iter_mut().zip(&online.values) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Random (semi-)orthogonal `rows x cols` matrix in row-major order, scaled by `gain`.
///
/// Columns are orthonormal when `cols <= rows`, rows otherwise. Gram-Schmidt on a
/// gaussian matrix yields the Q factor with a positive R diagonal, which is Haar
/// distributed.
pub fn orthogonal_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let (tall, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // column-major tall x short gaussian
    let mut q: Vec<Vec<f64>> = (0..short)
        .map(|_| (0..tall).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..short {
        let (done, rest) = q.split_at_mut(j);
        let col = &mut rest[0];
        // two passes of modified Gram-Schmidt keep the basis orthogonal to ~1e-15
        for _ in 0..2 {
            for prev in done.iter() {
                let proj = dot(prev, col);
                for (c, p) in col.iter_mut().zip(prev) {
                    *c -= proj * p;
                }
            }
            let norm = dot(col, col).sqrt();
            for c in col.iter_mut() {
                *c /= norm;
            }
        }
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = gain * if rows >= cols { q[c][r] } else { q[r][c] };
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Primal values recorded by [`forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    layout: Vec<LayerLayout>,
    activation: Activation,
    feature_norm: FeatureNorm,
    /// Input to every dense layer, the network input first.
    layer_inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre_activations: Vec<Vec<f64>>,
    /// Penultimate features before normalization.
    features: Vec<f64>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn input(&self) -> &[f64] {
        &self.layer_inputs[0]
    }

    /// Penultimate features before normalization (empty without hidden layers).
    pub fn raw_features(&self) -> &[f64] {
        &self.features
    }

    /// Penultimate features after normalization, i.e. the output layer's input.
    pub fn normalized_features(&self) -> &[f64] {
        self.layer_inputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

pub fn forward(params: &ParamBundle, spec: &MlpSpec, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
    if input.len() != spec.input_dim {
        return Err(NnError::Dimension {
            what: "network input",
            expected: spec.input_dim,
            got: input.len(),
        });
    }
    if let Some((index, &value)) = input.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(NnError::NonFiniteInput { index, value });
    }
    if params.layout.len() != spec.hidden_dims.len() + 1 {
        return Err(NnError::TapeMismatch);
    }

    let n_hidden = spec.hidden_dims.len();
    let mut layer_inputs = Vec::with_capacity(n_hidden + 1);
    let mut pre_activations = Vec::with_capacity(n_hidden);
    let mut h = input.to_vec();
    for layer in &params.layout[..n_hidden] {
        let z = affine(params, layer, &h)?;
        let a: Vec<f64> = z.iter().map(|&v| spec.activation.apply(v)).collect();
        layer_inputs.push(h);
        pre_activations.push(z);
        h = a;
    }
    let features = if n_hidden > 0 {
        let normalized = normalize_features(spec.feature_norm, &h);
        std::mem::replace(&mut h, normalized)
    } else {
        Vec::new()
    };
    let output = affine(params, &params.layout[n_hidden], &h)?;
    layer_inputs.push(h);

    let tape = Tape {
        layout: params.layout.clone(),
        activation: spec.activation,
        feature_norm: spec.feature_norm,
        layer_inputs,
        pre_activations,
        features,
        output: output.clone(),
    };
    Ok((output, tape))
}

fn affine(params: &ParamBundle, layer: &LayerLayout, x: &[f64]) -> Result<Vec<f64>, NnError> {
    if x.len() != layer.cols {
        return Err(NnError::Dimension {
            what: "layer input",
            expected: layer.cols,
            got: x.len(),
        });
    }
    let w = &params.values[layer.weights()];
    let b = &params.values[layer.biases()];
    Ok(w
        .chunks_exact(layer.cols)
        .zip(b)
        .map(|(row, &bias)| bias + dot(row, x))
        .collect())
}

pub fn normalize_features(norm: FeatureNorm, psi: &[f64]) -> Vec<f64> {
    let n = psi.len() as f64;
    match norm {
        FeatureNorm::None => psi.to_vec(),
        FeatureNorm::Pnorm => {
            let scale = dot(psi, psi).sqrt().max(PNORM_MIN_NORM);
            psi.iter().map(|v| v / scale).collect()
        }
        FeatureNorm::LayerNorm => {
            let mean = psi.iter().sum::<f64>() / n;
            let var = psi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = (var + NORM_EPS).sqrt();
            psi.iter().map(|v| (v - mean) / scale).collect()
        }
        FeatureNorm::RmsNorm => {
            let scale = (dot(psi, psi) / n + NORM_EPS).sqrt();
            psi.iter().map(|v| v / scale).collect()
        }
    }
}

/// Vector-Jacobian product of [`normalize_features`] at `psi`.
pub fn normalize_features_vjp(norm: FeatureNorm, psi: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = psi.len() as f64;
    match norm {
        FeatureNorm::None => upstream.to_vec(),
        FeatureNorm::Pnorm => {
            let len = dot(psi, psi).sqrt();
            if len > PNORM_MIN_NORM {
                // (I - u u^T) g / |psi|
                let proj = dot(psi, upstream) / (len * len);
                psi.iter()
                    .zip(upstream)
                    .map(|(p, g)| (g - p * proj) / len)
                    .collect()
            } else {
                upstream.iter().map(|g| g / PNORM_MIN_NORM).collect()
            }
        }
        FeatureNorm::LayerNorm => {
            let mean = psi.iter().sum::<f64>() / n;
            let var = psi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let scale = (var + NORM_EPS).sqrt();
            let xhat: Vec<f64> = psi.iter().map(|v| (v - mean) / scale).collect();
            let g_mean = upstream.iter().sum::<f64>() / n;
            let gx_mean = dot(upstream, &xhat) / n;
            upstream
                .iter()
                .zip(&xhat)
                .map(|(g, x)| (g - g_mean - x * gx_mean) / scale)
                .collect()
        }
        FeatureNorm::RmsNorm => {
            let scale = (dot(psi, psi) / n + NORM_EPS).sqrt();
            let gy_mean = dot(upstream, psi) / (n * scale);
            psi.iter()
                .zip(upstream)
                .map(|(p, g)| (g - (p / scale) * gy_mean) / scale)
                .collect()
        }
    }
}

/// Reverse pass over `tape`. Returns the parameter gradient (when requested)
/// and the input gradient of `upstream^T * output`.
pub fn backward(
    params: &ParamBundle,
    tape: &Tape,
    upstream: &[f64],
    want_params: bool,
) -> Result<(Option<Vec<f64>>, Vec<f64>), NnError> {
    if tape.layout != params.layout {
        return Err(NnError::TapeMismatch);
    }
    if upstream.len() != tape.output.len() {
        return Err(NnError::Dimension {
            what: "upstream gradient",
            expected: tape.output.len(),
            got: upstream.len(),
        });
    }
    let mut grad = if want_params {
        Some(vec![0.0; params.values.len()])
    } else {
        None
    };
    let n_hidden = tape.pre_activations.len();
    let mut g = upstream.to_vec();
    for idx in (0..=n_hidden).rev() {
        let layer = &params.layout[idx];
        if idx < n_hidden {
            let z = &tape.pre_activations[idx];
            // post-activation of this layer is the next layer's input, unless it
            // was replaced by the normalized features
            if idx + 1 == n_hidden {
                for ((gi, &zi), &ai) in g.iter_mut().zip(z).zip(&tape.features) {
                    *gi *= tape.activation.derivative(zi, ai);
                }
            } else {
                let a = &tape.layer_inputs[idx + 1];
                for ((gi, &zi), &ai) in g.iter_mut().zip(z).zip(a) {
                    *gi *= tape.activation.derivative(zi, ai);
                }
            }
        }
        let x = &tape.layer_inputs[idx];
        if let Some(grad) = grad.as_mut() {
            let gw = &mut grad[layer.weights()];
            for (row, &gi) in gw.chunks_exact_mut(layer.cols).zip(&g) {
                for (w, &xj) in row.iter_mut().zip(x) {
                    *w = gi * xj;
                }
            }
            grad[layer.biases()].copy_from_slice(&g);
        }
        let w = &params.values[layer.weights()];
        let mut g_in = vec![0.0; layer.cols];
        for (row, &gi) in w.chunks_exact(layer.cols).zip(&g) {
            if gi != 0.0 {
                for (acc, &wij) in g_in.iter_mut().zip(row) {
                    *acc += gi * wij;
                }
            }
        }
        g = if idx == n_hidden && n_hidden > 0 {
            normalize_features_vjp(tape.feature_norm, &tape.features, &g_in)
        } else {
            g_in
        };
    }
    Ok((grad, g))
}

/// Gradient of `upstream^T * output` with respect to every parameter.
pub fn grad_wrt_params(params: &ParamBundle, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NnError> {
    let (grad, _) = backward(params, tape, upstream, true)?;
    Ok(grad.expect("parameter gradient requested"))
}

/// Gradient of `upstream^T * output` with respect to the network input.
pub fn grad_wrt_input(params: &ParamBundle, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NnError> {
    backward(params, tape, upstream, false).map(|(_, g)| g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Ascent,
    Descent,
}

/// How a gradient is turned into a parameter change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    Adam,
    /// `params -= lr * grad`, the update written in the pseudocode.
    RawSgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    pub eps: f64,
    pub rule: UpdateRule,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1,
            beta2,
            lr,
            eps: 1e-8,
            rule: UpdateRule::Adam,
        }
    }

    pub fn with_rule(mut self, rule: UpdateRule) -> Self {
        self.rule = rule;
        self
    }

    /// Applies one update. A non-finite gradient is refused and leaves both the
    /// parameters and the optimizer state untouched.
    pub fn step(&mut self, params: &mut [f64], gradient: &[f64], direction: Direction) -> Result<(), NnError> {
        if gradient.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::Dimension {
                what: "gradient",
                expected: params.len(),
                got: gradient.len(),
            });
        }
        if let Some((index, &value)) = gradient.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(NnError::NonFiniteGradient { index, value });
        }
        let sign = match direction {
            Direction::Descent => 1.0,
            Direction::Ascent => -1.0,
        };
        self.t += 1;
        match self.rule {
            UpdateRule::RawSgd => {
                for (p, &g) in params.iter_mut().zip(gradient) {
                    *p -= self.lr * sign * g;
                }
            }
            UpdateRule::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                let step = self.lr / bc1;
                let bc2_sqrt = bc2.sqrt();
                for (((p, &g), m), v) in params
                    .iter_mut()
                    .zip(gradient)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    let g = sign * g;
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= step * *m / (v.sqrt() / bc2_sqrt + self.eps);
                }
            }
        }
        Ok(())
    }
}

/// A network together with its parameters and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub spec: MlpSpec,
    pub params: ParamBundle,
    pub optimizer: AdamState,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        spec: MlpSpec,
        rng: &mut R,
        lr: f64,
        beta1: f64,
        beta2: f64,
        rule: UpdateRule,
    ) -> Result<Self, NnError> {
        spec.validate()?;
        let params = ParamBundle::init(&spec, rng);
        let optimizer = AdamState::new(params.len(), lr, beta1, beta2).with_rule(rule);
        Ok(Network {
            spec,
            params,
            optimizer,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape), NnError> {
        forward(&self.params, &self.spec, input)
    }

    pub fn grad_wrt_params(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NnError> {
        grad_wrt_params(&self.params, tape, upstream)
    }

    pub fn grad_wrt_input(&self, tape: &Tape, upstream: &[f64]) -> Result<Vec<f64>, NnError> {
        grad_wrt_input(&self.params, tape, upstream)
    }

    pub fn descend(&mut self, gradient: &[f64]) -> Result<(), NnError> {
        self.optimizer
            .step(&mut self.params.values, gradient, Direction::Descent)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        // W^T W when cols <= rows, otherwise W W^T
        if cols <= rows {
            let mut g = vec![0.0; cols * cols];
            for i in 0..cols {
                for j in 0..cols {
                    g[i * cols + j] = (0..rows).map(|r| w[r * cols + i] * w[r * cols + j]).sum();
                }
            }
            g
        } else {
            let mut g = vec![0.0; rows * rows];
            for i in 0..rows {
                for j in 0..rows {
                    g[i * rows + j] = (0..cols).map(|c| w[i * cols + c] * w[j * cols + c]).sum();
                }
            }
            g
        }
    }

    fn assert_scaled_identity(g: &[f64], n: usize, scale: f64, tol: f64) {
        for i in 0..n {
            for j in 0..n {
                let target = if i == j { scale } else { 0.0 };
                assert!(
                    (g[i * n + j] - target).abs() < tol,
                    "gram[{i},{j}] = {} vs {target}",
                    g[i * n + j]
                );
            }
        }
    }

    #[test]
    fn orthogonal_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = orthogonal_init(&mut rng, 4, 4, 1.0);
        assert_scaled_identity(&gram(&w, 4, 4), 4, 1.0, 1e-10);
    }

    #[test]
    fn orthogonal_tall_with_gain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gain = 1.41;
        let w = orthogonal_init(&mut rng, 256, 8, gain);
        assert_scaled_identity(&gram(&w, 256, 8), 8, gain * gain, 1e-9);
    }

    #[test]
    fn orthogonal_wide_and_large() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = orthogonal_init(&mut rng, 3, 17, 2.0);
        assert_scaled_identity(&gram(&w, 3, 17), 3, 4.0, 1e-10);
        let w = orthogonal_init(&mut rng, 64, 64, 1.0);
        assert_scaled_identity(&gram(&w, 64, 64), 64, 1.0, 1e-10);
    }

    #[test]
    fn orthogonal_scalar_is_unit() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = orthogonal_init(&mut rng, 1, 1, 1.0);
            assert!((w[0].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_seeds_identical_bundles() {
        let spec = MlpSpec::new(5, vec![16, 16], 3);
        let a = ParamBundle::init(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        let b = ParamBundle::init(&spec, &mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
        a.check_layout().unwrap();
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(3, vec![8], 2);
        let params = ParamBundle::zeros(&spec);
        let (y, _) = forward(&params, &spec, &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_single_layer() {
        let spec = MlpSpec::new(3, vec![], 3).with_activation(Activation::Identity);
        let mut params = ParamBundle::zeros(&spec);
        for i in 0..3 {
            params.values[i * 3 + i] = 1.0;
        }
        let x = [0.3, -1.2, 4.0];
        let (y, _) = forward(&params, &spec, &x).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn pnorm_of_three_four() {
        let y = normalize_features(FeatureNorm::Pnorm, &[3.0, 4.0]);
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        // row 0 of (I - u u^T)/|psi|
        let g = normalize_features_vjp(FeatureNorm::Pnorm, &[3.0, 4.0], &[1.0, 0.0]);
        assert!((g[0] - 0.128).abs() < 1e-15);
        assert!((g[1] + 0.096).abs() < 1e-15);
    }

    #[test]
    fn pnorm_zero_features_stay_finite() {
        let y = normalize_features(FeatureNorm::Pnorm, &[0.0, 0.0, 0.0]);
        assert!(y.iter().all(|v| *v == 0.0));
        let g = normalize_features_vjp(FeatureNorm::Pnorm, &[0.0; 3], &[1.0, 2.0, 3.0]);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn pnorm_network_features_unit_norm() {
        let spec = MlpSpec::new(4, vec![32, 32], 2);
        let params = ParamBundle::init(&spec, &mut ChaCha8Rng::seed_from_u64(1));
        let (_, tape) = forward(&params, &spec, &[0.1, 0.2, -0.3, 0.9]).unwrap();
        assert!((l2_norm(tape.normalized_features()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_and_rms_norm_moments() {
        let psi = [0.5, -1.25, 3.0, 0.0, 2.2];
        let ln = normalize_features(FeatureNorm::LayerNorm, &psi);
        let mean = ln.iter().sum::<f64>() / 5.0;
        let var = ln.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-7);
        let rms = normalize_features(FeatureNorm::RmsNorm, &psi);
        let ms = rms.iter().map(|v| v * v).sum::<f64>() / 5.0;
        assert!((ms.sqrt() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn linear_layer_gradients() {
        let spec = MlpSpec::new(2, vec![], 2).with_activation(Activation::Identity);
        let mut params = ParamBundle::zeros(&spec);
        params.values[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = [0.5, -1.5];
        let (_, tape) = forward(&params, &spec, &x).unwrap();
        // d y_0 / d W_0j = x_j, d y_0 / d W_1j = 0
        let g = grad_wrt_params(&params, &tape, &[1.0, 0.0]).unwrap();
        assert_eq!(&g[..4], &[0.5, -1.5, 0.0, 0.0]);
        assert_eq!(&g[4..], &[1.0, 0.0]);
        // W^T u
        let gi = grad_wrt_input(&params, &tape, &[1.0, -1.0]).unwrap();
        assert_eq!(gi, vec![1.0 - 3.0, 2.0 - 4.0]);
    }

    #[test]
    fn constant_network_has_zero_input_gradient() {
        let spec = MlpSpec::new(3, vec![8, 8], 1);
        let mut params = ParamBundle::zeros(&spec);
        let last = params.layout[2];
        params.values[last.biases()][0] = 2.5;
        let (y, tape) = forward(&params, &spec, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![2.5]);
        let gi = grad_wrt_input(&params, &tape, &[1.0]).unwrap();
        assert!(gi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_non_finite_input() {
        let spec = MlpSpec::new(3, vec![4], 1);
        let params = ParamBundle::zeros(&spec);
        let err = forward(&params, &spec, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteInput { index: 1, .. }));
        assert!(err.to_string().contains("index 1"));
    }

    #[test]
    fn tape_from_other_network_is_rejected() {
        let a = MlpSpec::new(3, vec![4], 1);
        let b = MlpSpec::new(3, vec![5], 1);
        let pa = ParamBundle::zeros(&a);
        let pb = ParamBundle::zeros(&b);
        let (_, tape) = forward(&pa, &a, &[0.0; 3]).unwrap();
        assert_eq!(grad_wrt_params(&pb, &tape, &[1.0]), Err(NnError::TapeMismatch));
    }

    #[test]
    fn replay_is_bit_exact() {
        let spec = MlpSpec::new(3, vec![16, 16], 2).with_feature_norm(FeatureNorm::LayerNorm);
        let params = ParamBundle::init(&spec, &mut ChaCha8Rng::seed_from_u64(2));
        let (_, t1) = forward(&params, &spec, &[0.4, -0.1, 2.0]).unwrap();
        let (_, t2) = forward(&params, &spec, &[0.4, -0.1, 2.0]).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        // m = g, v = g^2 after bias correction, step = lr * g / (|g| + eps)
        let mut adam = AdamState::new(1, 0.01, 0.0, 0.999);
        let mut p = vec![0.0];
        adam.step(&mut p, &[1.0], Direction::Descent).unwrap();
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
        let mut adam = AdamState::new(1, 0.01, 0.9, 0.999);
        let mut p = vec![0.0];
        adam.step(&mut p, &[-3.0], Direction::Ascent).unwrap();
        assert!((p[0] + 0.01 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = AdamState::new(3, 0.1, 0.9, 0.999);
        let mut p = vec![1.0, -2.0, 3.0];
        adam.step(&mut p, &[0.0; 3], Direction::Descent).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_refuses_nan() {
        let mut adam = AdamState::new(2, 0.1, 0.9, 0.999);
        let mut p = vec![1.0, 1.0];
        let before = adam.clone();
        let err = adam.step(&mut p, &[0.0, f64::NAN], Direction::Descent);
        assert!(matches!(err, Err(NnError::NonFiniteGradient { index: 1, .. })));
        assert_eq!(adam, before);
        assert_eq!(p, vec![1.0, 1.0]);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut adam = AdamState::new(2, 0.05, 0.9, 0.999);
            let mut p = vec![0.3, -0.7];
            for k in 0..10 {
                let g = [(k as f64).sin(), (k as f64 * 0.3).cos()];
                adam.step(&mut p, &g, Direction::Descent).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn raw_sgd_matches_pseudocode() {
        let mut opt = AdamState::new(2, 0.5, 0.9, 0.999).with_rule(UpdateRule::RawSgd);
        let mut p = vec![1.0, 1.0];
        opt.step(&mut p, &[2.0, -1.0], Direction::Ascent).unwrap();
        assert_eq!(p, vec![2.0, 0.5]);
    }

    #[test]
    fn polyak_blend() {
        let spec = MlpSpec::new(1, vec![], 1);
        let mut target = ParamBundle::zeros(&spec);
        let mut online = ParamBundle::zeros(&spec);
        online.values.iter_mut().for_each(|v| *v = 1.0);
        target.polyak_update(&online, 0.005);
        assert!(target.values.iter().all(|v| (*v - 0.005).abs() < 1e-15));
    }
}
