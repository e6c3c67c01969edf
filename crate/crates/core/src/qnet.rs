//! Fully connected Q-network with hand-written backpropagation.
//!
//! The production network maps the 8 normalized state values through three
//! ReLU layers of 128 units to two linear outputs `[Q(s, CHANGE), Q(s, KEEP)]`.
//! Weights are stored row-major (`out x in`) in `f64`.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::seed::Rng;
use crate::sim::NormalizedState;

/// Layer widths of the Q-network.
pub const DIMS: [usize; 5] = [8, 128, 128, 128, 2];

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum QNetError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("invalid optimizer settings: {0}")]
    Optimizer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(&self.biases)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.biases.iter_mut())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.inputs == other.inputs
            && self.outputs == other.outputs
            && self.weights.len() == other.weights.len()
            && self.biases.len() == other.biases.len()
    }
}

/// Network parameters. Also used as the gradient and Adam moment container,
/// since all of them share the parameter shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
}

/// One supervised sample for the Q-loss: the taken action's output is pulled
/// toward `target`.
#[derive(Debug, Clone, Copy)]
pub struct QSample<'a> {
    pub input: &'a [f64],
    pub action: usize,
    pub target: f64,
}

pub type Gradients = Network;

impl Network {
    /// He-uniform initialized production network.
    pub fn init(seed: u64) -> Self {
        Self::init_with_dims(&DIMS, &mut Rng::seed_from_u64(seed))
    }

    /// He-uniform weights `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, zero biases.
    pub fn init_with_dims(dims: &[usize], rng: &mut Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let (inputs, outputs) = (w[0], w[1]);
                let bound = (6.0 / inputs as f64).sqrt();
                let mut layer = Layer::zeros(inputs, outputs);
                for v in &mut layer.weights {
                    *v = rng.random_range(-bound..bound);
                }
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Layer::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers.first().map_or(0, |l| l.inputs)];
        d.extend(self.layers.iter().map(|l| l.outputs));
        d
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.values_mut())
    }

    pub fn same_shape(&self, other: &Network) -> bool {
        self.layers.len() == other.layers.len() && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_shape(b))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    fn check_structure(&self) -> Result<(), QNetError> {
        if self.layers.is_empty() {
            return Err(QNetError::Shape("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(QNetError::Shape(format!("layer {i} buffers do not match {}x{}", l.outputs, l.inputs)));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return Err(QNetError::Shape(format!("layer {i} input does not match previous output")));
            }
        }
        Ok(())
    }

    /// Forward a batch stored row-major (`batch x input_dim`). Returns every
    /// layer's post-activation output, the first entry being the input.
    fn activations(&self, inputs: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.to_vec());
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let input = &acts[li];
            let mut out = vec![0.0; batch * layer.outputs];
            linalg::matmul_abt(input, &layer.weights, &mut out, batch, layer.outputs, layer.inputs);
            for y in out.chunks_exact_mut(layer.outputs) {
                for (yo, bias) in y.iter_mut().zip(&layer.biases) {
                    let z = *yo + bias;
                    // NaN must propagate to the output check, so no f64::max here.
                    *yo = if li < last && z < 0.0 { 0.0 } else { z };
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Batched forward pass; `inputs` is `batch x input_dim` row-major, the
    /// result `batch x output_dim`.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>, QNetError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(QNetError::Shape(format!(
                "expected {} inputs, got {}",
                batch * self.input_dim(),
                inputs.len()
            )));
        }
        let out = self.activations(inputs, batch).pop().unwrap_or_default();
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(QNetError::NonFinite("forward output"))
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, QNetError> {
        self.forward_batch(input, 1)
    }

    /// `[Q(s, CHANGE), Q(s, KEEP)]` for the production network.
    pub fn q_values(&self, state: &NormalizedState) -> Result<[f64; 2], QNetError> {
        let out = self.forward(state.as_slice())?;
        match out.as_slice() {
            [c, k] => Ok([*c, *k]),
            _ => Err(QNetError::Shape(format!("expected 2 outputs, got {}", out.len()))),
        }
    }

    /// Mean squared error of the taken actions' outputs against their targets.
    pub fn loss(&self, samples: &[QSample<'_>]) -> Result<f64, QNetError> {
        let mut total = 0.0;
        for s in samples {
            let q = self.forward(s.input)?;
            total += (q[s.action] - s.target).powi(2);
        }
        Ok(total / samples.len() as f64)
    }

    /// Exact gradient of the mean squared Q-loss. Targets are constants.
    pub fn backward(&self, samples: &[QSample<'_>]) -> Result<(Gradients, f64), QNetError> {
        let batch = samples.len();
        if batch == 0 {
            return Err(QNetError::Shape("empty minibatch".into()));
        }
        let in_dim = self.input_dim();
        let out_dim = self.output_dim();
        let mut inputs = Vec::with_capacity(batch * in_dim);
        for s in samples {
            if s.input.len() != in_dim {
                return Err(QNetError::Shape(format!("sample has {} inputs, expected {in_dim}", s.input.len())));
            }
            if s.action >= out_dim {
                return Err(QNetError::Shape(format!("action {} out of range", s.action)));
            }
            if !s.target.is_finite() {
                return Err(QNetError::NonFinite("target"));
            }
            inputs.extend_from_slice(s.input);
        }
        let acts = self.activations(&inputs, batch);
        let output = acts.last().expect("at least one layer");
        if output.iter().any(|v| !v.is_finite()) {
            return Err(QNetError::NonFinite("forward output"));
        }

        let scale = 2.0 / batch as f64;
        let mut loss = 0.0;
        let mut delta = vec![0.0; batch * out_dim];
        for (b, s) in samples.iter().enumerate() {
            let diff = output[b * out_dim + s.action] - s.target;
            loss += diff * diff;
            delta[b * out_dim + s.action] = scale * diff;
        }
        loss /= batch as f64;

        let mut grads = self.zeros_like();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let input = &acts[li];
            let g = &mut grads.layers[li];
            linalg::matmul_atb_acc(&delta, input, &mut g.weights, batch, layer.outputs, layer.inputs);
            for d in delta.chunks_exact(layer.outputs) {
                for (gb, dv) in g.biases.iter_mut().zip(d) {
                    *gb += dv;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; batch * layer.inputs];
            linalg::matmul_ab_acc(&delta, &layer.weights, &mut prev, batch, layer.inputs, layer.outputs);
            // ReLU: pass gradient only where the unit was active.
            for (p, a) in prev.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
        if !grads.is_finite() {
            return Err(QNetError::NonFinite("gradients"));
        }
        Ok((grads, loss))
    }

    pub fn to_checkpoint(&self, rng_state: Option<RngState>) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            layers: self
                .layers
                .iter()
                .map(|l| CheckpointLayer {
                    weights: l.weights.clone(),
                    biases: l.biases.clone(),
                })
                .collect(),
            rng_state,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), QNetError> {
        self.to_checkpoint(None).save(path)
    }

    pub fn load(path: &Path) -> Result<Network, QNetError> {
        Checkpoint::load(path)?.into_network()
    }
}

/// Serializable RNG position, so that a resumed run can continue its stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// 32-byte ChaCha seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<Rng> {
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(self.seed.get(2 * i..2 * i + 2)?, 16).ok()?;
        }
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLayer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Versioned JSON checkpoint: `{version, dims, layers, rng_state}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: Vec<usize>,
    pub layers: Vec<CheckpointLayer>,
    #[serde(default)]
    pub rng_state: Option<RngState>,
}

impl Checkpoint {
    pub fn into_network(self) -> Result<Network, QNetError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(QNetError::Version(self.version));
        }
        if self.dims.len() != self.layers.len() + 1 {
            return Err(QNetError::Shape("dims do not match layer count".into()));
        }
        let net = Network {
            layers: self
                .layers
                .into_iter()
                .zip(self.dims.windows(2))
                .map(|(l, w)| Layer {
                    inputs: w[0],
                    outputs: w[1],
                    weights: l.weights,
                    biases: l.biases,
                })
                .collect(),
        };
        net.check_structure()?;
        if !net.is_finite() {
            return Err(QNetError::NonFinite("checkpoint parameters"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), QNetError> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, QNetError> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Plain gradient descent, for ablations.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub first_moment: Network,
    pub second_moment: Network,
    pub steps: u64,
}

impl Optimizer {
    pub fn adam(learning_rate: f64, like: &Network) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate, like)
    }

    pub fn new(kind: OptimizerKind, learning_rate: f64, like: &Network) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            steps: 0,
        }
    }

    pub fn apply_update(&mut self, params: &mut Network, grads: &Gradients) -> Result<(), QNetError> {
        if !params.same_shape(grads) || !params.same_shape(&self.first_moment) {
            return Err(QNetError::Shape("parameters, gradients and moments differ in shape".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QNetError::Optimizer(format!("learning rate {}", self.learning_rate)));
        }
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.values_mut().zip(grads.values()) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
                let t = self.steps as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                let layers = params
                    .layers
                    .iter_mut()
                    .zip(&grads.layers)
                    .zip(self.first_moment.layers.iter_mut().zip(self.second_moment.layers.iter_mut()));
                for ((p, g), (m, v)) in layers {
                    adam_slice(&mut p.weights, &g.weights, &mut m.weights, &mut v.weights, [b1, b2, eps, lr, c1, c2]);
                    adam_slice(&mut p.biases, &g.biases, &mut m.biases, &mut v.biases, [b1, b2, eps, lr, c1, c2]);
                }
            }
        }
        Ok(())
    }
}

fn adam_slice(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], [b1, b2, eps, lr, c1, c2]: [f64; 6]) {
    for i in 0..p.len() {
        let gi = g[i];
        m[i] = b1 * m[i] + (1.0 - b1) * gi;
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
