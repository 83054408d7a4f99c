//! Feed-forward control policy: two softplus hidden layers and a linear
//! output layer, trained with Adam on the mean squared error to supervisor
//! labels.

use crate::world::{Observation, OBS_DIM};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Policy outputs: `[v_z, roll_d, pitch_d]`.
pub const ACTION_DIM: usize = 3;
pub type Action = [f64; ACTION_DIM];

const INIT_STD: f64 = 0.01;
const CHECKPOINT_MAGIC: &str = "mlp-policy v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy produced a non-finite output")]
    NonFiniteOutput,
    #[error("input has {got} features, policy expects {expected}")]
    InputSize { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("empty training set")]
    EmptyDataset,
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

/// Anything that maps an observation to `[v_z, roll_d, pitch_d]`.
pub trait Policy {
    fn act(&self, obs: &Observation) -> Result<Action, PolicyError>;
}

impl<F> Policy for F
where
    F: Fn(&Observation) -> Action,
{
    fn act(&self, obs: &Observation) -> Result<Action, PolicyError> {
        let a = self(obs);
        if a.iter().all(|v| v.is_finite()) {
            Ok(a)
        } else {
            Err(PolicyError::NonFiniteOutput)
        }
    }
}

/// Which observation entries the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    /// Offset, velocity and all range readings.
    #[default]
    Full,
    /// Offset and velocity only.
    Kinematic,
}

impl FeatureSet {
    pub fn dim(&self) -> usize {
        match self {
            FeatureSet::Full => OBS_DIM,
            FeatureSet::Kinematic => 5,
        }
    }

    pub fn extract(&self, obs: &Observation) -> Vec<f64> {
        let f = obs.to_features();
        f[..self.dim()].to_vec()
    }

    fn name(&self) -> &'static str {
        match self {
            FeatureSet::Full => "full",
            FeatureSet::Kinematic => "kinematic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(FeatureSet::Full),
            "kinematic" => Some(FeatureSet::Kinematic),
            _ => None,
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
        }));
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Per-feature standardization `(x - mean) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Mean and standard deviation per feature. Near-constant features get a
    /// scale proportional to their magnitude instead of their spread.
    pub fn fit(inputs: &[Vec<f64>]) -> Self {
        let dim = inputs[0].len();
        let n = inputs.len() as f64;
        let mut mean = vec![0.0; dim];
        for x in inputs {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; dim];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var
            .iter()
            .zip(&mean)
            .map(|(v, m)| v.sqrt().max(0.2 * m.abs().max(1.0)))
            .collect();
        Self { mean, scale }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpPolicy {
    layers: Vec<Layer>,
    normalization: Normalization,
    normalization_fitted: bool,
    features: FeatureSet,
    seed: u64,
}

/// Flat parameter gradient, in the order of [`MlpPolicy::params`].
pub type Gradient = Vec<f64>;

impl MlpPolicy {
    /// Network with the default 30-30 hidden layers.
    pub fn new(features: FeatureSet, seed: u64) -> Self {
        Self::with_layers(&[features.dim(), 30, 30, ACTION_DIM], features, seed)
    }

    /// Weights drawn from `N(0, 0.01^2)`, zero biases, identity normalization.
    pub fn with_layers(sizes: &[usize], features: FeatureSet, seed: u64) -> Self {
        assert!(sizes.len() >= 2 && sizes[0] == features.dim() && *sizes.last().unwrap() == ACTION_DIM);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let layers = sizes
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: (0..w[0] * w[1]).map(|_| normal.sample(&mut rng)).collect(),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layers,
            normalization: Normalization::identity(sizes[0]),
            normalization_fitted: false,
            features,
            seed,
        }
    }

    pub fn features(&self) -> FeatureSet {
        self.features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn is_normalization_fitted(&self) -> bool {
        self.normalization_fitted
    }

    /// Fits the input standardization once; later calls are no-ops.
    pub fn fit_normalization(&mut self, inputs: &[Vec<f64>]) {
        if !self.normalization_fitted && !inputs.is_empty() {
            self.normalization = Normalization::fit(inputs);
            self.normalization_fitted = true;
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
    }

    /// Network output for a raw (unnormalized) feature vector.
    pub fn forward(&self, input: &[f64]) -> Result<Action, PolicyError> {
        if input.len() != self.input_dim() {
            return Err(PolicyError::InputSize {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut x = self.normalization.apply(input);
        let mut y = Vec::with_capacity(30);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&x, &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = softplus(*v));
            }
            std::mem::swap(&mut x, &mut y);
        }
        let out = [x[0], x[1], x[2]];
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(PolicyError::NonFiniteOutput)
        }
    }

    /// Mean over samples of the squared output error.
    pub fn mse_loss(&self, inputs: &[Vec<f64>], targets: &[Action]) -> f64 {
        let mut total = 0.0;
        for (x, t) in inputs.iter().zip(targets) {
            // Non-finite outputs propagate into the loss as NaN.
            let y = self.forward(x).unwrap_or([f64::NAN; ACTION_DIM]);
            total += y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        total / inputs.len() as f64
    }

    /// Loss and its gradient over the samples `indices` (all when `None`).
    pub fn loss_and_gradient(&self, inputs: &[Vec<f64>], targets: &[Action], indices: Option<&[usize]>) -> (f64, Gradient) {
        let all: Vec<usize>;
        let idx = match indices {
            Some(i) => i,
            None => {
                all = (0..inputs.len()).collect();
                &all
            }
        };
        let mut grad = vec![0.0; self.num_params()];
        let mut loss = 0.0;
        let inv_n = 1.0 / idx.len() as f64;
        let nl = self.layers.len();
        let mut acts: Vec<Vec<f64>> = vec![Vec::new(); nl + 1];
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); nl];
        let offsets: Vec<usize> = self
            .layers
            .iter()
            .scan(0, |at, l| {
                let o = *at;
                *at += l.num_params();
                Some(o)
            })
            .collect();

        for &s in idx {
            acts[0] = self.normalization.apply(&inputs[s]);
            for (i, layer) in self.layers.iter().enumerate() {
                let mut z = Vec::new();
                layer.apply(&acts[i], &mut z);
                acts[i + 1] = if i + 1 < nl { z.iter().map(|v| softplus(*v)).collect() } else { z.clone() };
                pre[i] = z;
            }
            let out = &acts[nl];
            let mut delta: Vec<f64> = out
                .iter()
                .zip(&targets[s])
                .map(|(y, t)| 2.0 * (y - t) * inv_n)
                .collect();
            loss += out.iter().zip(&targets[s]).map(|(y, t)| (y - t).powi(2)).sum::<f64>() * inv_n;

            for i in (0..nl).rev() {
                let layer = &self.layers[i];
                let base = offsets[i];
                let input = &acts[i];
                for (o, d) in delta.iter().enumerate() {
                    let row = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                    for (g, v) in row.iter_mut().zip(input) {
                        *g += d * v;
                    }
                    grad[base + layer.weights.len() + o] += d;
                }
                if i > 0 {
                    let mut next = vec![0.0; layer.inputs];
                    for (o, d) in delta.iter().enumerate() {
                        let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for (n, w) in next.iter_mut().zip(row) {
                            *n += d * w;
                        }
                    }
                    for (n, z) in next.iter_mut().zip(&pre[i - 1]) {
                        *n *= sigmoid(*z);
                    }
                    delta = next;
                }
            }
        }
        (loss, grad)
    }

    /// Adam on the mean squared error, starting from the current weights.
    pub fn train(&mut self, inputs: &[Vec<f64>], targets: &[Action], config: &TrainConfig) -> Result<TrainReport, PolicyError> {
        config.validate()?;
        if inputs.is_empty() {
            return Err(PolicyError::EmptyDataset);
        }
        if inputs.len() != targets.len() {
            return Err(PolicyError::InvalidConfig("inputs and targets differ in length".into()));
        }
        if let Some(bad) = inputs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(PolicyError::InputSize {
                expected: self.input_dim(),
                got: bad.len(),
            });
        }
        self.fit_normalization(inputs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut params = self.params();
        let mut m = vec![0.0; params.len()];
        let mut v = vec![0.0; params.len()];
        let mut t = 0i32;
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        let steps_per_epoch = inputs.len().div_ceil(config.batch_size);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(config.batch_size) {
                let (loss, grad) = self.loss_and_gradient(inputs, targets, Some(batch));
                if !loss.is_finite() || loss > 1e6 {
                    return Err(PolicyError::Diverged { epoch, loss });
                }
                epoch_loss += loss / steps_per_epoch as f64;
                t += 1;
                let bc1 = 1.0 - config.beta1.powi(t);
                let bc2 = 1.0 - config.beta2.powi(t);
                for i in 0..params.len() {
                    m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
                    v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
                    params[i] -= config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.epsilon);
                }
                self.set_params(&params);
            }
            epoch_losses.push(epoch_loss);
        }
        let final_loss = self.mse_loss(inputs, targets);
        if !final_loss.is_finite() || final_loss > 1e6 {
            return Err(PolicyError::Diverged {
                epoch: config.epochs,
                loss: final_loss,
            });
        }
        Ok(TrainReport {
            epoch_losses,
            final_loss,
            steps: t as usize,
        })
    }

    /// Plain-text dump: header, then per layer its shape and row-major values,
    /// then the normalization. Values use the shortest exact decimal form.
    pub fn to_checkpoint(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "features {}", self.features.name()).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "normalization_fitted {}", self.normalization_fitted).unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(s, "layer {} {}", l.outputs, l.inputs).unwrap();
            for o in 0..l.outputs {
                writeln!(s, "{}", join(&l.weights[o * l.inputs..(o + 1) * l.inputs])).unwrap();
            }
            writeln!(s, "{}", join(&l.bias)).unwrap();
        }
        writeln!(s, "mean {}", join(&self.normalization.mean)).unwrap();
        writeln!(s, "scale {}", join(&self.normalization.scale)).unwrap();
        s
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, PolicyError> {
        let err = |m: &str| PolicyError::Checkpoint(m.to_string());
        let mut lines = text.lines();
        let mut next = || lines.next().ok_or_else(|| err("unexpected end of file"));
        let floats = |line: &str| -> Result<Vec<f64>, PolicyError> {
            line.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| err(&format!("bad number {t:?}"))))
                .collect()
        };
        let field = |line: &str, key: &str| -> Result<String, PolicyError> {
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| err(&format!("expected {key}")))
        };
        if next()? != CHECKPOINT_MAGIC {
            return Err(err("missing header"));
        }
        let features = FeatureSet::parse(&field(next()?, "features")?).ok_or_else(|| err("unknown feature set"))?;
        let seed = field(next()?, "seed")?.parse().map_err(|_| err("bad seed"))?;
        let fitted = field(next()?, "normalization_fitted")?.parse().map_err(|_| err("bad flag"))?;
        let count: usize = field(next()?, "layers")?.parse().map_err(|_| err("bad layer count"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let shape: Vec<usize> = field(next()?, "layer")?
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| err("bad shape")))
                .collect::<Result<_, _>>()?;
            let [outputs, inputs] = shape[..] else {
                return Err(err("layer shape needs two numbers"));
            };
            let mut weights = Vec::with_capacity(outputs * inputs);
            for _ in 0..outputs {
                let row = floats(next()?)?;
                if row.len() != inputs {
                    return Err(err("row length mismatch"));
                }
                weights.extend(row);
            }
            let bias = floats(next()?)?;
            if bias.len() != outputs {
                return Err(err("bias length mismatch"));
            }
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                bias,
            });
        }
        let mean = floats(&field(next()?, "mean")?)?;
        let scale = floats(&field(next()?, "scale")?)?;
        let chained = layers.windows(2).all(|w| w[0].outputs == w[1].inputs);
        if layers.is_empty()
            || !chained
            || layers[0].inputs != features.dim()
            || layers.last().unwrap().outputs != ACTION_DIM
            || mean.len() != features.dim()
            || scale.len() != features.dim()
            || scale.iter().any(|s| !(*s > 0.0))
        {
            return Err(err("inconsistent shapes"));
        }
        Ok(Self {
            layers,
            normalization: Normalization { mean, scale },
            normalization_fitted: fitted,
            features,
            seed,
        })
    }
}

impl Policy for MlpPolicy {
    fn act(&self, obs: &Observation) -> Result<Action, PolicyError> {
        self.forward(&self.features.extract(obs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            epochs: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning rate must be non-negative");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("decay rates must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub steps: usize,
}
