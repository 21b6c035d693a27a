//! Minimal dense network engine: forward with inverted dropout, exact
//! backpropagation, normal initialization and Adadelta updates.
//!
//! Weight matrices use row-major `(out_dim, in_dim)` layout. All math is in
//! `f64` so finite-difference gradient checks stay well-conditioned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_INIT_STDDEV: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Fully-connected network with ReLU hidden layers and an identity output
/// layer. Dropout applies to hidden activations only, in train mode only,
/// with inverted scaling so eval needs no correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub hidden_activation: Activation,
    pub dropout_rate: f64,
}

/// Per-call activation record consumed by [`DenseNet::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Activations entering each layer; `acts[0]` is the input.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of each layer.
    pre_acts: Vec<Vec<f64>>,
    /// Dropout scale per hidden unit (0 or 1/(1-p)); `None` outside train mode.
    masks: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(net: &DenseNet) -> Self {
        ParamGrads {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            for x in w {
                *x *= s;
            }
        }
        for b in &mut self.biases {
            for x in b {
                *x *= s;
            }
        }
    }
}

impl DenseNet {
    /// Zero-mean normal weights (stddev 0.05), zero biases. Deterministic per seed.
    pub fn init(layer_dims: &[usize], dropout_rate: f64, seed: u64) -> Result<Self> {
        Self::init_with_stddev(layer_dims, dropout_rate, seed, DEFAULT_INIT_STDDEV)
    }

    pub fn init_with_stddev(
        layer_dims: &[usize],
        dropout_rate: f64,
        seed: u64,
        stddev: f64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::Config(format!(
                "network needs at least 2 layer dims, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("layer dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0,1), got {dropout_rate}"
            )));
        }
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let normal = Normal::new(0.0, stddev)
            .map_err(|e| Error::Config(format!("bad init stddev: {e}")))?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_dims.len() - 1 {
            let (rows, cols) = (layer_dims[l + 1], layer_dims[l]);
            weights.push((0..rows * cols).map(|_| normal.sample(&mut rng)).collect());
            biases.push(vec![0.0; rows]);
        }
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            hidden_activation: Activation::Relu,
            dropout_rate,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn activation_for_layer(&self, layer: usize) -> Activation {
        if layer + 1 < self.n_layers() {
            self.hidden_activation
        } else {
            Activation::Identity
        }
    }

    /// Forward pass. In train mode a dropout mask is drawn from `rng` for
    /// every hidden layer; the cache records everything backward needs.
    pub fn forward(
        &self,
        input: &[f64],
        train: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input length {} vs network input dim {}",
                input.len(),
                self.input_dim()
            )));
        }
        if train && self.dropout_rate > 0.0 && rng.is_none() {
            return Err(Error::Usage(
                "train-mode forward with dropout needs an rng".into(),
            ));
        }
        let mut acts = vec![input.to_vec()];
        let mut pre_acts = Vec::new();
        let mut masks = Vec::new();
        for l in 0..self.n_layers() {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            let w = &self.weights[l];
            let a_in = &acts[l];
            let mut z = self.biases[l].clone();
            for r in 0..rows {
                let row = &w[r * cols..(r + 1) * cols];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(a_in) {
                    acc += wi * xi;
                }
                z[r] += acc;
            }
            let act = self.activation_for_layer(l);
            let mut a_out: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            let is_hidden = l + 1 < self.n_layers();
            let mask = if train && is_hidden && self.dropout_rate > 0.0 {
                let rng = rng.as_mut().unwrap();
                let keep = 1.0 - self.dropout_rate;
                let m: Vec<f64> = (0..rows)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                for (a, s) in a_out.iter_mut().zip(&m) {
                    *a *= s;
                }
                Some(m)
            } else {
                None
            };
            pre_acts.push(z);
            masks.push(mask);
            acts.push(a_out);
        }
        let output = acts.last().unwrap().clone();
        Ok((
            output,
            ForwardCache {
                acts,
                pre_acts,
                masks,
            },
        ))
    }

    /// Deterministic dropout-free forward.
    pub fn forward_eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input, false, None)?.0)
    }

    /// Exact gradients of the scalar loss whose gradient w.r.t. the output is
    /// `output_grad`, reusing the cache's dropout masks.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>)> {
        if cache.pre_acts.len() != self.n_layers()
            || cache
                .pre_acts
                .iter()
                .enumerate()
                .any(|(l, z)| z.len() != self.layer_dims[l + 1])
        {
            return Err(Error::Usage("cache does not match this network".into()));
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "output grad length {} vs output dim {}",
                output_grad.len(),
                self.output_dim()
            )));
        }
        let mut grads = ParamGrads::zeros_like(self);
        let mut grad_a = output_grad.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (rows, cols) = (self.layer_dims[l + 1], self.layer_dims[l]);
            if let Some(mask) = &cache.masks[l] {
                for (g, s) in grad_a.iter_mut().zip(mask) {
                    *g *= s;
                }
            }
            let act = self.activation_for_layer(l);
            let grad_z: Vec<f64> = grad_a
                .iter()
                .zip(&cache.pre_acts[l])
                .map(|(&g, &z)| g * act.derivative(z))
                .collect();
            let a_in = &cache.acts[l];
            let gw = &mut grads.weights[l];
            for r in 0..rows {
                let gz = grad_z[r];
                let row = &mut gw[r * cols..(r + 1) * cols];
                for (gwi, xi) in row.iter_mut().zip(a_in) {
                    *gwi += gz * xi;
                }
            }
            grads.biases[l].copy_from_slice(&grad_z);
            let w = &self.weights[l];
            let mut grad_in = vec![0.0; cols];
            for r in 0..rows {
                let gz = grad_z[r];
                let row = &w[r * cols..(r + 1) * cols];
                for (gi, wi) in grad_in.iter_mut().zip(row) {
                    *gi += gz * wi;
                }
            }
            grad_a = grad_in;
        }
        Ok((grads, grad_a))
    }
}

/// Squared-gradient and squared-update accumulators for Adadelta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdadeltaState {
    acc_grad_w: Vec<Vec<f64>>,
    acc_upd_w: Vec<Vec<f64>>,
    acc_grad_b: Vec<Vec<f64>>,
    acc_upd_b: Vec<Vec<f64>>,
    pub rho: f64,
    pub epsilon: f64,
}

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

impl AdadeltaState {
    pub fn new(net: &DenseNet) -> Self {
        AdadeltaState {
            acc_grad_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            acc_upd_w: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            acc_grad_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            acc_upd_b: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            rho: ADADELTA_RHO,
            epsilon: ADADELTA_EPS,
        }
    }
}

fn adadelta_update(
    params: &mut [f64],
    grads: &[f64],
    acc_grad: &mut [f64],
    acc_upd: &mut [f64],
    rho: f64,
    eps: f64,
    lr: f64,
) {
    for i in 0..params.len() {
        let g = grads[i];
        acc_grad[i] = rho * acc_grad[i] + (1.0 - rho) * g * g;
        let update = -((acc_upd[i] + eps).sqrt() / (acc_grad[i] + eps).sqrt()) * g;
        acc_upd[i] = rho * acc_upd[i] + (1.0 - rho) * update * update;
        params[i] += lr * update;
    }
}

/// One Adadelta step, scaled by `learning_rate`, mutating `net` and `state`.
pub fn adadelta_step(
    net: &mut DenseNet,
    grads: &ParamGrads,
    state: &mut AdadeltaState,
    learning_rate: f64,
) -> Result<()> {
    if grads.weights.len() != net.weights.len()
        || grads
            .weights
            .iter()
            .zip(&net.weights)
            .any(|(g, w)| g.len() != w.len())
    {
        return Err(Error::Shape("gradient shapes do not match network".into()));
    }
    for l in 0..net.weights.len() {
        adadelta_update(
            &mut net.weights[l],
            &grads.weights[l],
            &mut state.acc_grad_w[l],
            &mut state.acc_upd_w[l],
            state.rho,
            state.epsilon,
            learning_rate,
        );
        adadelta_update(
            &mut net.biases[l],
            &grads.biases[l],
            &mut state.acc_grad_b[l],
            &mut state.acc_upd_b[l],
            state.rho,
            state.epsilon,
            learning_rate,
        );
    }
    Ok(())
}

/// Versioned checkpoint blob. JSON shortest-round-trip encoding keeps the
/// doubles bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_net(net: &DenseNet) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            layer_dims: net.layer_dims.clone(),
            activation: net.hidden_activation,
            dropout_rate: net.dropout_rate,
            weights: net.weights.clone(),
            biases: net.biases.clone(),
        }
    }

    pub fn into_net(self) -> Result<DenseNet> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let net = DenseNet {
            layer_dims: self.layer_dims,
            weights: self.weights,
            biases: self.biases,
            hidden_activation: self.activation,
            dropout_rate: self.dropout_rate,
        };
        if net.layer_dims.len() < 2 {
            return Err(Error::Parse("checkpoint has fewer than 2 layer dims".into()));
        }
        for l in 0..net.n_layers() {
            let (rows, cols) = (net.layer_dims[l + 1], net.layer_dims[l]);
            if net.weights.get(l).map(Vec::len) != Some(rows * cols)
                || net.biases.get(l).map(Vec::len) != Some(rows)
            {
                return Err(Error::Parse(format!(
                    "checkpoint layer {l} parameter shapes do not chain with layer dims"
                )));
            }
            if net.weights[l].iter().chain(&net.biases[l]).any(|v| !v.is_finite()) {
                return Err(Error::Parse(format!(
                    "checkpoint layer {l} contains non-finite parameters"
                )));
            }
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("bad checkpoint: {e}")))
    }
}
