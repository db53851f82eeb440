//! Small fully connected networks with tanh hidden layers and hand-written
//! backpropagation.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Output width.
    pub rows: usize,
    /// Input width.
    pub cols: usize,
    /// Row-major `rows x cols`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, weights: vec![0.0; rows * cols], bias: vec![0.0; rows] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for r in 0..self.rows {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            out.push(self.bias[r] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `bound * tanh(z)`: the actor's bounded action.
    ScaledTanh { bound: f64 },
    /// Identity: the critic's value.
    Linear,
}

/// Feed-forward net with a scalar output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    pub layers: Vec<Layer>,
    pub head: Head,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    acts: Vec<Vec<f64>>,
    z_out: f64,
}

/// Gradient buffers shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Layer>,
}

impl Grads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self { layers: net.layers.iter().map(|l| Layer::zeros(l.rows, l.cols)).collect() }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v = 0.0);
            l.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|v| *v *= k);
            l.bias.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).all(|v| v.is_finite())
    }
}

impl MlpNet {
    /// `sizes` lists every width from input to output; the output width must be 1.
    /// Weights start uniform in `±1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], head: Head, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && *sizes.last().unwrap() == 1, "scalar-output net expected");
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let bound = 1.0 / (cols as f64).sqrt();
                let mut layer = Layer::zeros(rows, cols);
                layer.weights.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                layer.bias.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                layer
            })
            .collect();
        Self { layers, head }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].cols
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).all(|v| v.is_finite())
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        let mut cache = Cache::default();
        self.forward_cached(x, &mut cache)
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut Cache) -> f64 {
        debug_assert_eq!(x.len(), self.input_len());
        let depth = self.layers.len();
        cache.acts.resize_with(depth, Vec::new);
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        let mut buf = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.affine(&cache.acts[l], &mut buf);
            if l + 1 < depth {
                buf.iter_mut().for_each(|v| *v = v.tanh());
                cache.acts[l + 1].clone_from(&buf);
            }
        }
        cache.z_out = buf[0];
        match self.head {
            Head::ScaledTanh { bound } => bound * cache.z_out.tanh(),
            Head::Linear => cache.z_out,
        }
    }

    /// Accumulates `d_out * d(output)/d(params)` into `grads` and, if asked,
    /// writes `d_out * d(output)/d(input)` into `d_input`.
    pub fn backward(&self, cache: &Cache, d_out: f64, mut grads: Option<&mut Grads>, d_input: Option<&mut [f64]>) {
        let mut delta = vec![match self.head {
            Head::ScaledTanh { bound } => {
                let t = cache.z_out.tanh();
                d_out * bound * (1.0 - t * t)
            }
            Head::Linear => d_out,
        }];
        let want_input = d_input.is_some();
        let mut prev = Vec::new();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.acts[l];
            if let Some(grads) = grads.as_deref_mut() {
                let g = &mut grads.layers[l];
                for (r, &d) in delta.iter().enumerate().take(layer.rows) {
                    if d == 0.0 {
                        continue;
                    }
                    g.bias[r] += d;
                    let row = &mut g.weights[r * layer.cols..(r + 1) * layer.cols];
                    row.iter_mut().zip(input).for_each(|(gw, x)| *gw += d * x);
                }
            }
            if l == 0 && !want_input {
                break;
            }
            prev.clear();
            prev.resize(layer.cols, 0.0);
            for (r, &d) in delta.iter().enumerate().take(layer.rows) {
                let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            if l > 0 {
                // through the tanh that produced this layer's input
                prev.iter_mut().zip(input).for_each(|(p, a)| *p *= 1.0 - a * a);
            }
            std::mem::swap(&mut delta, &mut prev);
        }
        if let Some(out) = d_input {
            out.copy_from_slice(&delta);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// First-order update rule shared by the actor and the critic.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, net: &MlpNet) -> Self {
        let n = if kind == OptimizerKind::Adam { net.n_params() } else { 0 };
        Self { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: vec![0.0; n], v: vec![0.0; n] }
    }

    /// Moves the parameters against `grads` (gradient descent).
    pub fn descend(&mut self, net: &mut MlpNet, grads: &Grads) {
        let g = grads.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias));
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in net.params_mut().zip(g) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let c1 = 1.0 - self.beta1.powi(self.t);
                let c2 = 1.0 - self.beta2.powi(self.t);
                for (((p, g), m), v) in net.params_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                }
            }
        }
    }
}
