//! Small dense networks with hand-written backpropagation, and Adam.
//!
//! Batches are column-major: a batch of `b` inputs of width `n` is an
//! `n x b` matrix, one sample per column.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut DMatrix<f64>) {
        match self {
            Activation::Tanh => z.apply(|v| *v = v.tanh()),
            Activation::Relu => z.apply(|v| *v = v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Multiplies `grad` in place by the derivative, expressed through the
    /// activation output `a`.
    fn backprop(self, a: &DMatrix<f64>, grad: &mut DMatrix<f64>) {
        match self {
            Activation::Tanh => grad.zip_apply(a, |g, a| *g *= 1.0 - a * a),
            Activation::Relu => grad.zip_apply(a, |g, a| {
                if a <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Identity => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    fn glorot(n_in: usize, n_out: usize, activation: Activation, rng: &mut Rng) -> Self {
        let bound = (6.0 / (n_in + n_out) as f64).sqrt();
        let weights = DMatrix::from_fn(n_out, n_in, |_, _| rng.gen_range(-bound..bound));
        Self { weights, bias: DVector::zeros(n_out), activation }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        self.activation.apply(&mut z);
        z
    }
}

/// Multi-layer perceptron. Hidden layers share one activation; the optional
/// output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer outputs recorded by [`Mlp::forward_cached`]. `outputs[0]` is the input.
pub struct ForwardCache {
    outputs: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.outputs.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl MlpGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|(w, b)| [w.as_slice(), b.as_slice()]).collect()
    }
}

impl Mlp {
    /// Builds `input -> hidden... [-> output]`. Without an output width the
    /// last hidden layer is the network output.
    pub fn new(input: usize, hidden: &[usize], output: Option<usize>, activation: Activation, rng: &mut Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut width = input;
        for &h in hidden {
            layers.push(Dense::glorot(width, h, activation, rng));
            width = h;
        }
        if let Some(out) = output {
            layers.push(Dense::glorot(width, out, Activation::Identity, rng));
        }
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h);
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> ForwardCache {
        let mut outputs = Vec::with_capacity(self.layers.len() + 1);
        outputs.push(x.clone());
        for layer in &self.layers {
            let h = layer.forward(outputs.last().expect("non-empty"));
            outputs.push(h);
        }
        ForwardCache { outputs }
    }

    /// Backpropagates `grad_out` (same shape as the output) and returns the
    /// parameter gradient together with the gradient w.r.t. the input.
    pub fn backward(&self, cache: &ForwardCache, grad_out: DMatrix<f64>) -> (MlpGrad, DMatrix<f64>) {
        let mut grad = grad_out;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&cache.outputs[i + 1], &mut grad);
            let input = &cache.outputs[i];
            let gw = &grad * input.transpose();
            let gb = grad.column_sum();
            grad = layer.weights.tr_mul(&grad);
            layers.push((gw, gb));
        }
        layers.reverse();
        (MlpGrad { layers }, grad)
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self
                .layers
                .iter()
                .map(|l| (DMatrix::zeros(l.weights.nrows(), l.weights.ncols()), DVector::zeros(l.bias.len())))
                .collect(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn n_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }
}

/// Adam optimizer over an ordered list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Adam {
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One descent step: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Stacks equal-length feature vectors as columns.
pub fn columns(rows: &[&[f64]]) -> DMatrix<f64> {
    let dim = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(dim * rows.len());
    for r in rows {
        debug_assert_eq!(r.len(), dim);
        data.extend_from_slice(r);
    }
    DMatrix::from_vec(dim, rows.len(), data)
}
