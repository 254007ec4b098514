//! Minimal fully connected network with tanh hidden layers, manual
//! backpropagation and an Adam optimizer.
//!
//! Activations are stored feature-major: a batch is a `features × batch`
//! matrix, so every layer is one GEMM.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: DMatrix::zeros(fan_out, fan_in), bias: DVector::zeros(fan_out) }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Layer inputs retained by a forward pass (index 0 is the network input).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrad {
    pub layers: Vec<Dense>,
}

impl MlpGrad {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self { layers: net.layers.iter().map(|l| Dense::zeros(l.fan_in(), l.fan_out())).collect() }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &MlpGrad) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() }
    }

    /// Gaussian init with std `1/sqrt(fan_in)` on hidden layers; the output
    /// layer's weights are scaled by `output_gain` and its bias is set to
    /// `output_bias`.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], output_gain: f64, output_bias: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(sizes);
        let last = net.layers.len() - 1;
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let mut scale = 1.0 / (layer.fan_in() as f64).sqrt();
            if i == last {
                scale *= output_gain;
                layer.bias.fill(output_bias);
            }
            if scale != 0.0 {
                for w in layer.weight.iter_mut() {
                    *w = scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        net
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_size(&self) -> usize {
        self.layers.last().expect("non-empty network").fan_out()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_size()).chain(self.layers.iter().map(Dense::fan_out)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward_cached(&self, input: DMatrix<f64>) -> (DMatrix<f64>, ForwardCache) {
        let last = self.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = DMatrix::zeros(layer.fan_out(), x.ncols());
            z.gemm(1.0, &layer.weight, &x, 0.0);
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i < last {
                z.apply(|v| *v = v.tanh());
            }
            activations.push(std::mem::replace(&mut x, z));
        }
        (x, ForwardCache { activations })
    }

    pub fn forward(&self, input: DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(input).0
    }

    pub fn forward_one(&self, input: &[f64]) -> Vec<f64> {
        self.forward(DMatrix::from_column_slice(input.len(), 1, input)).as_slice().to_vec()
    }

    /// Gradient of `sum(d_out ⊙ output)` with respect to all parameters.
    pub fn backward(&self, cache: &ForwardCache, d_out: DMatrix<f64>) -> MlpGrad {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let weight = &delta * input.transpose();
            let bias = delta.column_sum();
            if i > 0 {
                let mut prev = layer.weight.tr_mul(&delta);
                // Input of layer i is tanh output of layer i - 1.
                prev.zip_apply(input, |d, a| *d *= 1.0 - a * a);
                delta = prev;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        MlpGrad { layers: grads }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let lr = self.learning_rate;
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            for (((x, &gi), m), v) in p.iter_mut().zip(g).zip(&mut self.m[k]).zip(&mut self.v[k]) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
    }
}
