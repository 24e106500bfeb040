//! Small feedforward action-value network with hand-written gradients and an
//! adaptive-moment optimizer. Hidden layers use tanh (smooth everywhere, so
//! finite-difference checks are well behaved); the output head is linear.

use crate::prng::SplitMix64;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpNet {
    /// `[input, hidden..., output]`
    pub layer_sizes: Vec<usize>,
    /// Per layer, row-major `out x in`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Per-parameter gradients, same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
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

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        let mut total = 0.0;
        for w in &self.weights {
            total += w.iter().map(|x| x * x).sum::<f64>();
        }
        for b in &self.biases {
            total += b.iter().map(|x| x * x).sum::<f64>();
        }
        total.sqrt()
    }

    /// Scales gradients down so their global L2 norm is at most `clip`.
    pub fn clip_global_norm(&mut self, clip: f64) {
        let norm = self.l2_norm();
        if norm > clip {
            self.scale(clip / norm);
        }
    }
}

/// Hidden activations cached by a forward pass, one vector per layer output
/// (post-activation), ending with the linear head.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

impl MlpNet {
    /// Deterministic initialization: uniform in ±1/sqrt(fan_in) per layer.
    pub fn init(layer_sizes: Vec<usize>, seed: u64) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output layers");
        let mut rng = SplitMix64::new(seed);
        let mut uniform = |bound: f64| {
            let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * u - 1.0) * bound
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| uniform(bound)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            layer_sizes,
            weights,
            biases,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let fan_in = self.layer_sizes[layer];
        let fan_out = self.layer_sizes[layer + 1];
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            let mut acc = b[o];
            for (x, wi) in input.iter().zip(row) {
                acc += x * wi;
            }
            out.push(acc);
        }
        out
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cached(input).activations.pop().unwrap()
    }

    pub fn forward_cached(&self, input: &[f64]) -> ForwardCache {
        assert_eq!(input.len(), self.input_size(), "input width mismatch");
        let mut activations = Vec::with_capacity(self.num_layers());
        let mut current = input.to_vec();
        for layer in 0..self.num_layers() {
            let mut z = self.affine(layer, &current);
            if layer + 1 < self.num_layers() {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            activations.push(z.clone());
            current = z;
        }
        ForwardCache { activations }
    }

    /// Backpropagates `output_grad` (dL/d output) through the cached pass,
    /// returning parameter gradients.
    pub fn backward(&self, input: &[f64], cache: &ForwardCache, output_grad: &[f64]) -> MlpGrads {
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = output_grad.to_vec();
        for layer in (0..self.num_layers()).rev() {
            // tanh' = 1 - tanh^2 applies to hidden layers only.
            if layer + 1 < self.num_layers() {
                for (d, a) in delta.iter_mut().zip(&cache.activations[layer]) {
                    *d *= 1.0 - a * a;
                }
            }
            let fan_in = self.layer_sizes[layer];
            let below: &[f64] = if layer == 0 {
                input
            } else {
                &cache.activations[layer - 1]
            };
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[layer][o] += d;
                let row = &mut grads.weights[layer][o * fan_in..(o + 1) * fan_in];
                for (g, x) in row.iter_mut().zip(below) {
                    *g += d * x;
                }
            }
            if layer > 0 {
                let fan_out = self.layer_sizes[layer + 1];
                let mut next_delta = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let row = &self.weights[layer][o * fan_in..(o + 1) * fan_in];
                    let d = delta[o];
                    for (nd, wi) in next_delta.iter_mut().zip(row) {
                        *nd += d * wi;
                    }
                }
                delta = next_delta;
            }
        }
        grads
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

/// Adam state matching the network's parameter shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub step_count: u64,
    m_weights: Vec<Vec<f64>>,
    v_weights: Vec<Vec<f64>>,
    m_biases: Vec<Vec<f64>>,
    v_biases: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(net: &MlpNet, learning_rate: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            eps,
            beta1: 0.9,
            beta2: 0.999,
            step_count: 0,
            m_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            v_weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            m_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn step(&mut self, net: &mut MlpNet, grads: &MlpGrads) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let update = |params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        };
        for layer in 0..net.weights.len() {
            update(
                &mut net.weights[layer],
                &grads.weights[layer],
                &mut self.m_weights[layer],
                &mut self.v_weights[layer],
            );
            update(
                &mut net.biases[layer],
                &grads.biases[layer],
                &mut self.m_biases[layer],
                &mut self.v_biases[layer],
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar loss for gradient checks: weighted sum of squared outputs.
    fn loss(net: &MlpNet, input: &[f64], mix: &[f64]) -> f64 {
        let out = net.forward(input);
        out.iter().zip(mix).map(|(o, m)| 0.5 * m * o * o).sum()
    }

    fn analytic_grads(net: &MlpNet, input: &[f64], mix: &[f64]) -> MlpGrads {
        let cache = net.forward_cached(input);
        let out = cache.activations.last().unwrap();
        let output_grad: Vec<f64> = out.iter().zip(mix).map(|(o, m)| m * o).collect();
        net.backward(input, &cache, &output_grad)
    }

    #[test]
    fn gradients_match_central_finite_differences() {
        let mut rng = SplitMix64::new(2024);
        let mut unit = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        for trial in 0..25 {
            let sizes = vec![3 + (trial % 3), 4, 2 + (trial % 2)];
            let mut net = MlpNet::init(sizes.clone(), 100 + trial as u64);
            // Perturb away from the symmetric init.
            for w in net.weights.iter_mut().flatten() {
                *w += 0.3 * (unit() - 0.5);
            }
            let input: Vec<f64> = (0..sizes[0]).map(|_| 2.0 * unit() - 1.0).collect();
            let mix: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| unit() + 0.5).collect();
            let grads = analytic_grads(&net, &input, &mix);
            let h = 1e-6;
            for layer in 0..net.num_layers() {
                for i in 0..net.weights[layer].len() {
                    let orig = net.weights[layer][i];
                    net.weights[layer][i] = orig + h;
                    let up = loss(&net, &input, &mix);
                    net.weights[layer][i] = orig - h;
                    let down = loss(&net, &input, &mix);
                    net.weights[layer][i] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let g = grads.weights[layer][i];
                    let denom = g.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (g - fd).abs() / denom < 1e-6,
                        "layer {layer} w{i}: analytic {g} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn clip_caps_global_norm() {
        let net = MlpNet::init(vec![2, 3, 2], 7);
        let mut grads = MlpGrads::zeros_like(&net);
        for g in grads.weights.iter_mut().flatten() {
            *g = 10.0;
        }
        grads.clip_global_norm(5.0);
        assert!((grads.l2_norm() - 5.0).abs() < 1e-9);
        // A small gradient passes through untouched.
        let mut small = MlpGrads::zeros_like(&net);
        small.weights[0][0] = 0.5;
        let before = small.l2_norm();
        small.clip_global_norm(5.0);
        assert_eq!(small.l2_norm(), before);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Minimize 0.5 * out^2 on a 1-1 linear net: weights should shrink the
        // output toward zero.
        let mut net = MlpNet::init(vec![1, 1], 3);
        net.weights[0][0] = 1.0;
        net.biases[0][0] = 0.5;
        let mut adam = Adam::new(&net, 0.05, 1e-8);
        let input = [1.0];
        let mut last = f64::INFINITY;
        for _ in 0..500 {
            let cache = net.forward_cached(&input);
            let out = cache.activations.last().unwrap().clone();
            let grads = net.backward(&input, &cache, &out);
            adam.step(&mut net, &grads);
            let l = 0.5 * net.forward(&input)[0].powi(2);
            assert!(l.is_finite());
            last = l;
        }
        assert!(last < 1e-4, "loss after training: {last}");
    }

    #[test]
    fn forward_is_deterministic() {
        let net = MlpNet::init(vec![4, 8, 3], 11);
        let input = [0.5, -0.25, 1.0, 0.0];
        assert_eq!(net.forward(&input), net.forward(&input));
        let net2 = MlpNet::init(vec![4, 8, 3], 11);
        assert_eq!(net, net2);
    }
}
