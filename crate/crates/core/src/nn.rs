//! Multilayer perceptrons with hand-written reverse-mode gradients, Adam,
//! and a central-difference gradient checker.
//!
//! Parameters of an [`Mlp`] live in one flat vector. Layer `l` with input
//! width `m` and output width `k` occupies `m * k` weights stored
//! input-major (`w[i * k + o]`) followed by `k` biases. Inputs are usually
//! sparse multi-hot encodings, so zero inputs are skipped in the first
//! layer.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network needs at least one layer and one activation per layer")]
    Shape,
    #[error("non-finite gradient at coordinate {0}")]
    NonFiniteGradient(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Activation {
    LeakyRelu,
    Softplus,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_RELU_SLOPE * z
                }
            }
            Activation::Softplus => softplus(z),
            Activation::Identity => z,
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
            Activation::Softplus => sigmoid(z),
            Activation::Identity => 1.0,
        }
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Values cached by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v.as_slice())
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// An all-zero network with layer widths `dims` (input first).
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Result<Self, NnError> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(NnError::Shape);
        }
        Ok(Mlp { dims: dims.to_vec(), activations: activations.to_vec(), params: vec![0.0; param_count(dims)] })
    }

    /// Weights `~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, zero biases.
    pub fn init_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        activations: &[Activation],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        let mut net = Self::zeros(dims, activations)?;
        let mut offset = 0;
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
            for p in &mut net.params[offset..offset + fan_in * fan_out] {
                *p = bound * (2.0 * rng.random::<f64>() - 1.0);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    /// Checks that the parameter vector matches the layer shapes (used after
    /// deserialization).
    pub fn validate(&self) -> Result<(), NnError> {
        if self.dims.len() < 2 || self.activations.len() != self.dims.len() - 1 {
            return Err(NnError::Shape);
        }
        let expected = param_count(&self.dims);
        if self.params.len() != expected {
            return Err(NnError::Dimension { expected, got: self.params.len() });
        }
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn layer_offset(&self, layer: usize) -> usize {
        param_count(&self.dims[..=layer])
    }

    pub fn weight(&self, layer: usize, out: usize, input: usize) -> f64 {
        let k = self.dims[layer + 1];
        self.params[self.layer_offset(layer) + input * k + out]
    }

    pub fn set_weight(&mut self, layer: usize, out: usize, input: usize, value: f64) {
        let k = self.dims[layer + 1];
        let at = self.layer_offset(layer) + input * k + out;
        self.params[at] = value;
    }

    pub fn bias(&self, layer: usize, out: usize) -> f64 {
        let (m, k) = (self.dims[layer], self.dims[layer + 1]);
        self.params[self.layer_offset(layer) + m * k + out]
    }

    pub fn set_bias(&mut self, layer: usize, out: usize, value: f64) {
        let (m, k) = (self.dims[layer], self.dims[layer + 1]);
        let at = self.layer_offset(layer) + m * k + out;
        self.params[at] = value;
    }

    pub fn forward(&self, input: &[f64]) -> Result<Tape, NnError> {
        if input.len() != self.dims[0] {
            return Err(NnError::Dimension { expected: self.dims[0], got: input.len() });
        }
        let k = self.dims[1];
        let m = self.dims[0];
        Ok(self.run(input, self.params[m * k..m * k + k].to_vec()))
    }

    /// First-layer pre-activation contributed by input entries `from..`
    /// (given as `tail`) plus the first-layer bias. Inputs that stay fixed
    /// across many forward passes are folded in once this way.
    pub fn first_layer_base(&self, tail: &[f64], from: usize) -> Result<Vec<f64>, NnError> {
        let (m, k) = (self.dims[0], self.dims[1]);
        if from + tail.len() != m {
            return Err(NnError::Dimension { expected: m - from, got: tail.len() });
        }
        let mut z = self.params[m * k..m * k + k].to_vec();
        for (j, &xj) in tail.iter().enumerate() {
            let row = &self.params[(from + j) * k..(from + j + 1) * k];
            for (zo, &w) in z.iter_mut().zip(row) {
                *zo += w * xj;
            }
        }
        Ok(z)
    }

    /// Forward pass on `head ++ tail` where `base` came from
    /// [`Mlp::first_layer_base`] with `from = head.len()`.
    pub fn forward_with_base(&self, head: &[f64], base: &[f64]) -> Result<Tape, NnError> {
        if head.len() > self.dims[0] {
            return Err(NnError::Dimension { expected: self.dims[0], got: head.len() });
        }
        if base.len() != self.dims[1] {
            return Err(NnError::Dimension { expected: self.dims[1], got: base.len() });
        }
        Ok(self.run(head, base.to_vec()))
    }

    /// Runs every layer, with `input` covering the leading first-layer rows
    /// and `z0` the rest of the first pre-activation.
    fn run(&self, input: &[f64], z0: Vec<f64>) -> Tape {
        let layers = self.activations.len();
        let mut pre = Vec::with_capacity(layers);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers);
        let mut offset = 0;
        let mut z0 = Some(z0);
        for (l, act) in self.activations.iter().enumerate() {
            let (m, k) = (self.dims[l], self.dims[l + 1]);
            let x = if l == 0 { input } else { post[l - 1].as_slice() };
            let weights = &self.params[offset..offset + m * k];
            let mut z = match z0.take() {
                Some(z) => z,
                None => self.params[offset + m * k..offset + m * k + k].to_vec(),
            };
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (zo, &w) in z.iter_mut().zip(&weights[i * k..(i + 1) * k]) {
                    *zo += w * xi;
                }
            }
            let a: Vec<f64> = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
            post.push(a);
            offset += m * k + k;
        }
        Tape { input: input.to_vec(), pre, post }
    }

    /// Gradients of `<output_grad, output>` with respect to the parameters
    /// and the input.
    pub fn backward(&self, tape: &Tape, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>), NnError> {
        let mut grad = vec![0.0; self.params.len()];
        let mut input_grad = vec![0.0; self.dims[0]];
        self.backward_into(tape, output_grad, &mut grad, Some(&mut input_grad))?;
        Ok((grad, input_grad))
    }

    /// Accumulating form of [`Mlp::backward`]: adds parameter gradients into
    /// `grad` and, if requested, input gradients into `input_grad`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        output_grad: &[f64],
        grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<(), NnError> {
        if tape.input.len() != self.dims[0] {
            return Err(NnError::Dimension { expected: self.dims[0], got: tape.input.len() });
        }
        if let Some(ig) = &input_grad {
            if ig.len() != self.dims[0] {
                return Err(NnError::Dimension { expected: self.dims[0], got: ig.len() });
            }
        }
        self.back(tape, output_grad, grad, FirstLayer::Full(input_grad))
    }

    /// Backward pass for a tape from [`Mlp::forward_with_base`]. Parameter
    /// gradients of the head rows go into `grad`; the first-layer
    /// pre-activation gradient is added to `base_grad` for a later
    /// [`Mlp::fold_base_grad`].
    pub fn backward_with_base(
        &self,
        tape: &Tape,
        output_grad: &[f64],
        grad: &mut [f64],
        base_grad: &mut [f64],
    ) -> Result<(), NnError> {
        if base_grad.len() != self.dims[1] {
            return Err(NnError::Dimension { expected: self.dims[1], got: base_grad.len() });
        }
        self.back(tape, output_grad, grad, FirstLayer::Split(base_grad))
    }

    /// Pushes an accumulated `base_grad` through [`Mlp::first_layer_base`]:
    /// into the tail rows and first-layer bias of `grad`, and optionally
    /// into `tail_grad`.
    pub fn fold_base_grad(
        &self,
        tail: &[f64],
        from: usize,
        base_grad: &[f64],
        grad: &mut [f64],
        tail_grad: Option<&mut [f64]>,
    ) -> Result<(), NnError> {
        let (m, k) = (self.dims[0], self.dims[1]);
        if from + tail.len() != m || base_grad.len() != k || grad.len() != self.params.len() {
            return Err(NnError::Dimension { expected: m, got: from + tail.len() });
        }
        for (b, &d) in grad[m * k..m * k + k].iter_mut().zip(base_grad) {
            *b += d;
        }
        for (j, &xj) in tail.iter().enumerate() {
            let row = (from + j) * k;
            for (g, &d) in grad[row..row + k].iter_mut().zip(base_grad) {
                *g += xj * d;
            }
        }
        if let Some(tg) = tail_grad {
            if tg.len() != tail.len() {
                return Err(NnError::Dimension { expected: tail.len(), got: tg.len() });
            }
            for (j, g) in tg.iter_mut().enumerate() {
                *g += dot(&self.params[(from + j) * k..(from + j + 1) * k], base_grad);
            }
        }
        Ok(())
    }

    fn back(&self, tape: &Tape, output_grad: &[f64], grad: &mut [f64], mut first: FirstLayer<'_>) -> Result<(), NnError> {
        let layers = self.activations.len();
        if tape.pre.len() != layers || tape.input.len() > self.dims[0] {
            return Err(NnError::Dimension { expected: layers, got: tape.pre.len() });
        }
        if output_grad.len() != self.output_dim() {
            return Err(NnError::Dimension { expected: self.output_dim(), got: output_grad.len() });
        }
        if grad.len() != self.params.len() {
            return Err(NnError::Dimension { expected: self.params.len(), got: grad.len() });
        }
        let mut delta = output_grad.to_vec();
        let mut offset = self.params.len();
        for l in (0..layers).rev() {
            let (m, k) = (self.dims[l], self.dims[l + 1]);
            offset -= m * k + k;
            let act = self.activations[l];
            let dz: Vec<f64> = delta.iter().zip(&tape.pre[l]).map(|(&d, &z)| d * act.derivative(z)).collect();
            let x = if l == 0 { tape.input.as_slice() } else { tape.post[l - 1].as_slice() };
            {
                let (gw, gb) = grad[offset..offset + m * k + k].split_at_mut(m * k);
                let bias_grad = match (&mut first, l) {
                    (FirstLayer::Split(base), 0) => &mut **base,
                    _ => gb,
                };
                for (b, &d) in bias_grad.iter_mut().zip(&dz) {
                    *b += d;
                }
                for (i, &xi) in x.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &d) in gw[i * k..(i + 1) * k].iter_mut().zip(&dz) {
                        *g += xi * d;
                    }
                }
            }
            let weights = &self.params[offset..offset + m * k];
            if l > 0 {
                delta = (0..m).map(|i| dot(&weights[i * k..(i + 1) * k], &dz)).collect();
            } else if let FirstLayer::Full(Some(ig)) = &mut first {
                for (i, g) in ig.iter_mut().enumerate() {
                    *g += dot(&weights[i * k..(i + 1) * k], &dz);
                }
            }
        }
        Ok(())
    }
}

/// What the backward pass does at the first layer.
enum FirstLayer<'a> {
    /// Ordinary input: bias gradient into the parameters, optional input gradient.
    Full(Option<&'a mut [f64]>),
    /// Folded tail: bias gradient into this accumulator instead.
    Split(&'a mut [f64]),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adam moments and hyperparameters for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. Non-finite gradients reject the whole
/// update and leave `params` and `state` untouched.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<(), NnError> {
    if grads.len() != params.len() {
        return Err(NnError::Dimension { expected: params.len(), got: grads.len() });
    }
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(NnError::Dimension { expected: params.len(), got: state.m.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient(i));
    }
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(state.beta1, t);
    let c2 = 1.0 - libm::pow(state.beta2, t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (libm::sqrt(v_hat) + state.eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Above this many parameters a seeded random subset is checked.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor: the error at a coordinate is
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, max_coords: 10_000, seed: 0, floor: 1e-6 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub nan_coords: Vec<usize>,
    pub checked: usize,
}

/// Compares `analytic` against central differences of `loss` around
/// `params`.
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], opts: GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = if params.len() > opts.max_coords {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked = index::sample(&mut rng, params.len(), opts.max_coords).into_vec();
        picked.sort_unstable();
        picked
    } else {
        (0..params.len()).collect()
    };
    let mut probe = params.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coord: None, nan_coords: Vec::new(), checked: coords.len() };
    for &i in &coords {
        let original = probe[i];
        probe[i] = original + opts.step;
        let up = loss(&probe);
        probe[i] = original - opts.step;
        let down = loss(&probe);
        probe[i] = original;
        let numeric = (up - down) / (2.0 * opts.step);
        let a = analytic.get(i).copied().unwrap_or(f64::NAN);
        if !numeric.is_finite() || !a.is_finite() {
            report.nan_coords.push(i);
            continue;
        }
        let denom = libm::fabs(a).max(libm::fabs(numeric)).max(opts.floor);
        let err = libm::fabs(a - numeric) / denom;
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = Some(i);
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded(dims: &[usize], acts: &[Activation], seed: u64) -> Mlp {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::init_uniform(dims, acts, &mut rng).unwrap();
        // Nonzero biases so every code path is exercised.
        for l in 0..acts.len() {
            for o in 0..dims[l + 1] {
                net.set_bias(l, o, 0.3 * rng.random::<f64>() - 0.1);
            }
        }
        net
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 5, 2], &[Activation::LeakyRelu, Activation::Identity]).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap().output(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_layer_passes_input() {
        let mut net = Mlp::zeros(&[3, 3], &[Activation::Identity]).unwrap();
        for i in 0..3 {
            net.set_weight(0, i, i, 1.0);
        }
        assert_eq!(net.forward(&[0.25, -7.0, 3.0]).unwrap().output(), &[0.25, -7.0, 3.0]);
    }

    #[test]
    fn forward_matches_straight_line_arithmetic() {
        let net = seeded(&[2, 3, 1], &[Activation::LeakyRelu, Activation::Softplus], 42);
        let x = [1.0, -1.0];
        let mut out = net.bias(1, 0);
        for h in 0..3 {
            let z = net.weight(0, h, 0) * x[0] + net.weight(0, h, 1) * x[1] + net.bias(0, h);
            let a = if z > 0.0 { z } else { 0.01 * z };
            out += net.weight(1, 0, h) * a;
        }
        let expected = (1.0 + out.exp()).ln();
        let got = net.forward(&x).unwrap().output()[0];
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = seeded(&[4, 8, 2], &[Activation::LeakyRelu, Activation::Identity], 1);
        let x = [0.5, 0.0, 1.0, -3.0];
        let a = net.forward(&x).unwrap().output().to_vec();
        let b = net.forward(&x).unwrap().output().to_vec();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn affine_bias_gradient_is_output_gradient() {
        let net = seeded(&[3, 2], &[Activation::Identity], 5);
        let tape = net.forward(&[1.0, 2.0, 3.0]).unwrap();
        let (g, gx) = net.backward(&tape, &[0.7, -1.3]).unwrap();
        assert_eq!(&g[6..8], &[0.7, -1.3]);
        assert_eq!(g[1 * 2 + 0], 2.0 * 0.7);
        let expected_gx0 = net.weight(0, 0, 0) * 0.7 + net.weight(0, 1, 0) * -1.3;
        assert!((gx[0] - expected_gx0).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_negative_branch_scales_gradient() {
        let mut net = Mlp::zeros(&[1, 1], &[Activation::LeakyRelu]).unwrap();
        net.set_weight(0, 0, 0, 1.0);
        let tape = net.forward(&[-2.0]).unwrap();
        assert_eq!(tape.output(), &[-0.02]);
        let (g, gx) = net.backward(&tape, &[1.0]).unwrap();
        assert_eq!(g, vec![0.01 * -2.0, 0.01]);
        assert_eq!(gx, vec![0.01]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let acts = [Activation::LeakyRelu, Activation::Softplus];
        let base = seeded(&[3, 6, 2], &acts, 9);
        let x = [0.4, -1.2, 2.0];
        let w = [0.3, -1.1];
        let value = |net: &Mlp| -> f64 {
            let out = net.forward(&x).unwrap();
            out.output().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let tape = base.forward(&x).unwrap();
        let (g, _) = base.backward(&tape, &w).unwrap();
        let report = grad_check(
            |p| {
                let mut net = base.clone();
                net.params_mut().copy_from_slice(p);
                value(&net)
            },
            base.params(),
            &g,
            GradCheckOptions::default(),
        );
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert!(report.nan_coords.is_empty());
    }

    #[test]
    fn folded_tail_matches_full_input() {
        let net = seeded(&[5, 6, 1], &[Activation::LeakyRelu, Activation::Identity], 9);
        let x = [1.0, 0.0, 0.0, 0.4, -1.7];
        let full = net.forward(&x).unwrap();
        let base = net.first_layer_base(&x[3..], 3).unwrap();
        let split = net.forward_with_base(&x[..3], &base).unwrap();
        assert!((full.output()[0] - split.output()[0]).abs() < 1e-14);

        let (g_full, gx_full) = net.backward(&full, &[0.8]).unwrap();
        let mut g = vec![0.0; net.num_params()];
        let mut base_grad = vec![0.0; 6];
        net.backward_with_base(&split, &[0.8], &mut g, &mut base_grad).unwrap();
        let mut tail_grad = [0.0; 2];
        net.fold_base_grad(&x[3..], 3, &base_grad, &mut g, Some(&mut tail_grad)).unwrap();
        for (a, b) in g.iter().zip(&g_full) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
        for (a, b) in tail_grad.iter().zip(&gx_full[3..]) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn dimension_errors() {
        let net = Mlp::zeros(&[3, 2], &[Activation::Identity]).unwrap();
        assert_eq!(net.forward(&[1.0]).unwrap_err(), NnError::Dimension { expected: 3, got: 1 });
        let tape = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        assert!(net.backward(&tape, &[1.0]).is_err());
        let other = Mlp::zeros(&[2, 2], &[Activation::Identity]).unwrap();
        assert!(other.backward(&tape, &[1.0, 1.0]).is_err());
        assert!(Mlp::zeros(&[3], &[]).is_err());
        assert!(Mlp::zeros(&[3, 2], &[]).is_err());
    }

    #[test]
    fn softplus_is_safe() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-50.0) > 0.0 && softplus(-50.0).is_finite());
        assert!(softplus(-1e4).is_finite());
        assert!((softplus(40.0) - (40.0 + (-40f64).exp().ln_1p())).abs() < 1e-15);
        assert!(sigmoid(-1e4).is_finite() && sigmoid(1e4) == 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![0.5];
        let mut st = AdamState::new(1, 1e-3);
        adam_step(&mut p, &[1.0], &mut st).unwrap();
        assert!((0.5 - p[0] - 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_gradient_is_null_update() {
        let mut p = vec![0.5, -2.0];
        let mut st = AdamState::new(2, 1e-2);
        adam_step(&mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_constant_gradient_steps_match_closed_form() {
        // Closed-form recurrence for constant g: m_t = g(1-b1^t), v_t = g^2(1-b2^t),
        // so each bias-corrected step is lr * g / (|g| + eps).
        let (lr, g) = (1e-3, 0.37);
        let mut p = vec![1.0];
        let mut st = AdamState::new(1, lr);
        adam_step(&mut p, &[g], &mut st).unwrap();
        let d1 = 1.0 - p[0];
        let before = p[0];
        adam_step(&mut p, &[g], &mut st).unwrap();
        let d2 = before - p[0];
        let oracle = lr * g / (g + 1e-8);
        assert!((d1 - oracle).abs() < 1e-15);
        assert!((d2 - oracle).abs() < 1e-15);
        assert!((d1 - d2).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2, 1e-3);
        assert_eq!(adam_step(&mut p, &[0.1, f64::NAN], &mut st), Err(NnError::NonFiniteGradient(1)));
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.t, 0);
    }

    #[test]
    fn grad_check_on_quadratic() {
        let theta = vec![0.3, -1.7, 2.2, 0.0];
        let analytic: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let report = grad_check(|p| p.iter().map(|x| x * x).sum(), &theta, &analytic, GradCheckOptions::default());
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn grad_check_reports_nan_and_subsamples() {
        let theta = vec![1.0; 50];
        let analytic = vec![0.0; 50];
        let opts = GradCheckOptions { max_coords: 10, ..Default::default() };
        let report = grad_check(|p| if p[7] != 1.0 { f64::NAN } else { 0.0 }, &theta, &analytic, opts);
        assert_eq!(report.checked, 10);
        let full = grad_check(|p| if p[7] != 1.0 { f64::NAN } else { 0.0 }, &theta, &analytic, GradCheckOptions::default());
        assert_eq!(full.nan_coords, vec![7]);
    }

    #[test]
    fn softplus_head_large_negative_gradient_is_finite() {
        let mut net = Mlp::zeros(&[1, 1], &[Activation::Softplus]).unwrap();
        net.set_bias(0, 0, -800.0);
        let tape = net.forward(&[1.0]).unwrap();
        assert!(tape.output()[0].is_finite());
        let (g, _) = net.backward(&tape, &[1.0]).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
    }
}
