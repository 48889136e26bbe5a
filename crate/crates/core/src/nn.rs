//! Dense feed-forward networks with exact manual backpropagation and Adam.
//!
//! Weights are stored row-major with shape `(out, in)` per layer. Hidden
//! layers use ReLU, the output layer is the identity. Everything is `f64`
//! so gradient checks against finite differences can be tight.

use rand::distr::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

/// A multi-layer perceptron: ReLU on hidden layers, identity on the output.
#[derive(Debug, Clone)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    // Bumped on every parameter mutation so stale caches can be detected.
    generation: u64,
}

impl PartialEq for DenseNet {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && bits_eq(&self.weights, &other.weights)
            && bits_eq(&self.biases, &other.biases)
    }
}

fn bits_eq(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

/// Activations recorded by [`DenseNet::forward`], consumed by backward.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layer_dims: Vec<usize>,
    generation: u64,
    /// `inputs[l]` is the input to layer `l` (post-activation of layer `l-1`).
    inputs: Vec<Vec<f64>>,
    /// `pre[l]` is the pre-activation of layer `l`.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    /// Pre-activation of the output layer, which is also the network output.
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Per-parameter arrays with the same shapes as a [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Adds the squared entries to `acc` layer by layer, weights before biases.
    pub fn accumulate_sq(&self, acc: &mut f64) {
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for x in w.iter().chain(b.iter()) {
                *acc += x * x;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| *x == 0.0))
    }

    /// Index of the first layer holding a non-finite entry.
    pub fn first_non_finite_layer(&self) -> Option<usize> {
        self.weights
            .iter()
            .zip(&self.biases)
            .position(|(w, b)| w.iter().chain(b.iter()).any(|x| !x.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Flattened view in layer order (weights then biases per layer).
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

impl DenseNet {
    /// Builds a network with uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// initialization of weights and biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], rng: &mut R) -> Result<Self> {
        validate_dims(layer_dims)?;
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push((0..fan_in * fan_out).map(|_| dist.sample(rng)).collect());
            biases.push((0..fan_out).map(|_| dist.sample(rng)).collect());
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            generation: 0,
        })
    }

    /// Builds a network from explicit parameters.
    pub fn from_params(
        layer_dims: Vec<usize>,
        weights: Vec<Vec<f64>>,
        biases: Vec<Vec<f64>>,
    ) -> Result<Self> {
        validate_dims(&layer_dims)?;
        let layers = layer_dims.len() - 1;
        if weights.len() != layers || biases.len() != layers {
            return Err(Error::Shape(format!(
                "expected {layers} weight and bias arrays, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for (l, pair) in layer_dims.windows(2).enumerate() {
            if weights[l].len() != pair[0] * pair[1] || biases[l].len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {l}: expected {}x{} weights and {} biases",
                    pair[1], pair[0], pair[1]
                )));
            }
            if weights[l].iter().chain(&biases[l]).any(|x| !x.is_finite()) {
                return Err(Error::Numeric {
                    layer: l,
                    detail: "non-finite parameter".into(),
                });
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            generation: 0,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated dims")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Mutable access to the raw parameters. Invalidates outstanding caches.
    pub fn params_mut(&mut self) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        self.generation += 1;
        (&mut self.weights, &mut self.biases)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Copies parameters from a network of identical shape.
    pub fn copy_params_from(&mut self, other: &DenseNet) -> Result<()> {
        if self.layer_dims != other.layer_dims {
            return Err(Error::Shape(format!(
                "cannot copy {:?} into {:?}",
                other.layer_dims, self.layer_dims
            )));
        }
        self.weights.clone_from(&other.weights);
        self.biases.clone_from(&other.biases);
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                detail: "non-finite input".into(),
            });
        }
        let layers = self.num_layers();
        let mut inputs = Vec::with_capacity(layers);
        let mut pre = Vec::with_capacity(layers);
        let mut x = input.to_vec();
        for l in 0..layers {
            let z = affine(&self.weights[l], &self.biases[l], &x, self.layer_dims[l + 1]);
            let next = if l + 1 < layers {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        let cache = ForwardCache {
            layer_dims: self.layer_dims.clone(),
            generation: self.generation,
            inputs,
            pre,
        };
        Ok((x, cache))
    }

    /// Output only, without keeping a cache.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has length {}, network expects {}",
                input.len(),
                self.input_dim()
            )));
        }
        if input.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                layer: 0,
                detail: "non-finite input".into(),
            });
        }
        let layers = self.num_layers();
        let mut x = input.to_vec();
        for l in 0..layers {
            let mut z = affine(&self.weights[l], &self.biases[l], &x, self.layer_dims[l + 1]);
            if l + 1 < layers {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            x = z;
        }
        Ok(x)
    }

    /// Gradients of `output . grad_output` with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &[f64]) -> Result<GradientSet> {
        self.backward_impl(cache, grad_output, false).map(|(g, _)| g)
    }

    /// Like [`backward`](Self::backward), also returning the gradient with
    /// respect to the network input.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
    ) -> Result<(GradientSet, Vec<f64>)> {
        self.backward_impl(cache, grad_output, true)
            .map(|(g, i)| (g, i.expect("input gradient requested")))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        want_input: bool,
    ) -> Result<(GradientSet, Option<Vec<f64>>)> {
        if cache.layer_dims != self.layer_dims || cache.generation != self.generation {
            return Err(Error::Cache);
        }
        if grad_output.len() != self.output_dim() {
            return Err(Error::Shape(format!(
                "grad_output has length {}, network outputs {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        if grad_output.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                layer: self.num_layers() - 1,
                detail: "non-finite output gradient".into(),
            });
        }
        let layers = self.num_layers();
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = grad_output.to_vec();
        let mut input_grad = None;
        for l in (0..layers).rev() {
            let n_in = self.layer_dims[l];
            let a = &cache.inputs[l];
            let gw = &mut grads.weights[l];
            for (o, d) in delta.iter().enumerate() {
                let row = &mut gw[o * n_in..(o + 1) * n_in];
                for (g, x) in row.iter_mut().zip(a) {
                    *g = d * x;
                }
            }
            grads.biases[l].copy_from_slice(&delta);
            if l > 0 || want_input {
                let mut prev = propagate(&self.weights[l], &delta, n_in);
                if l > 0 {
                    for (p, z) in prev.iter_mut().zip(&cache.pre[l - 1]) {
                        if *z <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                } else {
                    input_grad = Some(prev);
                }
            }
        }
        Ok((grads, input_grad))
    }
}

fn validate_dims(layer_dims: &[usize]) -> Result<()> {
    if layer_dims.len() < 2 || layer_dims.iter().any(|d| *d == 0) {
        return Err(Error::Shape(format!(
            "layer_dims must hold at least two positive sizes, got {layer_dims:?}"
        )));
    }
    Ok(())
}

fn affine(w: &[f64], b: &[f64], x: &[f64], n_out: usize) -> Vec<f64> {
    let n_in = x.len();
    (0..n_out)
        .map(|o| {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            acc
        })
        .collect()
}

/// `W^T delta` for a row-major `(out, in)` matrix.
fn propagate(w: &[f64], delta: &[f64], n_in: usize) -> Vec<f64> {
    let mut out = vec![0.0; n_in];
    for (o, d) in delta.iter().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        for (acc, wi) in out.iter_mut().zip(row) {
            *acc += wi * d;
        }
    }
    out
}

/// Central-difference estimate of `d(output . grad_output)/d(theta)`.
///
/// Test oracle for [`DenseNet::backward`]; costs two forward passes per
/// parameter.
pub fn finite_diff_grad(
    net: &DenseNet,
    input: &[f64],
    grad_output: &[f64],
    h: f64,
) -> Result<GradientSet> {
    if !(h > 0.0) {
        return Err(Error::Usage(format!("finite difference step must be > 0, got {h}")));
    }
    let objective = |n: &DenseNet| -> Result<f64> {
        let out = n.predict(input)?;
        Ok(out.iter().zip(grad_output).map(|(o, g)| o * g).sum())
    };
    let mut probe = net.clone();
    let mut grads = GradientSet::zeros_like(net);
    for l in 0..net.num_layers() {
        for i in 0..net.weights[l].len() {
            let orig = probe.weights[l][i];
            probe.weights[l][i] = orig + h;
            let plus = objective(&probe)?;
            probe.weights[l][i] = orig - h;
            let minus = objective(&probe)?;
            probe.weights[l][i] = orig;
            grads.weights[l][i] = (plus - minus) / (2.0 * h);
        }
        for i in 0..net.biases[l].len() {
            let orig = probe.biases[l][i];
            probe.biases[l][i] = orig + h;
            let plus = objective(&probe)?;
            probe.biases[l][i] = orig - h;
            let minus = objective(&probe)?;
            probe.biases[l][i] = orig;
            grads.biases[l][i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Largest elementwise `|a-b| / max(|a|, |b|, floor)` between two gradient sets.
pub fn max_relative_error(a: &GradientSet, b: &GradientSet, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// First/second-moment accumulators for one [`DenseNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: GradientSet,
    pub v: GradientSet,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(net: &DenseNet) -> Self {
        Self::with_hyper(net, Self::DEFAULT_BETA1, Self::DEFAULT_BETA2, Self::DEFAULT_EPSILON)
    }

    pub fn with_hyper(net: &DenseNet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            step: 0,
            m: GradientSet::zeros_like(net),
            v: GradientSet::zeros_like(net),
            beta1,
            beta2,
            epsilon,
        }
    }

    pub(crate) fn congruent(&self, net: &DenseNet) -> bool {
        let shape = |g: &GradientSet| -> Vec<usize> {
            g.weights.iter().chain(g.biases.iter()).map(Vec::len).collect()
        };
        let net_shape: Vec<usize> = net
            .weights
            .iter()
            .chain(net.biases.iter())
            .map(Vec::len)
            .collect();
        shape(&self.m) == net_shape && shape(&self.v) == net_shape
    }
}

/// One bias-corrected Adam update.
///
/// An all-zero gradient set only advances `state.step`: parameters and
/// moments are left untouched, so heads excluded by a bootstrap mask do not
/// drift on stale momentum.
pub fn adam_step(net: &mut DenseNet, state: &mut AdamState, grads: &GradientSet, lr: f64) -> Result<()> {
    if !state.congruent(net) || grads.weights.len() != net.weights.len() {
        return Err(Error::Shape("optimizer state or gradients do not match network".into()));
    }
    for (l, (gw, gb)) in grads.weights.iter().zip(&grads.biases).enumerate() {
        if gw.len() != net.weights[l].len() || gb.len() != net.biases[l].len() {
            return Err(Error::Shape(format!("gradient shape mismatch at layer {l}")));
        }
    }
    if let Some(layer) = grads.first_non_finite_layer() {
        return Err(Error::Numeric {
            layer,
            detail: "non-finite gradient".into(),
        });
    }
    state.step += 1;
    if grads.is_zero() {
        return Ok(());
    }
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let update = |p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    };
    for l in 0..net.weights.len() {
        update(&mut net.weights[l], &mut state.m.weights[l], &mut state.v.weights[l], &grads.weights[l]);
        update(&mut net.biases[l], &mut state.m.biases[l], &mut state.v.biases[l], &grads.biases[l]);
    }
    net.generation += 1;
    Ok(())
}

/// Rescales all sets jointly so their global L2 norm is at most `max_norm`.
///
/// Squares are accumulated sequentially across the sets in order. Returns the
/// norm before clipping.
pub fn clip_global_norm(sets: &mut [&mut GradientSet], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for s in sets.iter() {
        s.accumulate_sq(&mut sq);
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for s in sets.iter_mut() {
            s.scale(factor);
        }
    }
    norm
}
