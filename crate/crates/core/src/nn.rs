//! Small fully connected networks with hand-written reverse-mode gradients.
//!
//! Parameters live in a single flat `f32` buffer (so checkpoints round-trip
//! bit-exactly), while every forward and backward computation runs in `f64`.
//! Layer `l` occupies `out * in` row-major weights followed by `out` biases.
//!
//! Two evaluation paths exist: a per-sample path used while acting in an
//! environment, and a batched path built on matrix products used for
//! training. Both compute the same function.

use ndarray::{Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn slope(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// Layer sizes plus one activation per hidden layer. The output layer is
/// always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_sizes: Vec<usize>,
    hidden: Vec<Activation>,
}

impl NetworkSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("a network needs at least an input and an output layer"));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("layer sizes must be positive: {layer_sizes:?}")));
        }
        if hidden.len() != layer_sizes.len() - 2 {
            return Err(Error::dim("hidden activations", layer_sizes.len() - 2, hidden.len()));
        }
        Ok(Self {
            layer_sizes,
            hidden,
        })
    }

    /// All hidden layers share `activation`.
    pub fn uniform(layer_sizes: &[usize], activation: Activation) -> Result<Self> {
        let hidden = vec![activation; layer_sizes.len().saturating_sub(2)];
        Self::new(layer_sizes.to_vec(), hidden)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.num_layers() {
            Activation::Identity
        } else {
            self.hidden[layer]
        }
    }

    pub fn hidden_activations(&self) -> &[Activation] {
        &self.hidden
    }

    /// `(out, in)` for layer `l`.
    pub fn layer_shape(&self, l: usize) -> (usize, usize) {
        (self.layer_sizes[l + 1], self.layer_sizes[l])
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_layers())
            .map(|l| {
                let (o, i) = self.layer_shape(l);
                o * i + o
            })
            .sum()
    }

    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.num_layers() + 1);
        let mut acc = 0;
        for l in 0..self.num_layers() {
            offs.push(acc);
            let (o, i) = self.layer_shape(l);
            acc += o * i + o;
        }
        offs.push(acc);
        offs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    shapes: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    data: Vec<f32>,
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let shapes = (0..spec.num_layers()).map(|l| spec.layer_shape(l)).collect();
        let offsets = spec.offsets();
        let data = vec![0.0; spec.param_count()];
        Self {
            shapes,
            offsets,
            data,
        }
    }

    pub fn from_flat(spec: &NetworkSpec, data: Vec<f32>) -> Result<Self> {
        if data.len() != spec.param_count() {
            return Err(Error::dim("network parameter buffer", spec.param_count(), data.len()));
        }
        let mut p = Self::zeros(spec);
        p.data = data;
        Ok(p)
    }

    pub fn matches(&self, spec: &NetworkSpec) -> bool {
        self.shapes.len() == spec.num_layers()
            && (0..spec.num_layers()).all(|l| self.shapes[l] == spec.layer_shape(l))
    }

    pub fn num_layers(&self) -> usize {
        self.shapes.len()
    }

    pub fn shape(&self, l: usize) -> (usize, usize) {
        self.shapes[l]
    }

    pub fn weights(&self, l: usize) -> &[f32] {
        let (o, i) = self.shapes[l];
        &self.data[self.offsets[l]..self.offsets[l] + o * i]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f32] {
        let (o, i) = self.shapes[l];
        let start = self.offsets[l];
        &mut self.data[start..start + o * i]
    }

    pub fn bias(&self, l: usize) -> &[f32] {
        let (o, i) = self.shapes[l];
        let start = self.offsets[l] + o * i;
        &self.data[start..start + o]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f32] {
        let (o, i) = self.shapes[l];
        let start = self.offsets[l] + o * i;
        &mut self.data[start..start + o]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Human-readable name of the tensor holding flat index `idx`.
    pub fn describe_index(&self, idx: usize) -> String {
        for l in 0..self.shapes.len() {
            if idx < self.offsets[l + 1] {
                let (o, i) = self.shapes[l];
                let part = if idx - self.offsets[l] < o * i { "weights" } else { "bias" };
                return format!("layer {l} {part}");
            }
        }
        format!("index {idx} (out of range)")
    }

    fn weight_matrix(&self, l: usize) -> Array2<f64> {
        let (o, i) = self.shapes[l];
        Array2::from_shape_fn((o, i), |(r, c)| self.weights(l)[r * i + c] as f64)
    }
}

/// Fan-in scaled Gaussian initialisation: `sqrt(2/fan_in)` for relu layers,
/// `sqrt(1/fan_in)` otherwise. Biases start at zero.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut params = NetworkParams::zeros(spec);
    let mut rng = rng::stream(seed, rng::tag("init_params"));
    for l in 0..spec.num_layers() {
        let (_, fan_in) = spec.layer_shape(l);
        let gain = if spec.activation(l) == Activation::Relu { 2.0 } else { 1.0 };
        let scale = (gain / fan_in as f64).sqrt();
        for w in params.weights_mut(l) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = (z * scale) as f32;
        }
    }
    params
}

/// Per-sample activations retained for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn check_params(spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    if !params.matches(spec) {
        return Err(Error::dim("network parameters vs spec", spec.param_count(), params.len()));
    }
    Ok(())
}

pub fn forward(spec: &NetworkSpec, params: &NetworkParams, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    check_params(spec, params)?;
    if input.len() != spec.input_dim() {
        return Err(Error::dim("network input", spec.input_dim(), input.len()));
    }
    let mut cache = ForwardCache {
        inputs: Vec::with_capacity(spec.num_layers()),
        pre: Vec::with_capacity(spec.num_layers()),
        post: Vec::with_capacity(spec.num_layers()),
    };
    let mut x = input.to_vec();
    for l in 0..spec.num_layers() {
        let (o, i) = spec.layer_shape(l);
        let w = params.weights(l);
        let b = params.bias(l);
        let act = spec.activation(l);
        let mut z = vec![0.0; o];
        let mut y = vec![0.0; o];
        for r in 0..o {
            let row = &w[r * i..(r + 1) * i];
            let s: f64 = row.iter().zip(&x).map(|(&wv, &xv)| wv as f64 * xv).sum();
            z[r] = s + b[r] as f64;
            y[r] = act.apply(z[r]);
        }
        cache.inputs.push(std::mem::replace(&mut x, y.clone()));
        cache.pre.push(z);
        cache.post.push(y);
    }
    Ok((x, cache))
}

/// Output only; skips building the cache.
pub fn predict(spec: &NetworkSpec, params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    check_params(spec, params)?;
    if input.len() != spec.input_dim() {
        return Err(Error::dim("network input", spec.input_dim(), input.len()));
    }
    let mut x = input.to_vec();
    for l in 0..spec.num_layers() {
        let (o, i) = spec.layer_shape(l);
        let w = params.weights(l);
        let b = params.bias(l);
        let act = spec.activation(l);
        x = (0..o)
            .map(|r| {
                let row = &w[r * i..(r + 1) * i];
                let s: f64 = row.iter().zip(&x).map(|(&wv, &xv)| wv as f64 * xv).sum();
                act.apply(s + b[r] as f64)
            })
            .collect();
    }
    Ok(x)
}

/// Gradients of `output · upstream` with respect to the flat parameter
/// buffer and the input.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_params(spec, params)?;
    if cache.pre.len() != spec.num_layers() {
        return Err(Error::dim("forward cache layers", spec.num_layers(), cache.pre.len()));
    }
    if upstream.len() != spec.output_dim() {
        return Err(Error::dim("upstream gradient", spec.output_dim(), upstream.len()));
    }
    let offsets = spec.offsets();
    let mut grads = vec![0.0; spec.param_count()];
    let mut g = upstream.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let (o, i) = spec.layer_shape(l);
        let act = spec.activation(l);
        let delta: Vec<f64> = (0..o)
            .map(|r| g[r] * act.slope(cache.pre[l][r], cache.post[l][r]))
            .collect();
        let x = &cache.inputs[l];
        let base = offsets[l];
        for r in 0..o {
            let dr = delta[r];
            if dr != 0.0 {
                let row = &mut grads[base + r * i..base + (r + 1) * i];
                for (gw, &xv) in row.iter_mut().zip(x) {
                    *gw += dr * xv;
                }
            }
            grads[base + o * i + r] += dr;
        }
        let w = params.weights(l);
        let mut gx = vec![0.0; i];
        for r in 0..o {
            let dr = delta[r];
            if dr != 0.0 {
                for (c, gxc) in gx.iter_mut().enumerate() {
                    *gxc += dr * w[r * i + c] as f64;
                }
            }
        }
        g = gx;
    }
    Ok((grads, g))
}

/// Activations of a batched forward pass (rows are samples).
#[derive(Debug, Clone)]
pub struct BatchCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

pub fn forward_batch(
    spec: &NetworkSpec,
    params: &NetworkParams,
    input: ArrayView2<f64>,
) -> Result<(Array2<f64>, BatchCache)> {
    check_params(spec, params)?;
    if input.ncols() != spec.input_dim() {
        return Err(Error::dim("batched network input", spec.input_dim(), input.ncols()));
    }
    let mut cache = BatchCache {
        inputs: Vec::with_capacity(spec.num_layers()),
        pre: Vec::with_capacity(spec.num_layers()),
        post: Vec::with_capacity(spec.num_layers()),
    };
    let mut x = input.to_owned();
    for l in 0..spec.num_layers() {
        let w = params.weight_matrix(l);
        let b = params.bias(l);
        let act = spec.activation(l);
        let mut z = x.dot(&w.t());
        for mut row in z.rows_mut() {
            for (zv, &bv) in row.iter_mut().zip(b) {
                *zv += bv as f64;
            }
        }
        let y = z.mapv(|v| act.apply(v));
        cache.inputs.push(std::mem::replace(&mut x, y.clone()));
        cache.pre.push(z);
        cache.post.push(y);
    }
    Ok((x, cache))
}

pub fn predict_batch(spec: &NetworkSpec, params: &NetworkParams, input: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    if input.ncols() != spec.input_dim() {
        return Err(Error::dim("batched network input", spec.input_dim(), input.ncols()));
    }
    let mut x = input.to_owned();
    for l in 0..spec.num_layers() {
        let w = params.weight_matrix(l);
        let b = params.bias(l);
        let act = spec.activation(l);
        let mut z = x.dot(&w.t());
        for mut row in z.rows_mut() {
            for (zv, &bv) in row.iter_mut().zip(b) {
                *zv = act.apply(*zv + bv as f64);
            }
        }
        x = z;
    }
    Ok(x)
}

/// Batched backward pass; parameter gradients are summed over rows.
pub fn backward_batch(
    spec: &NetworkSpec,
    params: &NetworkParams,
    cache: &BatchCache,
    upstream: ArrayView2<f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    check_params(spec, params)?;
    if cache.pre.len() != spec.num_layers() {
        return Err(Error::dim("batched forward cache layers", spec.num_layers(), cache.pre.len()));
    }
    if upstream.ncols() != spec.output_dim() {
        return Err(Error::dim("batched upstream gradient", spec.output_dim(), upstream.ncols()));
    }
    if upstream.nrows() != cache.inputs[0].nrows() {
        return Err(Error::dim("batched upstream rows", cache.inputs[0].nrows(), upstream.nrows()));
    }
    let offsets = spec.offsets();
    let mut grads = vec![0.0; spec.param_count()];
    let mut g = upstream.to_owned();
    for l in (0..spec.num_layers()).rev() {
        let (o, i) = spec.layer_shape(l);
        let act = spec.activation(l);
        let mut delta = g;
        if act != Activation::Identity {
            ndarray::Zip::from(&mut delta)
                .and(&cache.pre[l])
                .and(&cache.post[l])
                .for_each(|d, &z, &y| *d *= act.slope(z, y));
        }
        let gw = delta.t().dot(&cache.inputs[l]);
        let gb = delta.sum_axis(Axis(0));
        let base = offsets[l];
        for (dst, &src) in grads[base..base + o * i].iter_mut().zip(gw.iter()) {
            *dst = src;
        }
        for (dst, &src) in grads[base + o * i..base + o * i + o].iter_mut().zip(gb.iter()) {
            *dst = src;
        }
        g = delta.dot(&params.weight_matrix(l));
    }
    Ok((grads, g))
}

/// Mean over rows of the squared L2 error; returns the loss and its
/// gradient `(2/N)(pred - target)`.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::invalid(format!(
            "mse shapes differ: {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let n = pred.nrows();
    if n == 0 {
        return Err(Error::invalid("mse over an empty batch"));
    }
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    let grad = diff * (2.0 / n as f64);
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of a flat buffer. `describe` names the
/// tensor that owns an index for error messages.
pub fn adam_step_flat(
    params: &mut [f32],
    grads: &[f64],
    state: &mut AdamState,
    describe: impl Fn(usize) -> String,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::dim("adam buffers", params.len(), grads.len()));
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", describe(idx))));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g;
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g;
        let mhat = state.m[k] / bc1;
        let vhat = state.v[k] / bc2;
        params[k] = (params[k] as f64 - lr * mhat / (vhat.sqrt() + eps)) as f32;
    }
    Ok(())
}

pub fn adam_step(params: &mut NetworkParams, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let names = params.clone();
    adam_step_flat(params.as_mut_slice(), grads, state, |i| names.describe_index(i))
}

/// A network spec bundled with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
}

impl Mlp {
    pub fn new(spec: NetworkSpec, seed: u64) -> Self {
        let params = init_params(&spec, seed);
        Self { spec, params }
    }

    pub fn from_parts(spec: NetworkSpec, params: NetworkParams) -> Result<Self> {
        check_params(&spec, &params)?;
        Ok(Self { spec, params })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        predict(&self.spec, &self.params, input)
    }

    pub fn predict_batch(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        predict_batch(&self.spec, &self.params, input)
    }

    pub fn forward_batch(&self, input: ArrayView2<f64>) -> Result<(Array2<f64>, BatchCache)> {
        forward_batch(&self.spec, &self.params, input)
    }

    pub fn backward_batch(&self, cache: &BatchCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        backward_batch(&self.spec, &self.params, cache, upstream)
    }
}
