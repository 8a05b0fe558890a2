//! Fully-connected regression network trained with Adam.
//!
//! `n_l` hidden layers of width `n_n` with exact GELU activations, followed
//! by a linear readout to one scalar. Parameters live in one flat buffer,
//! layer by layer, each layer as a row-major `out × in` weight matrix
//! followed by its bias vector.

use std::fmt::Debug;
use std::fs;
use std::io::{self, Write};
use std::iter::Sum;
use std::path::Path;
use std::time::Instant;

use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Width of the flattened two-layer image input.
pub const DEFAULT_INPUT_WIDTH: usize = 20_000;

/// Smallest MSE distinguishable from single-precision round-off.
pub const PRECISION_FLOOR: f64 = 1.9e-7;

const CHECKPOINT_MAGIC: &[u8; 4] = b"SFMP";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("empty batch")]
    EmptyBatch,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Floating-point type usable as network storage.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl<T: Float + Sum + Default + Debug + Send + Sync + 'static> Real for T {}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MlpSpec {
    pub n_i: usize,
    pub n_l: usize,
    pub n_n: usize,
}

impl MlpSpec {
    pub fn new(n_i: usize, n_l: usize, n_n: usize) -> Result<Self, MlpError> {
        let spec = Self { n_i, n_l, n_n };
        spec.validate()?;
        Ok(spec)
    }

    /// Architecture on the standard 20,000-pixel input.
    pub fn images(n_l: usize, n_n: usize) -> Result<Self, MlpError> {
        Self::new(DEFAULT_INPUT_WIDTH, n_l, n_n)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.n_i == 0 || self.n_l == 0 || self.n_n == 0 {
            return Err(MlpError::InvalidSpec(format!(
                "n_i, n_l and n_n must be positive, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let (n_i, n_l, n_n) = (self.n_i, self.n_l, self.n_n);
        n_n * (n_i + (n_l - 1) * n_n + 1 + n_l) + 1
    }

    /// `(fan_out, fan_in)` of each affine layer, readout last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = vec![(self.n_n, self.n_i)];
        shapes.extend(std::iter::repeat_n((self.n_n, self.n_n), self.n_l - 1));
        shapes.push((1, self.n_n));
        shapes
    }

    /// Identifier used in result tables, e.g. `l3n16`.
    pub fn arch_id(&self) -> String {
        format!("l{}n{}", self.n_l, self.n_n)
    }
}

pub fn param_count(spec: &MlpSpec) -> usize {
    spec.param_count()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerView {
    rows: usize,
    cols: usize,
    weights: usize,
    bias: usize,
}

fn layer_views(spec: &MlpSpec) -> Vec<LayerView> {
    let mut offset = 0;
    spec.layer_shapes()
        .into_iter()
        .map(|(rows, cols)| {
            let v = LayerView {
                rows,
                cols,
                weights: offset,
                bias: offset + rows * cols,
            };
            offset += rows * cols + rows;
            v
        })
        .collect()
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(&x, &y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Four dot products of `x` against consecutive rows, reading `x` once.
#[inline]
fn dot4<T: Real>(rows: [&[T]; 4], x: &[T]) -> [T; 4] {
    const W: usize = 8;
    let n = x.len() / W * W;
    let mut acc = [[T::zero(); W]; 4];
    let chunks = x[..n]
        .chunks_exact(W)
        .zip(rows[0][..n].chunks_exact(W))
        .zip(rows[1][..n].chunks_exact(W))
        .zip(rows[2][..n].chunks_exact(W))
        .zip(rows[3][..n].chunks_exact(W));
    for ((((xv, r0), r1), r2), r3) in chunks {
        for k in 0..W {
            acc[0][k] = acc[0][k] + r0[k] * xv[k];
            acc[1][k] = acc[1][k] + r1[k] * xv[k];
            acc[2][k] = acc[2][k] + r2[k] * xv[k];
            acc[3][k] = acc[3][k] + r3[k] * xv[k];
        }
    }
    let mut out = [T::zero(); 4];
    for (o, (r, a)) in out.iter_mut().zip(rows.iter().zip(acc)) {
        let tail: T = r[n..].iter().zip(&x[n..]).map(|(&u, &v)| u * v).sum();
        *o = ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7])) + tail;
    }
    out
}

/// `y += Σ_k alpha[k]·x[k]` over four inputs in one pass over `y`.
#[inline]
fn axpy4<T: Real>(alpha: [T; 4], x: [&[T]; 4], y: &mut [T]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for i in 0..n {
        y[i] =
            y[i] + ((alpha[0] * x0[i] + alpha[1] * x1[i]) + (alpha[2] * x2[i] + alpha[3] * x3[i]));
    }
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Network parameters in storage precision `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T: Real = f32> {
    spec: MlpSpec,
    params: Vec<T>,
    layers: Vec<LayerView>,
}

/// Per-batch activations kept for the backward pass.
struct Trace<T> {
    pre: Vec<Vec<T>>,
    post: Vec<Vec<T>>,
    output: Vec<T>,
}

impl<T: Real> MlpModel<T> {
    pub fn zeros(spec: MlpSpec) -> Result<Self, MlpError> {
        spec.validate()?;
        Ok(Self {
            params: vec![T::zero(); spec.param_count()],
            layers: layer_views(&spec),
            spec,
        })
    }

    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self, MlpError> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in model.layers.clone() {
            let bound = 1.0 / (l.cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            for p in &mut model.params[l.weights..l.bias + l.rows] {
                *p = T::from_f64(dist.sample(&mut rng));
            }
        }
        Ok(model)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<T>) -> Result<Self, MlpError> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(MlpError::Shape {
                expected: spec.param_count(),
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(MlpError::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            layers: layer_views(&spec),
            spec,
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    /// Weight matrix and bias of layer `k` (readout is the last layer).
    pub fn layer(&self, k: usize) -> (&[T], &[T]) {
        let l = self.layers[k];
        (
            &self.params[l.weights..l.bias],
            &self.params[l.bias..l.bias + l.rows],
        )
    }

    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        MlpModel {
            spec: self.spec,
            params: self
                .params
                .iter()
                .map(|p| U::from_f64(p.as_f64()))
                .collect(),
            layers: self.layers.clone(),
        }
    }

    fn check_inputs(&self, inputs: &[&[T]]) -> Result<(), MlpError> {
        if inputs.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        for x in inputs {
            if x.len() != self.spec.n_i {
                return Err(MlpError::Shape {
                    expected: self.spec.n_i,
                    got: x.len(),
                });
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(MlpError::NonFiniteInput);
            }
        }
        Ok(())
    }

    fn run(&self, inputs: &[&[T]]) -> Trace<T> {
        let batch = inputs.len();
        let hidden = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(hidden);
        let mut post: Vec<Vec<T>> = Vec::with_capacity(hidden);
        for (k, l) in self.layers.iter().enumerate() {
            let w = &self.params[l.weights..l.bias];
            let b = &self.params[l.bias..l.bias + l.rows];
            let mut z = vec![T::zero(); batch * l.rows];
            let input = |s: usize| -> &[T] {
                if k == 0 {
                    inputs[s]
                } else {
                    &post[k - 1][s * l.cols..(s + 1) * l.cols]
                }
            };
            let row = |j: usize| &w[j * l.cols..(j + 1) * l.cols];
            let blocked = l.rows / 4 * 4;
            for j in (0..blocked).step_by(4) {
                let rows = [row(j), row(j + 1), row(j + 2), row(j + 3)];
                for s in 0..batch {
                    let d = dot4(rows, input(s));
                    for q in 0..4 {
                        z[s * l.rows + j + q] = d[q] + b[j + q];
                    }
                }
            }
            for j in blocked..l.rows {
                for s in 0..batch {
                    z[s * l.rows + j] = dot(row(j), input(s)) + b[j];
                }
            }
            if k == hidden {
                return Trace {
                    pre,
                    post,
                    output: z,
                };
            }
            post.push(z.iter().map(|&v| T::from_f64(gelu(v.as_f64()))).collect());
            pre.push(z);
        }
        unreachable!("network has a readout layer")
    }

    /// Scalar prediction for one input vector.
    pub fn forward(&self, input: &[T]) -> Result<T, MlpError> {
        Ok(self.forward_batch(&[input])?[0])
    }

    pub fn forward_batch(&self, inputs: &[&[T]]) -> Result<Vec<T>, MlpError> {
        self.check_inputs(inputs)?;
        Ok(self.run(inputs).output)
    }

    /// Batch MSE and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, inputs: &[&[T]], targets: &[T]) -> Result<(T, Vec<T>), MlpError> {
        let mut grad = vec![T::zero(); self.params.len()];
        let loss = self.loss_and_grad_into(inputs, targets, &mut grad)?;
        Ok((loss, grad))
    }

    /// As [`Self::loss_and_grad`], overwriting `grad`.
    pub fn loss_and_grad_into(
        &self,
        inputs: &[&[T]],
        targets: &[T],
        grad: &mut [T],
    ) -> Result<T, MlpError> {
        self.check_inputs(inputs)?;
        if targets.len() != inputs.len() {
            return Err(MlpError::Shape {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        if grad.len() != self.params.len() {
            return Err(MlpError::Shape {
                expected: self.params.len(),
                got: grad.len(),
            });
        }
        grad.fill(T::zero());
        let batch = inputs.len();
        let trace = self.run(inputs);
        let scale = T::from_f64(1.0 / batch as f64);
        let two = T::from_f64(2.0);
        let mut delta: Vec<T> = trace
            .output
            .iter()
            .zip(targets)
            .map(|(&p, &y)| two * (p - y) * scale)
            .collect();
        let loss = trace
            .output
            .iter()
            .zip(targets)
            .map(|(&p, &y)| (p - y) * (p - y))
            .sum::<T>()
            * scale;

        for k in (0..self.layers.len()).rev() {
            let l = self.layers[k];
            let (gw, gb) = grad[l.weights..l.bias + l.rows].split_at_mut(l.rows * l.cols);
            let input = |s: usize| -> &[T] {
                if k == 0 {
                    inputs[s]
                } else {
                    &trace.post[k - 1][s * l.cols..(s + 1) * l.cols]
                }
            };
            let blocked = batch / 4 * 4;
            for j in 0..l.rows {
                let row = &mut gw[j * l.cols..(j + 1) * l.cols];
                let d = |s: usize| delta[s * l.rows + j];
                for s in 0..batch {
                    gb[j] = gb[j] + d(s);
                }
                for s in (0..blocked).step_by(4) {
                    let alpha = [d(s), d(s + 1), d(s + 2), d(s + 3)];
                    axpy4(
                        alpha,
                        [input(s), input(s + 1), input(s + 2), input(s + 3)],
                        row,
                    );
                }
                for s in blocked..batch {
                    axpy(d(s), input(s), row);
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.params[l.weights..l.bias];
            let z = &trace.pre[k - 1];
            let mut next = vec![T::zero(); batch * l.cols];
            for s in 0..batch {
                let out = &mut next[s * l.cols..(s + 1) * l.cols];
                for j in 0..l.rows {
                    axpy(delta[s * l.rows + j], &w[j * l.cols..(j + 1) * l.cols], out);
                }
                for (o, &zv) in out.iter_mut().zip(&z[s * l.cols..(s + 1) * l.cols]) {
                    *o = *o * T::from_f64(gelu_derivative(zv.as_f64()));
                }
            }
            delta = next;
        }
        Ok(loss)
    }

    /// Mean squared error, accumulated in double precision.
    pub fn evaluate(&self, inputs: &[&[T]], targets: &[T]) -> Result<f64, MlpError> {
        if targets.len() != inputs.len() {
            return Err(MlpError::Shape {
                expected: inputs.len(),
                got: targets.len(),
            });
        }
        let mut sum = 0.0;
        for (xs, ys) in inputs.chunks(256).zip(targets.chunks(256)) {
            let pred = self.forward_batch(xs)?;
            sum += pred
                .iter()
                .zip(ys)
                .map(|(&p, &y)| (p.as_f64() - y.as_f64()).powi(2))
                .sum::<f64>();
        }
        Ok(sum / inputs.len() as f64)
    }
}

impl MlpModel<f32> {
    pub fn save(&self, path: &Path) -> Result<(), MlpError> {
        let mut out = Vec::with_capacity(40 + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [self.spec.n_i, self.spec.n_l, self.spec.n_n] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MlpError> {
        let bytes = fs::read(path)?;
        let bad = |m: &str| MlpError::Checkpoint(m.to_string());
        if bytes.len() < 28 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if u32_at(4) != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let spec = MlpSpec::new(u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize)?;
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        if count != spec.param_count() || bytes.len() != 28 + 4 * count {
            return Err(bad("parameter blob does not match the architecture"));
        }
        let params = bytes[28..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_params(spec, params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn step(&mut self, params: &mut [T], grad: &[T], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let corr1 = T::from_f64(1.0 / (1.0 - c.beta1.powi(self.step as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - c.beta2.powi(self.step as i32)));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(c.eps));
        for (((w, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m * corr1;
            let v_hat = *v * corr2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Real>(state: &mut AdamState<T>, params: &mut [T], grad: &[T], lr: f64) {
    state.step(params, grad, lr);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            lr_decay: 0.98,
            max_epochs: 200,
            patience: 100,
            batch_size: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        let bad = |m: &str| Err(MlpError::InvalidConfig(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return bad("max_epochs, batch_size and patience must be positive");
        }
        Ok(())
    }
}

/// Borrowed inputs and scalar targets.
#[derive(Debug, Clone, Default)]
pub struct Samples<'a, T> {
    pub inputs: Vec<&'a [T]>,
    pub targets: Vec<T>,
}

impl<'a, T: Copy> Samples<'a, T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn push(&mut self, input: &'a [T], target: T) {
        self.inputs.push(input);
        self.targets.push(target);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub train: f64,
    pub val: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub history: Vec<EpochLoss>,
    pub test_mse: Option<f64>,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn at_precision_floor(&self) -> bool {
        self.test_mse.is_some_and(|e| e < PRECISION_FLOOR)
    }
}

/// Train from a seeded initialization with per-epoch shuffling, exponential
/// learning-rate decay and early stopping on validation MSE. The returned
/// model carries the weights of the best validation epoch.
pub fn train<T: Real>(
    spec: MlpSpec,
    train_set: &Samples<'_, T>,
    val_set: &Samples<'_, T>,
    test_set: Option<&Samples<'_, T>>,
    cfg: &TrainConfig,
) -> Result<(MlpModel<T>, TrainReport), MlpError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MlpError::EmptyBatch);
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::<T>::init(spec, rand::Rng::gen(&mut rng))?;
    let mut adam = AdamState::new(model.params.len(), cfg.adam);
    let mut grad = vec![T::zero(); model.params.len()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best_params = model.params.clone();
    let (mut best_val, mut best_epoch) = (f64::INFINITY, 0);
    let mut history = Vec::new();
    let mut batch_x: Vec<&[T]> = Vec::with_capacity(cfg.batch_size);
    let mut batch_y: Vec<T> = Vec::with_capacity(cfg.batch_size);

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let mut train_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.push(train_set.inputs[i]);
                batch_y.push(train_set.targets[i]);
            }
            let loss = model
                .loss_and_grad_into(&batch_x, &batch_y, &mut grad)?
                .as_f64();
            if !loss.is_finite() {
                return Err(MlpError::Diverged { epoch, loss });
            }
            train_sum += loss * chunk.len() as f64;
            adam.step(&mut model.params, &grad, lr);
        }
        let val = model.evaluate(&val_set.inputs, &val_set.targets)?;
        if !val.is_finite() {
            return Err(MlpError::Diverged { epoch, loss: val });
        }
        history.push(EpochLoss {
            train: train_sum / train_set.len() as f64,
            val,
            lr,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best_params.copy_from_slice(&model.params);
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    model.params = best_params;
    let test_mse = test_set
        .map(|t| model.evaluate(&t.inputs, &t.targets))
        .transpose()?;
    let report = TrainReport {
        best_val_loss: best_val,
        best_epoch,
        epochs_run: history.len(),
        history,
        test_mse,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}
