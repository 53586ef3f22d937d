//! Tiny dense networks with exact reverse-mode derivatives.
//!
//! Parameters live in one flat vector. Layer `l` maps `sizes[l]` inputs to
//! `sizes[l+1]` outputs; its weights are stored row-major (`W[o][i]`) and are
//! followed by its biases when the net has biases. Hidden layers apply the
//! activation, the last layer is linear and the head interprets its outputs.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Number type the forward and backward passes are generic over.
pub trait Scalar:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn cst(x: f64) -> Self;
    fn re(self) -> f64;
    fn tanh(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn re(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Forward-mode dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Dual { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        Dual::new(self.re / o.re, (self.eps * o.re - self.re * o.eps) / (o.re * o.re))
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Scalar for Dual {
    fn cst(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    fn re(self) -> f64 {
        self.re
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, self.eps * e)
    }
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// Rectifier; the derivative at exactly 0 is taken to be 0.
    Relu,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z.re() > 0.0 {
                    z
                } else {
                    T::cst(0.0)
                }
            }
        }
    }

    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::cst(1.0) - a * a,
            Activation::Relu => T::cst(if z.re() > 0.0 { 1.0 } else { 0.0 }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Head {
    ScalarValue,
    QValues { n_actions: usize },
    PolicyLogits { n_actions: usize },
    /// Policy logits followed by one value output, sharing the trunk.
    ActorCritic { n_actions: usize },
}

impl Head {
    pub fn output_dim(self) -> usize {
        match self {
            Head::ScalarValue => 1,
            Head::QValues { n_actions } | Head::PolicyLogits { n_actions } => n_actions,
            Head::ActorCritic { n_actions } => n_actions + 1,
        }
    }

    /// Number of actions, if the head has any.
    pub fn n_actions(self) -> Option<usize> {
        match self {
            Head::ScalarValue => None,
            Head::QValues { n_actions } | Head::PolicyLogits { n_actions } | Head::ActorCritic { n_actions } => {
                Some(n_actions)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Init {
    Zeros,
    /// Uniform on ±sqrt(6 / (fan_in + fan_out)); biases zero.
    Glorot,
    Normal { std: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl NetShape {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, bias: bool) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Argument(format!(
                "layer sizes need at least two positive entries, got {layer_sizes:?}"
            )));
        }
        Ok(NetShape { layer_sizes, activation, bias })
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    fn layer_len(&self, l: usize) -> usize {
        let (i, o) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        o * i + if self.bias { o } else { 0 }
    }

    pub fn parameter_count(&self) -> usize {
        (0..self.n_layers()).map(|l| self.layer_len(l)).sum()
    }
}

struct Cache<T> {
    /// Pre-activation output of each layer.
    pre: Vec<Vec<T>>,
    /// `post[l]` is the input to layer `l`; the last entry is the raw output.
    post: Vec<Vec<T>>,
}

fn forward_cache<T: Scalar>(shape: &NetShape, params: &[T], x: &[T]) -> Cache<T> {
    let n_layers = shape.n_layers();
    let mut pre = Vec::with_capacity(n_layers);
    let mut post = Vec::with_capacity(n_layers + 1);
    post.push(x.to_vec());
    let mut offset = 0;
    for l in 0..n_layers {
        let (n_in, n_out) = (shape.layer_sizes[l], shape.layer_sizes[l + 1]);
        let input = &post[l];
        let mut z = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &params[offset + o * n_in..offset + (o + 1) * n_in];
            let mut acc = if shape.bias { params[offset + n_out * n_in + o] } else { T::cst(0.0) };
            for (w, xi) in row.iter().zip(input) {
                acc += *w * *xi;
            }
            z.push(acc);
        }
        offset += shape.layer_len(l);
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| shape.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Cache { pre, post }
}

/// Accumulates `cotᵀ ∂out/∂θ` into `grad`.
fn backward<T: Scalar>(shape: &NetShape, params: &[T], cache: &Cache<T>, cot: &[T], grad: &mut [T]) {
    let n_layers = shape.n_layers();
    let offsets: Vec<usize> = (0..n_layers)
        .scan(0, |acc, l| {
            let o = *acc;
            *acc += shape.layer_len(l);
            Some(o)
        })
        .collect();
    let mut delta = cot.to_vec();
    for l in (0..n_layers).rev() {
        let (n_in, n_out) = (shape.layer_sizes[l], shape.layer_sizes[l + 1]);
        let offset = offsets[l];
        let input = &cache.post[l];
        for o in 0..n_out {
            let d = delta[o];
            for i in 0..n_in {
                grad[offset + o * n_in + i] += d * input[i];
            }
            if shape.bias {
                grad[offset + n_out * n_in + o] += d;
            }
        }
        if l > 0 {
            let mut prev = vec![T::cst(0.0); n_in];
            for (o, &d) in delta.iter().enumerate() {
                for (i, p) in prev.iter_mut().enumerate() {
                    *p += params[offset + o * n_in + i] * d;
                }
            }
            for (i, p) in prev.iter_mut().enumerate() {
                *p = *p * shape.activation.derivative(cache.pre[l - 1][i], input[i]);
            }
            delta = prev;
        }
    }
}

pub(crate) fn raw_output_generic<T: Scalar>(shape: &NetShape, params: &[T], x: &[T]) -> Vec<T> {
    forward_cache(shape, params, x).post.pop().unwrap()
}

/// Returns the raw output and accumulates `cotᵀ ∂out/∂θ` for the cotangent
/// produced by `cot_fn` from that output.
pub(crate) fn vjp_generic<T: Scalar>(
    shape: &NetShape,
    params: &[T],
    x: &[T],
    grad: &mut [T],
    cot_fn: impl FnOnce(&[T]) -> Vec<T>,
) -> Vec<T> {
    let cache = forward_cache(shape, params, x);
    let out = cache.post.last().unwrap().clone();
    let cot = cot_fn(&out);
    backward(shape, params, &cache, &cot, grad);
    out
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - T::cst(max)).exp()).collect();
    let mut total = T::cst(0.0);
    for &e in &exps {
        total += e;
    }
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyNet {
    shape: NetShape,
    head: Head,
    params: Vec<f64>,
}

impl TinyNet {
    pub fn new(shape: NetShape, head: Head, init: Init, seed: u64) -> Result<Self> {
        if head.output_dim() != shape.output_dim() {
            return Err(Error::Argument(format!(
                "head {head:?} needs {} outputs, last layer has {}",
                head.output_dim(),
                shape.output_dim()
            )));
        }
        if let Some(0) = head.n_actions() {
            return Err(Error::Argument("heads need at least one action".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(shape.parameter_count());
        for l in 0..shape.n_layers() {
            let (n_in, n_out) = (shape.layer_sizes[l], shape.layer_sizes[l + 1]);
            match init {
                Init::Zeros => params.extend(std::iter::repeat_n(0.0, n_in * n_out)),
                Init::Glorot => {
                    let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                    params.extend((0..n_in * n_out).map(|_| rng.random_range(-limit..limit)));
                }
                Init::Normal { std } => {
                    let normal = Normal::new(0.0, std)
                        .map_err(|e| Error::Argument(format!("invalid init std {std}: {e}")))?;
                    params.extend((0..n_in * n_out).map(|_| normal.sample(&mut rng)));
                }
            }
            if shape.bias {
                params.extend(std::iter::repeat_n(0.0, n_out));
            }
        }
        Ok(TinyNet { shape, head, params })
    }

    pub fn from_params(shape: NetShape, head: Head, params: Vec<f64>) -> Result<Self> {
        let mut net = TinyNet::new(shape, head, Init::Zeros, 0)?;
        net.set_params(params)?;
        Ok(net)
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn parameter_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        check_len(self.shape.parameter_count(), params.len())?;
        self.params = params;
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len(self.shape.input_dim(), x.len())
    }

    /// Last-layer outputs before the head is applied.
    pub fn raw_output(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(raw_output_generic(&self.shape, &self.params, x))
    }

    /// Head outputs for one state: values, q-values, or action probabilities
    /// (followed by the value for actor-critic heads).
    pub fn output(&self, x: &[f64]) -> Result<Vec<f64>> {
        let raw = self.raw_output(x)?;
        Ok(match self.head {
            Head::ScalarValue | Head::QValues { .. } => raw,
            Head::PolicyLogits { .. } => softmax(&raw),
            Head::ActorCritic { n_actions } => {
                let mut out = softmax(&raw[..n_actions]);
                out.push(raw[n_actions]);
                out
            }
        })
    }

    /// Head outputs for each row of `states`.
    pub fn forward(&self, states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len(self.shape.input_dim(), states.ncols())?;
        let dim = self.head.output_dim();
        let mut out = DMatrix::zeros(states.nrows(), dim);
        for r in 0..states.nrows() {
            let x: Vec<f64> = states.row(r).iter().copied().collect();
            let y = self.output(&x)?;
            for (c, v) in y.into_iter().enumerate() {
                out[(r, c)] = v;
            }
        }
        Ok(out)
    }

    /// Policy probabilities for one state; requires a policy head.
    pub fn policy(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.head {
            Head::PolicyLogits { n_actions } | Head::ActorCritic { n_actions } => {
                let mut out = self.output(x)?;
                out.truncate(n_actions);
                Ok(out)
            }
            _ => Err(Error::Argument(format!("{:?} head has no policy", self.head))),
        }
    }

    /// Raw output `output` for each row of `states`.
    pub fn output_column(&self, states: &DMatrix<f64>, output: usize) -> Result<DVector<f64>> {
        self.check_output(output)?;
        check_len(self.shape.input_dim(), states.ncols())?;
        Ok(DVector::from_iterator(
            states.nrows(),
            (0..states.nrows()).map(|r| {
                let x: Vec<f64> = states.row(r).iter().copied().collect();
                raw_output_generic(&self.shape, &self.params, &x)[output]
            }),
        ))
    }

    fn check_output(&self, output: usize) -> Result<()> {
        if output >= self.shape.output_dim() {
            return Err(Error::Argument(format!(
                "output {output} out of range for {} outputs",
                self.shape.output_dim()
            )));
        }
        Ok(())
    }

    /// `cotᵀ ∂raw_output(x)/∂θ`.
    pub fn vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        check_len(self.shape.output_dim(), cot.len())?;
        let mut grad = vec![0.0; self.params.len()];
        vjp_generic(&self.shape, &self.params, x, &mut grad, |_| cot.to_vec());
        Ok(grad)
    }

    /// Jacobian of raw output `output` with respect to the parameters, one
    /// row per state.
    pub fn jacobian(&self, states: &DMatrix<f64>, output: usize) -> Result<DMatrix<f64>> {
        self.check_output(output)?;
        check_len(self.shape.input_dim(), states.ncols())?;
        let mut cot = vec![0.0; self.shape.output_dim()];
        cot[output] = 1.0;
        let p = self.params.len();
        let mut jac = DMatrix::zeros(states.nrows(), p);
        for r in 0..states.nrows() {
            let x: Vec<f64> = states.row(r).iter().copied().collect();
            let g = self.vjp(&x, &cot)?;
            for (c, v) in g.into_iter().enumerate() {
                jac[(r, c)] = v;
            }
        }
        Ok(jac)
    }
}

/// Converts a row of an embedding table to a vector.
pub(crate) fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}
