//! Dense feed-forward networks.
//!
//! Parameters are flattened layer-major. Within a layer the weight matrix
//! `out x (in + 1)` is stored row-major with the bias as the last column, so
//! each layer acts on the augmented input `[z, 1]`. Posterior covariance
//! blocks and Jacobian columns use this same order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{OpalError, Result};
use crate::laplace::{InferenceHyperParams, PriorKind};
use crate::scalar::Real;

/// Element-wise nonlinearity kinds. Declaration order is the tie-break order
/// used when selecting activations by evidence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActivationKind {
    Tanh,
    ReLU,
    LeakyReLU,
    Sigmoid,
    Identity,
}

impl ActivationKind {
    pub const HIDDEN: [ActivationKind; 4] = [
        ActivationKind::Tanh,
        ActivationKind::ReLU,
        ActivationKind::LeakyReLU,
        ActivationKind::Sigmoid,
    ];
}

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

fn default_slope() -> f64 {
    DEFAULT_LEAKY_SLOPE
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ActivationRepr {
    Name(ActivationKind),
    Full {
        kind: ActivationKind,
        #[serde(default = "default_slope")]
        leaky_slope: f64,
    },
}

impl From<ActivationRepr> for Activation {
    fn from(r: ActivationRepr) -> Self {
        match r {
            ActivationRepr::Name(kind) => Activation::new(kind),
            ActivationRepr::Full { kind, leaky_slope } => Activation { kind, leaky_slope },
        }
    }
}

/// An activation function; `leaky_slope` only matters for `LeakyReLU`.
///
/// Deserializes from either `"Tanh"` or `{"kind": "LeakyReLU", "leaky_slope": 0.05}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "ActivationRepr")]
pub struct Activation {
    pub kind: ActivationKind,
    pub leaky_slope: f64,
}

impl Activation {
    pub const fn new(kind: ActivationKind) -> Self {
        Self {
            kind,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub const fn tanh() -> Self {
        Self::new(ActivationKind::Tanh)
    }

    pub const fn relu() -> Self {
        Self::new(ActivationKind::ReLU)
    }

    pub const fn leaky_relu() -> Self {
        Self::new(ActivationKind::LeakyReLU)
    }

    pub const fn sigmoid() -> Self {
        Self::new(ActivationKind::Sigmoid)
    }

    pub const fn identity() -> Self {
        Self::new(ActivationKind::Identity)
    }

    pub fn with_slope(mut self, slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(OpalError::Argument(format!("leaky slope {slope} outside (0, 1)")));
        }
        self.leaky_slope = slope;
        Ok(self)
    }

    #[inline]
    pub fn apply<T: Real>(&self, a: T) -> T {
        match self.kind {
            ActivationKind::Tanh => a.tanh(),
            ActivationKind::ReLU => {
                if a >= T::zero() {
                    a
                } else {
                    T::zero()
                }
            }
            ActivationKind::LeakyReLU => {
                if a >= T::zero() {
                    a
                } else {
                    T::lit(self.leaky_slope) * a
                }
            }
            ActivationKind::Sigmoid => sigmoid(a),
            ActivationKind::Identity => a,
        }
    }

    /// First derivative given both the pre-activation `a` and its image
    /// `y = apply(a)`; avoids a second transcendental for tanh and sigmoid.
    #[inline]
    pub fn derivative_with_output<T: Real>(&self, a: T, y: T) -> T {
        match self.kind {
            ActivationKind::Tanh => T::one() - y * y,
            ActivationKind::Sigmoid => y * (T::one() - y),
            _ => self.derivative(a),
        }
    }

    /// First derivative. At exactly 0 the (leaky) ReLU uses the right derivative.
    #[inline]
    pub fn derivative<T: Real>(&self, a: T) -> T {
        match self.kind {
            ActivationKind::Tanh => {
                let t = a.tanh();
                T::one() - t * t
            }
            ActivationKind::ReLU => {
                if a >= T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::LeakyReLU => {
                if a >= T::zero() {
                    T::one()
                } else {
                    T::lit(self.leaky_slope)
                }
            }
            ActivationKind::Sigmoid => {
                let s = sigmoid(a);
                s * (T::one() - s)
            }
            ActivationKind::Identity => T::one(),
        }
    }
}

#[inline]
fn sigmoid<T: Real>(a: T) -> T {
    // split by sign so exp never overflows
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Layer sizes and activations. The output layer is always `Identity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub activations: Vec<Activation>,
    /// Whether each layer carries a bias column.
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

/// Storage location of one layer inside the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    /// Inputs plus the bias column when present.
    pub cols: usize,
    pub inputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    pub fn new(
        input_dim: usize,
        output_dim: usize,
        hidden_widths: Vec<usize>,
        activations: Vec<Activation>,
    ) -> Result<Self> {
        let arch = Self {
            input_dim,
            output_dim,
            hidden_widths,
            activations,
            bias: true,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// A single affine layer (no hidden layers).
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_widths: Vec::new(),
            activations: Vec::new(),
            bias: true,
        }
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    /// One hidden layer of the given width, as used when probing widths.
    pub fn single_hidden(input_dim: usize, output_dim: usize, width: usize, act: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            hidden_widths: vec![width],
            activations: vec![act],
            bias: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(OpalError::Shape("input and output dimensions must be positive".into()));
        }
        if self.hidden_widths.len() != self.activations.len() {
            return Err(OpalError::Shape(format!(
                "{} hidden widths but {} activations",
                self.hidden_widths.len(),
                self.activations.len()
            )));
        }
        if self.hidden_widths.contains(&0) {
            return Err(OpalError::Shape("hidden widths must be positive".into()));
        }
        for a in &self.activations {
            if a.kind == ActivationKind::LeakyReLU && !(a.leaky_slope > 0.0 && a.leaky_slope < 1.0) {
                return Err(OpalError::Argument(format!("leaky slope {} outside (0, 1)", a.leaky_slope)));
            }
        }
        Ok(())
    }

    /// Number of hidden layers `D`.
    pub fn depth(&self) -> usize {
        self.hidden_widths.len()
    }

    /// Number of weight layers (hidden layers plus the output layer).
    pub fn num_layers(&self) -> usize {
        self.hidden_widths.len() + 1
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer < self.activations.len() {
            self.activations[layer]
        } else {
            Activation::identity()
        }
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::with_capacity(self.num_layers());
        let mut fan_in = self.input_dim;
        let mut offset = 0;
        for l in 0..self.num_layers() {
            let rows = if l < self.hidden_widths.len() {
                self.hidden_widths[l]
            } else {
                self.output_dim
            };
            let cols = fan_in + usize::from(self.bias);
            shapes.push(LayerShape {
                rows,
                cols,
                inputs: fan_in,
                offset,
            });
            offset += rows * cols;
            fan_in = rows;
        }
        shapes
    }

    /// `P = sum over layers of (in + 1) * out`.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(LayerShape::len).sum()
    }

    /// Short label such as `2-[8 Tanh]-[8 ReLU]-1`.
    pub fn label(&self) -> String {
        let mut s = self.input_dim.to_string();
        for (w, a) in self.hidden_widths.iter().zip(&self.activations) {
            s.push_str(&format!("-[{w} {:?}]", a.kind));
        }
        s.push_str(&format!("-{}", self.output_dim));
        s
    }
}

/// Flat parameter vector together with its layer layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Real"))]
pub struct Parameters<T> {
    values: Vec<T>,
    #[serde(skip)]
    shapes: Vec<LayerShape>,
}

impl<T: Real> Parameters<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            values: vec![T::zero(); arch.param_count()],
            shapes: arch.layer_shapes(),
        }
    }

    /// Unflattens a vector of length `P`.
    pub fn from_flat(arch: &Architecture, values: Vec<T>) -> Result<Self> {
        let p = arch.param_count();
        if values.len() != p {
            return Err(OpalError::Shape(format!("expected {p} parameters, got {}", values.len())));
        }
        Ok(Self {
            values,
            shapes: arch.layer_shapes(),
        })
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn flatten(&self) -> Vec<T> {
        self.values.clone()
    }

    pub fn into_flat(self) -> Vec<T> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn layer(&self, l: usize) -> &[T] {
        &self.values[self.shapes[l].range()]
    }

    pub fn layer_mut(&mut self, l: usize) -> &mut [T] {
        let r = self.shapes[l].range();
        &mut self.values[r]
    }

    /// Weight `(row, col)` of layer `l`; the bias is the last column.
    pub fn weight(&self, l: usize, row: usize, col: usize) -> T {
        let s = self.shapes[l];
        self.values[s.offset + row * s.cols + col]
    }

    pub fn matches(&self, arch: &Architecture) -> bool {
        self.values.len() == arch.param_count() && self.shapes == arch.layer_shapes()
    }

    /// Re-attaches the layout after deserialization.
    pub fn with_layout(mut self, arch: &Architecture) -> Result<Self> {
        if self.values.len() != arch.param_count() {
            return Err(OpalError::Shape("parameter count does not match architecture".into()));
        }
        self.shapes = arch.layer_shapes();
        Ok(self)
    }
}

/// Retained connections; `true` keeps a parameter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparsityMask {
    keep: Vec<bool>,
    #[serde(skip)]
    shapes: Vec<LayerShape>,
}

impl SparsityMask {
    pub fn full(arch: &Architecture) -> Self {
        Self {
            keep: vec![true; arch.param_count()],
            shapes: arch.layer_shapes(),
        }
    }

    pub fn from_flags(arch: &Architecture, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != arch.param_count() {
            return Err(OpalError::Shape(format!(
                "mask has {} entries, architecture has {} parameters",
                keep.len(),
                arch.param_count()
            )));
        }
        Ok(Self {
            keep,
            shapes: arch.layer_shapes(),
        })
    }

    /// Keeps entries with `|theta_i| >= threshold` that this mask already keeps.
    pub fn threshold<T: Real>(&self, params: &[T], threshold: T) -> Self {
        Self {
            keep: self
                .keep
                .iter()
                .zip(params)
                .map(|(&k, v)| k && v.abs() >= threshold)
                .collect(),
            shapes: self.shapes.clone(),
        }
    }

    pub fn with_layout(mut self, arch: &Architecture) -> Result<Self> {
        if self.keep.len() != arch.param_count() {
            return Err(OpalError::Shape("mask length does not match architecture".into()));
        }
        self.shapes = arch.layer_shapes();
        Ok(self)
    }

    pub fn flags(&self) -> &[bool] {
        &self.keep
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn retained(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Fraction of retained connections.
    pub fn density(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.retained() as f64 / self.keep.len() as f64
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.keep[self.shapes[l].range()]
    }

    pub fn layer_retained(&self, l: usize) -> usize {
        self.layer(l).iter().filter(|&&k| k).count()
    }

    pub fn layer_is_full(&self, l: usize) -> bool {
        self.layer(l).iter().all(|&k| k)
    }
}

/// Zeroes masked entries. Idempotent.
pub fn apply_mask<T: Real>(params: &Parameters<T>, mask: &SparsityMask) -> Result<Parameters<T>> {
    if params.len() != mask.len() {
        return Err(OpalError::Shape(format!(
            "mask has {} entries, parameters have {}",
            mask.len(),
            params.len()
        )));
    }
    let mut out = params.clone();
    mask_in_place(out.as_mut_slice(), Some(mask));
    Ok(out)
}

pub(crate) fn mask_in_place<T: Real>(v: &mut [T], mask: Option<&SparsityMask>) {
    if let Some(m) = mask {
        for (x, &k) in v.iter_mut().zip(m.flags()) {
            if !k {
                *x = T::zero();
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward pass

/// Intermediate values of one forward pass.
///
/// `pre[l]` is the pre-activation of layer `l`; `post[0]` is the input and
/// `post[l + 1] = f(pre[l])`, so the network output is `post[L]`.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub pre: Vec<Vec<T>>,
    pub post: Vec<Vec<T>>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn output(&self) -> &[T] {
        self.post.last().expect("trace has at least the input")
    }
}

fn check_input<T>(arch: &Architecture, params: &Parameters<T>, x: &[T]) -> Result<()>
where
    T: Real,
{
    if x.len() != arch.input_dim {
        return Err(OpalError::Shape(format!(
            "input has dimension {}, architecture expects {}",
            x.len(),
            arch.input_dim
        )));
    }
    if params.len() != arch.param_count() {
        return Err(OpalError::Shape(format!(
            "parameters have length {}, architecture needs {}",
            params.len(),
            arch.param_count()
        )));
    }
    Ok(())
}

pub(crate) fn trace_unchecked<T: Real>(
    arch: &Architecture,
    shapes: &[LayerShape],
    theta: &[T],
    x: &[T],
) -> ForwardTrace<T> {
    let mut pre = Vec::with_capacity(shapes.len());
    let mut post = Vec::with_capacity(shapes.len() + 1);
    post.push(x.to_vec());
    for (l, s) in shapes.iter().enumerate() {
        let z = &post[l];
        let w = &theta[s.range()];
        let act = arch.activation(l);
        let mut a = Vec::with_capacity(s.rows);
        for i in 0..s.rows {
            let row = &w[i * s.cols..(i + 1) * s.cols];
            let mut acc = if arch.bias { row[s.inputs] } else { T::zero() };
            for j in 0..s.inputs {
                acc += row[j] * z[j];
            }
            a.push(acc);
        }
        post.push(a.iter().map(|&v| act.apply(v)).collect());
        pre.push(a);
    }
    ForwardTrace { pre, post }
}

/// Evaluates `u_theta(x)`.
pub fn forward<T: Real>(arch: &Architecture, params: &Parameters<T>, x: &[T]) -> Result<Vec<T>> {
    Ok(forward_trace(arch, params, x)?.post.pop().unwrap_or_default())
}

/// Forward pass exposing every pre-activation and activation.
pub fn forward_trace<T: Real>(
    arch: &Architecture,
    params: &Parameters<T>,
    x: &[T],
) -> Result<ForwardTrace<T>> {
    check_input(arch, params, x)?;
    Ok(trace_unchecked(arch, &arch.layer_shapes(), params.as_slice(), x))
}

/// Back-propagates an output-space vector to per-layer pre-activation
/// sensitivities: `deltas[l]` has length `rows` of layer `l`.
pub(crate) fn backprop_deltas<T: Real>(
    arch: &Architecture,
    shapes: &[LayerShape],
    theta: &[T],
    trace: &ForwardTrace<T>,
    seed: Vec<T>,
) -> Vec<Vec<T>> {
    let n = shapes.len();
    let mut deltas: Vec<Vec<T>> = vec![Vec::new(); n];
    deltas[n - 1] = seed;
    for l in (1..n).rev() {
        let s = shapes[l];
        let w = &theta[s.range()];
        let act = arch.activation(l - 1);
        let mut prev = vec![T::zero(); s.inputs];
        {
            let d = &deltas[l];
            for i in 0..s.rows {
                let di = d[i];
                if di == T::zero() {
                    continue;
                }
                let row = &w[i * s.cols..i * s.cols + s.inputs];
                for (p, wij) in prev.iter_mut().zip(row) {
                    *p += *wij * di;
                }
            }
        }
        for (p, a) in prev.iter_mut().zip(&trace.pre[l - 1]) {
            *p *= act.derivative(*a);
        }
        deltas[l - 1] = prev;
    }
    deltas
}

/// Accumulates `scale * delta (x) [z, 1]` into a flat gradient buffer.
pub(crate) fn accumulate_outer<T: Real>(
    arch: &Architecture,
    shapes: &[LayerShape],
    trace: &ForwardTrace<T>,
    deltas: &[Vec<T>],
    out: &mut [T],
) {
    for (l, s) in shapes.iter().enumerate() {
        let z = &trace.post[l];
        let block = &mut out[s.range()];
        for i in 0..s.rows {
            let di = deltas[l][i];
            if di == T::zero() {
                continue;
            }
            let row = &mut block[i * s.cols..(i + 1) * s.cols];
            for j in 0..s.inputs {
                row[j] += di * z[j];
            }
            if arch.bias {
                row[s.inputs] += di;
            }
        }
    }
}

/// `d u_theta(x) / d theta`, a `d_o x P` matrix in flattening order.
pub fn jacobian<T: Real>(arch: &Architecture, params: &Parameters<T>, x: &[T]) -> Result<DMatrix<T>> {
    check_input(arch, params, x)?;
    let shapes = arch.layer_shapes();
    let trace = trace_unchecked(arch, &shapes, params.as_slice(), x);
    let p = params.len();
    let mut jac = DMatrix::zeros(arch.output_dim, p);
    let mut row = vec![T::zero(); p];
    for k in 0..arch.output_dim {
        let mut seed = vec![T::zero(); arch.output_dim];
        seed[k] = T::one();
        let deltas = backprop_deltas(arch, &shapes, params.as_slice(), &trace, seed);
        row.iter_mut().for_each(|v| *v = T::zero());
        accumulate_outer(arch, &shapes, &trace, &deltas, &mut row);
        for (c, v) in row.iter().enumerate() {
            jac[(k, c)] = *v;
        }
    }
    Ok(jac)
}

/// Weight matrices and bias vectors of every layer, for batched evaluation.
pub(crate) struct LayerMatrices<T: Real> {
    weights: Vec<DMatrix<T>>,
    biases: Vec<Option<DVector<T>>>,
}

impl<T: Real> LayerMatrices<T> {
    pub(crate) fn new(arch: &Architecture, shapes: &[LayerShape], theta: &[T]) -> Self {
        let weights = shapes
            .iter()
            .map(|s| DMatrix::from_fn(s.rows, s.inputs, |i, j| theta[s.offset + i * s.cols + j]))
            .collect();
        let biases = shapes
            .iter()
            .map(|s| {
                arch.bias
                    .then(|| DVector::from_fn(s.rows, |i, _| theta[s.offset + i * s.cols + s.inputs]))
            })
            .collect();
        Self { weights, biases }
    }
}

/// Forward pass over a block of inputs stored column-wise
/// (`input_dim x rows`); returns `(pre, post)` with the same layout as
/// [`ForwardTrace`], one column per row.
pub(crate) fn batch_trace<T: Real>(
    arch: &Architecture,
    m: &LayerMatrices<T>,
    x: DMatrix<T>,
) -> (Vec<DMatrix<T>>, Vec<DMatrix<T>>) {
    let layers = m.weights.len();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers + 1);
    post.push(x);
    for l in 0..layers {
        let mut a = &m.weights[l] * &post[l];
        if let Some(b) = &m.biases[l] {
            for mut col in a.column_iter_mut() {
                col += b;
            }
        }
        let act = arch.activation(l);
        post.push(a.map(|v| act.apply(v)));
        pre.push(a);
    }
    (pre, post)
}

fn input_block<T: Real>(data: &Dataset<T>, rows: std::ops::Range<usize>) -> DMatrix<T> {
    let start = rows.start;
    DMatrix::from_fn(data.input_dim(), rows.len(), |i, k| data.input(start + k)[i])
}

fn residual_block<T: Real>(data: &Dataset<T>, rows: std::ops::Range<usize>, out: &DMatrix<T>) -> DMatrix<T> {
    let start = rows.start;
    DMatrix::from_fn(out.nrows(), rows.len(), |i, k| out[(i, k)] - data.output(start + k)[i])
}

// ---------------------------------------------------------------------------
// Negative log posterior

/// Rows per work item when summing over data. Fixed so reductions are
/// bit-identical regardless of thread count.
const CHUNK: usize = 64;

/// The negative log posterior `-ln pi_like - ln pi_pr` (constants dropped)
/// over the unmasked parameters.
#[derive(Clone, Copy)]
pub struct Objective<'a, T: Real> {
    pub arch: &'a Architecture,
    pub data: &'a Dataset<T>,
    pub sigma: &'a InferenceHyperParams<T>,
    pub prior: &'a PriorKind<T>,
    pub prior_mean: Option<&'a [T]>,
    pub mask: Option<&'a SparsityMask>,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn check(&self) -> Result<()> {
        self.arch.validate()?;
        let layers = self.arch.num_layers();
        self.sigma.validate(layers)?;
        if !self.data.is_empty()
            && (self.data.input_dim() != self.arch.input_dim || self.data.output_dim() != self.arch.output_dim)
        {
            return Err(OpalError::Shape("dataset dimensions do not match architecture".into()));
        }
        if let PriorKind::Laplace { beta } = self.prior {
            if beta.len() != layers || beta.iter().any(|b| !(*b > T::zero()) || !b.finite()) {
                return Err(OpalError::Argument("Laplace scale must be positive, one per layer".into()));
            }
        }
        if let Some(m) = self.prior_mean {
            if m.len() != self.arch.param_count() {
                return Err(OpalError::Shape("prior mean length does not match parameters".into()));
            }
        }
        if let Some(m) = self.mask {
            if m.len() != self.arch.param_count() {
                return Err(OpalError::Shape("mask length does not match parameters".into()));
            }
        }
        Ok(())
    }

    fn prior_offset(&self, i: usize) -> T {
        self.prior_mean.map_or(T::zero(), |m| m[i])
    }

    fn kept(&self, i: usize) -> bool {
        self.mask.is_none_or(|m| m.keeps(i))
    }

    /// Residual sum of squares over all outputs.
    pub fn sum_sq_residuals(&self, theta: &[T]) -> T {
        let shapes = self.arch.layer_shapes();
        let mats = LayerMatrices::new(self.arch, &shapes, theta);
        let n = self.data.len();
        let partials: Vec<T> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = c * CHUNK..((c + 1) * CHUNK).min(n);
                let (_, post) = batch_trace(self.arch, &mats, input_block(self.data, rows.clone()));
                let r = residual_block(self.data, rows, post.last().expect("output layer"));
                r.iter().fold(T::zero(), |a, v| a + *v * *v)
            })
            .collect();
        partials.into_iter().fold(T::zero(), |a, b| a + b)
    }

    /// `0.5 * RSS / sigma_noise^2` and its gradient (masked entries zero).
    pub fn misfit_and_grad(&self, theta: &[T]) -> (T, Vec<T>) {
        let shapes = self.arch.layer_shapes();
        let mats = LayerMatrices::new(self.arch, &shapes, theta);
        let p = theta.len();
        let n = self.data.len();
        let inv_var = T::one() / (self.sigma.sigma_noise * self.sigma.sigma_noise);
        let partials: Vec<(T, Vec<T>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let rows = c * CHUNK..((c + 1) * CHUNK).min(n);
                let (pre, post) = batch_trace(self.arch, &mats, input_block(self.data, rows.clone()));
                let r = residual_block(self.data, rows, post.last().expect("output layer"));
                let rss = r.iter().fold(T::zero(), |a, v| a + *v * *v);
                let mut g = vec![T::zero(); p];
                let mut delta = r * inv_var;
                for l in (0..shapes.len()).rev() {
                    let s = shapes[l];
                    let gw = &delta * post[l].transpose();
                    for i in 0..s.rows {
                        let row = &mut g[s.offset + i * s.cols..s.offset + (i + 1) * s.cols];
                        for j in 0..s.inputs {
                            row[j] = gw[(i, j)];
                        }
                        if self.arch.bias {
                            row[s.inputs] = delta.row(i).iter().fold(T::zero(), |a, v| a + *v);
                        }
                    }
                    if l > 0 {
                        let act = self.arch.activation(l - 1);
                        let mut back = mats.weights[l].transpose() * &delta;
                        back.zip_zip_apply(&pre[l - 1], &post[l], |b, a, y| *b *= act.derivative_with_output(a, y));
                        delta = back;
                    }
                }
                (rss, g)
            })
            .collect();
        let mut grad = vec![T::zero(); p];
        let mut rss = T::zero();
        for (r, g) in partials {
            rss += r;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        mask_in_place(&mut grad, self.mask);
        (T::lit(0.5) * rss * inv_var, grad)
    }

    /// Prior energy: Gaussian `0.5 sum (theta - mean)^2 / sigma_pr^2` or
    /// Laplace `sum |theta - mean| / beta`, per layer.
    pub fn prior_energy(&self, theta: &[T]) -> T {
        let shapes = self.arch.layer_shapes();
        let mut e = T::zero();
        for (l, s) in shapes.iter().enumerate() {
            match self.prior {
                PriorKind::Gaussian => {
                    let prec = T::one() / (self.sigma.sigma_pr[l] * self.sigma.sigma_pr[l]);
                    for i in s.range() {
                        if self.kept(i) {
                            let d = theta[i] - self.prior_offset(i);
                            e += T::lit(0.5) * prec * d * d;
                        }
                    }
                }
                PriorKind::Laplace { beta } => {
                    let inv = T::one() / beta[l];
                    for i in s.range() {
                        if self.kept(i) {
                            e += inv * (theta[i] - self.prior_offset(i)).abs();
                        }
                    }
                }
            }
        }
        e
    }

    /// Gradient of the prior energy. The Laplace subgradient at the mean is 0.
    pub fn prior_grad(&self, theta: &[T]) -> Vec<T> {
        let shapes = self.arch.layer_shapes();
        let mut g = vec![T::zero(); theta.len()];
        for (l, s) in shapes.iter().enumerate() {
            for i in s.range() {
                if !self.kept(i) {
                    continue;
                }
                let d = theta[i] - self.prior_offset(i);
                g[i] = match self.prior {
                    PriorKind::Gaussian => d / (self.sigma.sigma_pr[l] * self.sigma.sigma_pr[l]),
                    PriorKind::Laplace { beta } => {
                        if d > T::zero() {
                            T::one() / beta[l]
                        } else if d < T::zero() {
                            -T::one() / beta[l]
                        } else {
                            T::zero()
                        }
                    }
                };
            }
        }
        g
    }

    pub fn value(&self, theta: &[T]) -> T {
        let rss = self.sum_sq_residuals(theta);
        T::lit(0.5) * rss / (self.sigma.sigma_noise * self.sigma.sigma_noise) + self.prior_energy(theta)
    }

    pub fn value_and_grad(&self, theta: &[T]) -> (T, Vec<T>) {
        let (misfit, mut g) = self.misfit_and_grad(theta);
        for (a, b) in g.iter_mut().zip(self.prior_grad(theta)) {
            *a += b;
        }
        (misfit + self.prior_energy(theta), g)
    }
}

/// Gradient of the negative log posterior with respect to the flattened
/// parameters; masked entries are reported as zero.
pub fn grad_neg_log_posterior<T: Real>(
    arch: &Architecture,
    params: &Parameters<T>,
    data: &Dataset<T>,
    sigma: &InferenceHyperParams<T>,
    prior: &PriorKind<T>,
    mask: Option<&SparsityMask>,
) -> Result<Vec<T>> {
    let obj = Objective {
        arch,
        data,
        sigma,
        prior,
        prior_mean: None,
        mask,
    };
    obj.check()?;
    if params.len() != arch.param_count() {
        return Err(OpalError::Shape("parameters do not match architecture".into()));
    }
    Ok(obj.value_and_grad(params.as_slice()).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplace::InferenceHyperParams;
    use proptest::prelude::*;

    fn one_param_linear() -> Architecture {
        Architecture::linear(1, 1).without_bias()
    }

    #[test]
    fn affine_layer_forward() {
        let arch = Architecture::linear(1, 1);
        let p = Parameters::<f64>::from_flat(&arch, vec![2.0, 1.0]).unwrap();
        assert_eq!(forward(&arch, &p, &[3.0]).unwrap(), vec![7.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let arch = Architecture::single_hidden(1, 1, 1, Activation::tanh());
        let p = Parameters::<f64>::from_flat(&arch, vec![5.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(forward(&arch, &p, &[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn input_dimension_mismatch() {
        let arch = Architecture::linear(2, 1);
        let p = Parameters::<f64>::zeros(&arch);
        assert!(matches!(forward(&arch, &p, &[1.0]), Err(OpalError::Shape(_))));
        assert!(matches!(jacobian(&arch, &p, &[1.0, 2.0, 3.0]), Err(OpalError::Shape(_))));
    }

    #[test]
    fn param_count_and_layout() {
        let arch = Architecture::new(2, 1, vec![3, 4], vec![Activation::tanh(); 2]).unwrap();
        assert_eq!(arch.param_count(), 3 * 3 + 4 * 4 + 5);
        let shapes = arch.layer_shapes();
        assert_eq!(shapes[1].offset, 9);
        assert_eq!(shapes[2].cols, 5);
        assert!(Architecture::new(2, 1, vec![3], vec![]).is_err());
        assert!(Architecture::new(2, 1, vec![0], vec![Activation::tanh()]).is_err());
    }

    #[test]
    fn activation_derivatives_at_zero_use_right_limit() {
        assert_eq!(Activation::relu().derivative(0.0f64), 1.0);
        assert_eq!(Activation::leaky_relu().derivative(0.0f64), 1.0);
        assert_eq!(Activation::leaky_relu().derivative(-1.0f64), 0.01);
        assert!((Activation::sigmoid().apply(-800.0f64)).abs() < 1e-300);
        assert!((Activation::sigmoid().apply(800.0f64) - 1.0).abs() < 1e-15);
        assert!(Activation::leaky_relu().with_slope(1.5).is_err());
    }

    #[test]
    fn activation_deserializes_from_name_or_struct() {
        let a: Activation = serde_json::from_str("\"Tanh\"").unwrap();
        assert_eq!(a, Activation::tanh());
        let b: Activation = serde_json::from_str(r#"{"kind":"LeakyReLU","leaky_slope":0.2}"#).unwrap();
        assert_eq!(b.leaky_slope, 0.2);
    }

    #[test]
    fn gradient_single_param_examples() {
        let arch = one_param_linear();
        let data = Dataset::<f64>::from_rows(&[vec![1.0]], &[vec![1.0]]).unwrap();
        let sigma = InferenceHyperParams::<f64>::new(vec![1.0], 1.0).unwrap();
        let p = Parameters::<f64>::from_flat(&arch, vec![0.0]).unwrap();
        let g = grad_neg_log_posterior(&arch, &p, &data, &sigma, &PriorKind::Gaussian, None).unwrap();
        assert_eq!(g, vec![-1.0]);

        let empty = Dataset::empty(1, 1);
        let sigma = InferenceHyperParams::<f64>::new(vec![2.0], 1.0).unwrap();
        let p = Parameters::<f64>::from_flat(&arch, vec![3.0]).unwrap();
        let g = grad_neg_log_posterior(&arch, &p, &empty, &sigma, &PriorKind::Gaussian, None).unwrap();
        assert_eq!(g, vec![0.75]);
    }

    #[test]
    fn laplace_subgradient_at_zero_is_zero() {
        let arch = one_param_linear();
        let empty = Dataset::empty(1, 1);
        let sigma = InferenceHyperParams::<f64>::new(vec![1.0], 1.0).unwrap();
        let prior = PriorKind::Laplace { beta: vec![0.5] };
        let p = Parameters::<f64>::from_flat(&arch, vec![0.0]).unwrap();
        let g = grad_neg_log_posterior(&arch, &p, &empty, &sigma, &prior, None).unwrap();
        assert_eq!(g, vec![0.0]);
        let p = Parameters::<f64>::from_flat(&arch, vec![-0.1]).unwrap();
        let g = grad_neg_log_posterior(&arch, &p, &empty, &sigma, &prior, None).unwrap();
        assert_eq!(g, vec![-2.0]);
    }

    #[test]
    fn zero_weights_tanh_bias_jacobian() {
        let arch = Architecture::new(2, 2, vec![3, 2], vec![Activation::tanh(); 2]).unwrap();
        let p = Parameters::<f64>::zeros(&arch);
        let j = jacobian(&arch, &p, &[0.3, -0.7]).unwrap();
        let out = arch.layer_shapes()[2];
        for k in 0..2 {
            let bias_col = out.offset + k * out.cols + out.inputs;
            assert_eq!(j[(k, bias_col)], 1.0);
            for other in 0..2 {
                if other != k {
                    assert_eq!(j[(other, bias_col)], 0.0);
                }
            }
        }
    }

    #[test]
    fn one_param_jacobian() {
        let arch = one_param_linear();
        let p = Parameters::<f64>::from_flat(&arch, vec![0.4]).unwrap();
        assert_eq!(jacobian(&arch, &p, &[3.0]).unwrap()[(0, 0)], 3.0);
    }

    #[test]
    fn mask_examples() {
        let arch = Architecture::new(2, 1, vec![5], vec![Activation::tanh()]).unwrap();
        let p = Parameters::<f64>::from_flat(&arch, (1..=21).map(f64::from).collect()).unwrap();
        assert_eq!(apply_mask(&p, &SparsityMask::full(&arch)).unwrap(), p);
        let none = SparsityMask::from_flags(&arch, vec![false; 21]).unwrap();
        assert!(apply_mask(&p, &none).unwrap().as_slice().iter().all(|v| *v == 0.0));
        let other = Architecture::linear(1, 1);
        assert!(apply_mask(&p, &SparsityMask::full(&other)).is_err());
    }

    #[test]
    fn mask_removing_thirty_two_percent() {
        let arch = Architecture::new(4, 1, vec![9], vec![Activation::tanh()]).unwrap();
        let p_count = arch.param_count();
        assert_eq!(p_count, 55);
        // 100 parameters make 32% an exact count
        let arch = Architecture::new(9, 1, vec![9], vec![Activation::tanh()]).unwrap();
        assert_eq!(arch.param_count(), 100);
        let flags: Vec<bool> = (0..100).map(|i| i % 25 >= 8).collect();
        let mask = SparsityMask::from_flags(&arch, flags).unwrap();
        let p = Parameters::<f64>::from_flat(&arch, vec![1.0; 100]).unwrap();
        let masked = apply_mask(&p, &mask).unwrap();
        let nonzero = masked.as_slice().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nonzero, 68);
        assert_eq!(mask.density(), 0.68);
    }

    proptest! {
        #[test]
        fn flatten_round_trip(v in proptest::collection::vec(-1e6f64..1e6, 21)) {
            let arch = Architecture::new(2, 1, vec![5], vec![Activation::sigmoid()]).unwrap();
            let p = Parameters::<f64>::from_flat(&arch, v.clone()).unwrap();
            prop_assert_eq!(p.flatten(), v);
        }

        #[test]
        fn batched_gradient_matches_finite_differences(
            v in proptest::collection::vec(-0.8f64..0.8, 31),
            seed in 0u64..1000,
            act in 0usize..4,
        ) {
            let kind = ActivationKind::HIDDEN[act];
            let arch = Architecture::new(2, 1, vec![4, 3], vec![Activation::new(kind); 2]).unwrap();
            prop_assert_eq!(arch.param_count(), 31);
            // 150 rows spans three chunks, the last one partial
            let rows: Vec<Vec<f64>> = (0..150)
                .map(|i| {
                    let h = (i as u64 * 2654435761 + seed) % 1000;
                    vec![h as f64 / 500.0 - 1.0, ((h * 7) % 1000) as f64 / 500.0 - 1.0]
                })
                .collect();
            let outs: Vec<Vec<f64>> = rows.iter().map(|r| vec![(r[0] * 2.0).sin() + r[1]]).collect();
            let data = Dataset::from_rows(&rows, &outs).unwrap();
            let sigma = InferenceHyperParams::new(vec![1.0, 2.0, 0.5], 0.3).unwrap();
            let obj = Objective {
                arch: &arch,
                data: &data,
                sigma: &sigma,
                prior: &PriorKind::Gaussian,
                prior_mean: None,
                mask: None,
            };
            let (f, g) = obj.value_and_grad(&v);
            prop_assert!((f - obj.value(&v)).abs() <= 1e-12 * f.abs().max(1.0));
            let rss: f64 = (0..data.len())
                .map(|i| {
                    let p = Parameters::from_flat(&arch, v.clone()).unwrap();
                    let u = forward(&arch, &p, data.input(i)).unwrap()[0];
                    (u - data.output(i)[0]).powi(2)
                })
                .sum();
            prop_assert!((rss - obj.sum_sq_residuals(&v)).abs() <= 1e-9 * rss.max(1.0));
            // a kink inside the stencil makes central differences average the
            // one-sided slopes, so only compare where the loss is smooth
            if matches!(kind, ActivationKind::ReLU | ActivationKind::LeakyReLU) {
                let p = Parameters::from_flat(&arch, v.clone()).unwrap();
                let near_kink = (0..data.len()).any(|i| {
                    let tr = forward_trace(&arch, &p, data.input(i)).unwrap();
                    tr.pre[..2].iter().flatten().any(|a| a.abs() < 1e-4)
                });
                prop_assume!(!near_kink);
            }
            let h = 1e-6;
            for k in 0..v.len() {
                let mut a = v.clone();
                let mut b = v.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (obj.value(&a) - obj.value(&b)) / (2.0 * h);
                prop_assert!((fd - g[k]).abs() <= 1e-5 * fd.abs().max(1.0), "k {} fd {} g {}", k, fd, g[k]);
            }
        }

        #[test]
        fn mask_is_idempotent(v in proptest::collection::vec(-1.0f64..1.0, 21), t in 0.0f64..1.0) {
            let arch = Architecture::new(2, 1, vec![5], vec![Activation::relu()]).unwrap();
            let p = Parameters::<f64>::from_flat(&arch, v.clone()).unwrap();
            let m = SparsityMask::full(&arch).threshold(&v, t);
            let once = apply_mask(&p, &m).unwrap();
            let twice = apply_mask(&once, &m).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
