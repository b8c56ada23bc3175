//! Dense f64 vectors and matrices, activations, the named parameter store and
//! finite-difference gradient checking.
//!
//! Shape mismatches inside the arithmetic kernels are programming errors and
//! panic with a message naming both operands. Everything that can fail on
//! user input (gradient checks on non-finite losses, store lookups) returns
//! [`Result`].

use std::collections::BTreeMap;
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// SplitMix64 finalizer; used to derive independent child seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed keyed by a string label (FNV-1a over the bytes, then mixed).
pub fn seed_for(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    mix_seed(seed, h)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Vector(values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// `[self, other]`
    pub fn concat(&self, other: &Vector) -> Vector {
        let mut data = Vec::with_capacity(self.dim() + other.dim());
        data.extend_from_slice(&self.0);
        data.extend_from_slice(&other.0);
        Vector(data)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(
            self.dim(),
            other.dim(),
            "dot: lhs dim {} vs rhs dim {}",
            self.dim(),
            other.dim()
        );
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, k: f64) -> Vector {
        Vector(self.iter().map(|v| v * k).collect())
    }

    pub fn add(&self, other: &Vector) -> Vector {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Vector) -> Vector {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn zip_with(&self, other: &Vector, f: impl Fn(f64, f64) -> f64) -> Vector {
        assert_eq!(
            self.dim(),
            other.dim(),
            "elementwise: lhs dim {} vs rhs dim {}",
            self.dim(),
            other.dim()
        );
        Vector(self.iter().zip(other.iter()).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn add_assign(&mut self, other: &Vector) {
        self.axpy(1.0, other);
    }

    /// `self += k * other`
    pub fn axpy(&mut self, k: f64, other: &Vector) {
        assert_eq!(
            self.dim(),
            other.dim(),
            "axpy: lhs dim {} vs rhs dim {}",
            self.dim(),
            other.dim()
        );
        for (a, b) in self.0.iter_mut().zip(other.iter()) {
            *a += k * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn split_at(&self, mid: usize) -> (Vector, Vector) {
        let (a, b) = self.0.split_at(mid);
        (Vector(a.to_vec()), Vector(b.to_vec()))
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "from_vec: {rows}x{cols} needs {} values, got {}",
            rows * cols,
            data.len()
        );
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// `W · x` (no bias).
    pub fn affine(&self, x: &[f64]) -> Vector {
        assert_eq!(
            self.cols,
            x.len(),
            "affine: W is {}x{} but x has dim {}",
            self.rows,
            self.cols,
            x.len()
        );
        let out: Vec<f64> = (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect();
        debug_assert!(out.iter().all(|v| v.is_finite()), "affine produced non-finite output");
        Vector(out)
    }

    /// `Wᵀ · g`, the input gradient of [`Matrix::affine`].
    pub fn affine_transpose(&self, g: &[f64]) -> Vector {
        assert_eq!(
            self.rows,
            g.len(),
            "affine_transpose: W is {}x{} but g has dim {}",
            self.rows,
            self.cols,
            g.len()
        );
        let mut out = vec![0.0; self.cols];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(i)) {
                *o += gi * w;
            }
        }
        Vector(out)
    }

    /// `self += k · (a ⊗ b)`; the weight gradient of [`Matrix::affine`].
    pub fn add_outer(&mut self, k: f64, a: &[f64], b: &[f64]) {
        assert!(
            a.len() == self.rows && b.len() == self.cols,
            "add_outer: target {}x{} vs outer {}x{}",
            self.rows,
            self.cols,
            a.len(),
            b.len()
        );
        for (i, &ai) in a.iter().enumerate() {
            let s = k * ai;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }

    /// `self += k · other`
    pub fn axpy(&mut self, k: f64, other: &Matrix) {
        assert!(
            self.same_shape(other),
            "axpy: lhs {}x{} vs rhs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
    }

    pub fn scale(&self, k: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply_scalar(self, t: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(t),
            Activation::Tanh => t.tanh(),
            Activation::Relu => t.max(0.0),
        }
    }

    pub fn apply(self, x: &[f64]) -> Vector {
        Vector(x.iter().map(|&t| self.apply_scalar(t)).collect())
    }
}

/// Logistic sigmoid, evaluated on the branch that cannot overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn activate(kind: Activation, x: &[f64]) -> Vector {
    kind.apply(x)
}

/// A parameter value: every learnable tensor is rank 1 or rank 2.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    Vector(Vector),
    Matrix(Matrix),
}

impl Tensor {
    pub fn shape(&self) -> Vec<usize> {
        match self {
            Tensor::Vector(v) => vec![v.dim()],
            Tensor::Matrix(m) => vec![m.rows(), m.cols()],
        }
    }

    pub fn data(&self) -> &[f64] {
        match self {
            Tensor::Vector(v) => v,
            Tensor::Matrix(m) => m.data(),
        }
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        match self {
            Tensor::Vector(v) => v,
            Tensor::Matrix(m) => m.data_mut(),
        }
    }

    pub fn zeros_like(&self) -> Tensor {
        match self {
            Tensor::Vector(v) => Tensor::Vector(Vector::zeros(v.dim())),
            Tensor::Matrix(m) => Tensor::Matrix(Matrix::zeros(m.rows(), m.cols())),
        }
    }

    pub fn from_shape(shape: &[usize], data: Vec<f64>) -> Option<Tensor> {
        match *shape {
            [n] if data.len() == n => Some(Tensor::Vector(Vector(data))),
            [r, c] if data.len() == r * c => Some(Tensor::Matrix(Matrix::from_vec(r, c, data))),
            _ => None,
        }
    }

    pub fn as_matrix(&self) -> Option<&Matrix> {
        match self {
            Tensor::Matrix(m) => Some(m),
            Tensor::Vector(_) => None,
        }
    }

    pub fn as_vector(&self) -> Option<&Vector> {
        match self {
            Tensor::Vector(v) => Some(v),
            Tensor::Matrix(_) => None,
        }
    }
}

impl From<Matrix> for Tensor {
    fn from(m: Matrix) -> Self {
        Tensor::Matrix(m)
    }
}

impl From<Vector> for Tensor {
    fn from(v: Vector) -> Self {
        Tensor::Vector(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Uniform in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
    FanUniform,
    /// Uniform in `[-limit, limit]`.
    Uniform { limit: f64 },
}

/// Deterministic initialization. A matrix `rows x cols` has `fan_out = rows`,
/// `fan_in = cols`; a vector of dim `n` is treated as `n x 1`.
pub fn init_params(shape: &[usize], seed: u64, scheme: InitScheme) -> Tensor {
    assert!(
        !shape.is_empty() && shape.len() <= 2 && shape.iter().all(|&s| s > 0),
        "init_params: invalid shape {shape:?}"
    );
    let (fan_out, fan_in) = match *shape {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => unreachable!(),
    };
    let limit = match scheme {
        InitScheme::FanUniform => (6.0 / (fan_in + fan_out) as f64).sqrt(),
        InitScheme::Uniform { limit } => limit,
    };
    let mut rng = rng_from(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::from_shape(shape, data).expect("shape and data agree")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameters with gradient buffers. Iteration order is sorted by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts (or replaces) a value; the gradient buffer starts at zero.
    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Tensor>) {
        let value = value.into();
        let grad = value.zeros_like();
        self.entries.insert(name.into(), Param { value, grad });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        self.value(name)?
            .as_matrix()
            .ok_or_else(|| Error::Shape(format!("parameter `{name}` is not a matrix")))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    /// Adds `delta` into the gradient buffer of `name`.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}` has shape {:?}, expected {:?}",
                delta.shape(),
                p.grad.shape()
            )));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.data().len()).sum()
    }
}

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst_entry: String,
    pub entries_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradient buffers of `store` against central differences of
/// `loss_fn`, entry by entry.
pub fn grad_check<F>(store: &ParamStore, eps: f64, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> f64,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("grad_check eps must be positive, got {eps}")));
    }
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_entry: String::new(),
        entries_checked: 0,
    };
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let analytic = store.grad(name)?.data().to_vec();
        for (idx, &a) in analytic.iter().enumerate() {
            let orig = probe.get(name)?.value.data()[idx];
            probe.get_mut(name)?.value.data_mut()[idx] = orig + eps;
            let up = loss_fn(&probe);
            probe.get_mut(name)?.value.data_mut()[idx] = orig - eps;
            let down = loss_fn(&probe);
            probe.get_mut(name)?.value.data_mut()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFiniteGradCheck {
                    param: format!("{name}[{idx}]"),
                });
            }
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.entries_checked += 1;
            if err > report.max_rel_err || report.worst_entry.is_empty() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst_entry = format!("{name}[{idx}]");
            }
        }
    }
    Ok(report)
}
