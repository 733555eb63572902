//! Dense row-major `f64` tensors and the handful of kernels the toy models need.
//!
//! Every reduction runs sequentially in row-major order so results are
//! bitwise reproducible across runs and platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    BadLength { len: usize, shape: Vec<usize> },
    #[error("{op} needs a second operand")]
    MissingOperand { op: &'static str },
    #[error("cosine undefined: both vectors are zero")]
    UndefinedCosine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadLength {
                len: data.len(),
                shape,
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() < 2 {
            self.data.len()
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn same_shape(&self, other: &Self, op: &'static str) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<(), TensorError> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64, TensorError> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Column sums of a 2-D tensor, as a 1-D tensor.
    pub fn sum_rows(&self) -> Self {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Self::from_vec(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a (n×k) · b (k×m)`, accumulating over `k` in ascending order.
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, TensorError> {
    let (n, k) = (a.rows(), a.cols());
    let (k2, m) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a.data[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bpj) in row.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    Ok(DenseTensor {
        shape: vec![n, m],
        data: out,
    })
}

/// `a (n×k) · bᵀ` where `b` is `m×k`.
pub fn matmul_transposed(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor, TensorError> {
    let (n, k) = (a.rows(), a.cols());
    let (m, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_transposed",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * m + j] = acc;
        }
    }
    Ok(DenseTensor {
        shape: vec![n, m],
        data: out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    /// Softmax over the last dimension of a 2-D tensor.
    SoftmaxRows,
}

impl ElementwiseOp {
    fn name(&self) -> &'static str {
        match self {
            ElementwiseOp::Add => "add",
            ElementwiseOp::Sub => "sub",
            ElementwiseOp::Mul => "mul",
            ElementwiseOp::Scale(_) => "scale",
            ElementwiseOp::Relu => "relu",
            ElementwiseOp::SoftmaxRows => "softmax",
        }
    }
}

pub fn elementwise(
    op: ElementwiseOp,
    a: &DenseTensor,
    b: Option<&DenseTensor>,
) -> Result<DenseTensor, TensorError> {
    let binary = |f: fn(f64, f64) -> f64| -> Result<DenseTensor, TensorError> {
        let b = b.ok_or(TensorError::MissingOperand { op: op.name() })?;
        a.same_shape(b, op.name())?;
        Ok(DenseTensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect(),
        })
    };
    match op {
        ElementwiseOp::Add => binary(|x, y| x + y),
        ElementwiseOp::Sub => binary(|x, y| x - y),
        ElementwiseOp::Mul => binary(|x, y| x * y),
        ElementwiseOp::Scale(s) => Ok(map(a, |x| x * s)),
        ElementwiseOp::Relu => Ok(map(a, |x| x.max(0.0))),
        ElementwiseOp::SoftmaxRows => Ok(softmax_rows(a)),
    }
}

fn map(a: &DenseTensor, f: impl Fn(f64) -> f64) -> DenseTensor {
    DenseTensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| f(x)).collect(),
    }
}

pub fn softmax_rows(a: &DenseTensor) -> DenseTensor {
    let c = a.cols().max(1);
    let mut data = a.data.clone();
    for row in data.chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    DenseTensor {
        shape: a.shape.clone(),
        data,
    }
}

/// `(‖a‖, ‖b‖, cos(a, b))`. A zero vector against a nonzero one has cosine 0.
pub fn norms_and_cosine(a: &DenseTensor, b: &DenseTensor) -> Result<(f64, f64, f64), TensorError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 && nb == 0.0 {
        return Err(TensorError::UndefinedCosine);
    }
    if na == 0.0 || nb == 0.0 {
        return Ok((na, nb, 0.0));
    }
    Ok((na, nb, (dot / (na * nb)).clamp(-1.0, 1.0)))
}

/// Seeded ChaCha8 stream. Identical seeds give identical streams everywhere.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, keyed by `stream`.
    pub fn fork(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self {
            seed: self.seed,
            rng,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn normal_vec(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.normal()).collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> DenseTensor {
        let n = shape.iter().product();
        DenseTensor {
            shape: shape.to_vec(),
            data: self.normal_vec(n, std),
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &DenseTensor, b: &DenseTensor) -> Vec<f64> {
        let (n, k, m) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.data()[i * k + p] * b.data()[p * m + j];
                }
                out[i * m + j] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let v = DenseTensor::new(vec![3, 1], vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(matmul(&DenseTensor::identity(3), &v).unwrap(), v);
        let a = DenseTensor::new(vec![1, 1], vec![3.0]).unwrap();
        let b = DenseTensor::new(vec![1, 1], vec![-0.5]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-1.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngState::new(11);
        let a = rng.normal_tensor(&[3, 4], 1.0);
        let b = rng.normal_tensor(&[4, 2], 1.0);
        let c = matmul(&a, &b).unwrap();
        for (x, y) in c.data().iter().zip(naive(&a, &b)) {
            assert!((x - y).abs() <= f64::EPSILON * 4.0 * y.abs().max(1.0));
        }
        let bt = b.transpose();
        assert_eq!(matmul_transposed(&a, &bt).unwrap(), c);
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let x = DenseTensor::from_vec(vec![-1.0, 2.0]);
        let z = DenseTensor::zeros(&[2]);
        assert_eq!(elementwise(ElementwiseOp::Add, &x, Some(&z)).unwrap(), x);
        assert_eq!(
            elementwise(ElementwiseOp::Relu, &x, None).unwrap().data(),
            &[0.0, 2.0]
        );
        assert!(elementwise(ElementwiseOp::Mul, &x, None).is_err());
        assert!(elementwise(ElementwiseOp::Sub, &x, Some(&DenseTensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngState::new(3);
        let x = rng.normal_tensor(&[5, 7], 4.0);
        let s = elementwise(ElementwiseOp::SoftmaxRows, &x, None).unwrap();
        for i in 0..5 {
            let mut total = 0.0;
            for v in s.row(i) {
                total += v;
            }
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_cases() {
        let v = DenseTensor::from_vec(vec![1.0, 2.0, -3.0]);
        let neg = elementwise(ElementwiseOp::Scale(-1.0), &v, None).unwrap();
        assert!((norms_and_cosine(&v, &v).unwrap().2 - 1.0).abs() < 1e-15);
        assert!((norms_and_cosine(&v, &neg).unwrap().2 + 1.0).abs() < 1e-15);
        let e1 = DenseTensor::from_vec(vec![1.0, 0.0]);
        let e2 = DenseTensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(norms_and_cosine(&e1, &e2).unwrap().2, 0.0);
        let z = DenseTensor::zeros(&[2]);
        assert_eq!(norms_and_cosine(&z, &z), Err(TensorError::UndefinedCosine));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = RngState::new(42);
        let mut b = RngState::new(42);
        assert_eq!(a.normal_vec(16, 1.0), b.normal_vec(16, 1.0));
        let mut f1 = a.fork(1);
        let mut f2 = a.fork(2);
        assert_ne!(f1.uniform(), f2.uniform());
    }
}
