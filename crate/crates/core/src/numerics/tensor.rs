use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::NumericsError;

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        if shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::InvalidShape { shape });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(NumericsError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Samples every entry from a zero-mean normal with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite, nonnegative std");
        Self::from_fn(shape, |_| normal.sample(rng))
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Extent of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("rank >= 1")
    }

    /// Number of last-dimension slices.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &e) in index.iter().zip(&self.shape) {
            assert!(i < e);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, NumericsError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() || shape.iter().any(|&e| e == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Plain (non-recorded) matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (p, q) = as_matrix(&self.shape, "matmul")?;
        let (q2, r) = as_matrix(&other.shape, "matmul")?;
        if q != q2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; p * r];
        super::kernels::gemm(p, q, r, &self.data, false, &other.data, false, &mut out, false);
        Tensor::new(vec![p, r], out)
    }

    /// `self · otherᵀ` for rank-2 tensors with equal column counts.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor, NumericsError> {
        let (p, q) = as_matrix(&self.shape, "matmul_nt")?;
        let (r, q2) = as_matrix(&other.shape, "matmul_nt")?;
        if q != q2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut out = vec![0.0; p * r];
        super::kernels::gemm(p, q, r, &self.data, false, &other.data, true, &mut out, false);
        Tensor::new(vec![p, r], out)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn as_matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize), NumericsError> {
    match shape {
        [p, q] => Ok((*p, *q)),
        _ => Err(NumericsError::RankMismatch {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}
